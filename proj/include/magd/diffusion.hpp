#pragma once
// Noise schedule, training objective, classifier-free guidance and DDIM sampling.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "magd/model.hpp"
#include "magd/rng.hpp"
#include "magd/schedule.hpp"

namespace magd {

/// sqrt(ab_t) x0 + sqrt(1 - ab_t) eps. t == -1 returns x0.
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const Schedule& s);

// ---- training ----

struct TrainExample {
  Tensor x0;                // [3,H,W] in [-1,1]
  std::vector<int> prompt;  // padded
};

struct NoiseDraw {
  int t = 0;
  Tensor eps;
  bool drop_prompt = false;
};

// t uniform over the schedule, eps ~ N(0,1), prompt dropped with probability null_prob.
std::vector<NoiseDraw> draw_noise(Rng& rng, std::span<const TrainExample> batch, const Schedule& s,
                                  double null_prob = 0.1);

template <class T>
using TapedPredictor =
    std::function<ad::BasicVar<T>(ad::BasicTape<T>&, ad::BasicVar<T> z_t, int t, std::span<const int> prompt)>;

/// Mean squared noise error for one example; the predictor receives the noised image.
template <class T>
ad::BasicVar<T> denoising_loss(ad::BasicTape<T>& tape, const TapedPredictor<T>& predict, const TrainExample& ex,
                               const NoiseDraw& draw, const Schedule& s);

template <class T>
struct StepResult {
  double loss = 0.0;        // batch mean
  BasicWeights<T> grads;    // batch mean, every weight present
};

template <class T>
StepResult<T> train_step(const ModelConfig& cfg, const BasicWeights<T>& weights, std::span<const TrainExample> batch,
                         std::span<const NoiseDraw> draws, const Schedule& s);

double global_norm(const Weights& grads);

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  int steps = 2000;
  int batch_size = 16;
  double lr = 1e-3;
  double clip_norm = 1.0;
  double null_prob = 0.1;
  OptimizerKind optimizer = OptimizerKind::adam;
  double ema_decay = 0.999;  // 0 disables
  int log_every = 50;
  std::uint64_t seed = 1;
};

/// Optimizer state plus EMA copy of the weights.
class Trainer {
 public:
  Trainer(Model model, TrainConfig cfg, Schedule schedule);

  // One optimizer step on the given batch; returns the batch loss.
  double step(std::span<const TrainExample> batch);
  // Draws a batch from `data` with the internal RNG and steps.
  double step_sampled(std::span<const TrainExample> data);

  const Model& model() const { return model_; }
  // Weights for sampling: the EMA copy when enabled.
  Model sampling_model() const;
  std::uint64_t steps_done() const { return model_.train_steps; }
  const TrainConfig& config() const { return cfg_; }

 private:
  void apply(const Weights& grads);

  Model model_;
  TrainConfig cfg_;
  Schedule schedule_;
  Rng rng_;
  Weights m_, v_, ema_;
};

struct LossLogEntry {
  std::uint64_t step = 0;  // last step of the window
  double loss = 0.0;       // mean over the window
};

/// Runs cfg.steps; entries average the per-step loss over log_every steps.
std::vector<LossLogEntry> train(Trainer& trainer, std::span<const TrainExample> data,
                                const std::function<void(const LossLogEntry&)>& on_log = {});

// ---- sampling ----

/// eps_uncond + scale (eps_cond - eps_uncond); scale 0 and 1 return the inputs exactly.
Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double scale);

/// Deterministic DDIM update with x0 clamped to [-1,1]; t_prev == -1 yields the clean image.
Tensor ddim_step(const Tensor& z_t, const Tensor& eps_hat, int t, int t_prev, const Schedule& s);
// Unclamped x0 estimate.
Tensor predict_x0(const Tensor& z_t, const Tensor& eps_hat, int t, const Schedule& s);

/// num_steps evenly spaced timesteps, descending, ending at 0.
std::vector<int> ddim_timesteps(int num_steps, const Schedule& s);

class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  // `attention` receives one snapshot per layer when non-null.
  virtual Tensor predict(const Tensor& z_t, int t, std::span<const int> prompt, const AttentionHook* hook,
                         std::vector<AttentionSnapshot>* attention) const = 0;
};

class UNetPredictor : public NoisePredictor {
 public:
  explicit UNetPredictor(const Model& model) : model_(model) {}
  Tensor predict(const Tensor& z_t, int t, std::span<const int> prompt, const AttentionHook* hook,
                 std::vector<AttentionSnapshot>* attention) const override;
  const Model& model() const { return model_; }

 private:
  const Model& model_;
};

struct SamplerConfig {
  int num_steps = 50;
  double cfg_scale = 3.0;
  std::uint64_t seed = 0;
  std::vector<int> snapshot_steps;  // step indices whose attention is kept in the trace
};

struct StepTrace {
  int step = 0;
  int t = 0;
  std::optional<double> loss;  // masked attention loss, when a controller reports one
  std::vector<AttentionSnapshot> attention;
};

struct SampleResult {
  Tensor image;  // [3,H,W] in [0,1]
  Tensor z;      // final latent in [-1,1]
  std::vector<StepTrace> trace;
};

/// Hooks run by the sampler at each step.
class SamplingController {
 public:
  virtual ~SamplingController() = default;
  // May rewrite z before denoising; a returned value is recorded as the step loss.
  virtual std::optional<double> before_denoise(int /*step*/, int /*t*/, Tensor& /*z*/) { return std::nullopt; }
  // Hook for the conditional branch.
  virtual const AttentionHook* conditional_hook(int /*step*/, int /*t*/) { return nullptr; }
  // Sees the conditional branch attention; a returned value is recorded when before_denoise gave none.
  virtual std::optional<double> observe_attention(int /*step*/, const std::vector<AttentionSnapshot>&) {
    return std::nullopt;
  }
  virtual bool wants_attention(int /*step*/) const { return false; }
  // May rewrite the denoised latent.
  virtual void after_step(int /*step*/, int /*t_prev*/, Tensor& /*z*/) {}
};

Tensor initial_noise(std::uint64_t seed, int image_size);
// (z + 1) / 2 clamped to [0,1].
Tensor to_unit_range(const Tensor& z);

SampleResult sample(const NoisePredictor& predictor, int image_size, std::span<const int> prompt,
                    const SamplerConfig& cfg, const Schedule& s, SamplingController* controller = nullptr);

}  // namespace magd
