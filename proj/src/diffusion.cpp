#include "magd/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "magd/errors.hpp"
#include "magd/ops.hpp"

namespace magd {

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const Schedule& s) {
  if (x0.shape() != eps.shape())
    throw DimensionError("q_sample: eps " + shape_str(eps.shape()) + " vs x0 " + shape_str(x0.shape()));
  const double ab = s.ab(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = static_cast<float>(a * x0[i] + b * eps[i]);
  return out;
}

std::vector<NoiseDraw> draw_noise(Rng& rng, std::span<const TrainExample> batch, const Schedule& s, double null_prob) {
  std::vector<NoiseDraw> out;
  out.reserve(batch.size());
  for (const auto& ex : batch) {
    NoiseDraw d;
    d.t = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.steps())));
    d.eps = rng.normal_tensor(ex.x0.shape());
    d.drop_prompt = rng.uniform() < null_prob;
    out.push_back(std::move(d));
  }
  return out;
}

template <class T>
ad::BasicVar<T> denoising_loss(ad::BasicTape<T>& tape, const TapedPredictor<T>& predict, const TrainExample& ex,
                               const NoiseDraw& draw, const Schedule& s) {
  const Tensor zt = q_sample(ex.x0, draw.t, draw.eps, s);
  const std::vector<int> prompt =
      draw.drop_prompt ? null_prompt(static_cast<int>(ex.prompt.size())) : ex.prompt;
  ad::BasicVar<T> eps_hat = predict(tape, tape.constant(tensor_cast<T>(zt)), draw.t, prompt);
  return ad::mse(eps_hat, tape.constant(tensor_cast<T>(draw.eps)));
}

template <class T>
StepResult<T> train_step(const ModelConfig& cfg, const BasicWeights<T>& weights, std::span<const TrainExample> batch,
                         std::span<const NoiseDraw> draws, const Schedule& s) {
  if (batch.empty()) throw UsageError("train_step: empty batch");
  if (batch.size() != draws.size()) throw UsageError("train_step: one noise draw per example required");
  StepResult<T> out;
  for (const auto& [name, w] : weights) out.grads.emplace(name, BasicTensor<T>(w.shape()));
  const T inv = T(1) / static_cast<T>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    ad::BasicTape<T> tape;
    ParamBinder<T> params(tape, weights, true);
    TapedPredictor<T> predict = [&](ad::BasicTape<T>&, ad::BasicVar<T> z, int t, std::span<const int> prompt) {
      return unet_forward(params, cfg, z, t, embed_tokens(params, cfg, prompt)).noise;
    };
    auto loss = denoising_loss(tape, predict, batch[b], draws[b], s);
    tape.backward(loss);
    out.loss += static_cast<double>(loss.value()[0]) / static_cast<double>(batch.size());
    for (const auto& [name, g] : params.gradients()) {
      auto& acc = out.grads.at(name);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * inv;
    }
  }
  return out;
}

double global_norm(const Weights& grads) {
  double ss = 0.0;
  for (const auto& [_, g] : grads)
    for (float v : g.data()) ss += static_cast<double>(v) * v;
  return std::sqrt(ss);
}

Trainer::Trainer(Model model, TrainConfig cfg, Schedule schedule)
    : model_(std::move(model)), cfg_(cfg), schedule_(std::move(schedule)), rng_(cfg.seed) {
  if (cfg_.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(cfg_.lr > 0)) throw ConfigError("lr must be positive");
  if (cfg_.ema_decay < 0 || cfg_.ema_decay >= 1) throw ConfigError("ema_decay must lie in [0,1)");
  for (const auto& [name, w] : model_.weights) {
    m_.emplace(name, Tensor(w.shape()));
    v_.emplace(name, Tensor(w.shape()));
  }
  if (cfg_.ema_decay > 0) ema_ = model_.weights;
}

void Trainer::apply(const Weights& grads) {
  const double norm = global_norm(grads);
  const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  const std::uint64_t n = ++model_.train_steps;
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(n));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(n));
  for (auto& [name, w] : model_.weights) {
    const auto& g = grads.at(name);
    auto& m = m_.at(name);
    auto& v = v_.at(name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = clip * g[i];
      if (cfg_.optimizer == OptimizerKind::sgd) {
        w[i] = static_cast<float>(w[i] - cfg_.lr * gi);
        continue;
      }
      m[i] = static_cast<float>(b1 * m[i] + (1 - b1) * gi);
      v[i] = static_cast<float>(b2 * v[i] + (1 - b2) * gi * gi);
      w[i] = static_cast<float>(w[i] - cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps));
    }
  }
  if (cfg_.ema_decay > 0) {
    const double d = std::min(cfg_.ema_decay, (1.0 + n) / (10.0 + n));
    for (auto& [name, e] : ema_) {
      const auto& w = model_.weights.at(name);
      for (std::size_t i = 0; i < e.size(); ++i) e[i] = static_cast<float>(d * e[i] + (1 - d) * w[i]);
    }
  }
}

double Trainer::step(std::span<const TrainExample> batch) {
  const auto draws = draw_noise(rng_, batch, schedule_, cfg_.null_prob);
  auto r = train_step<float>(model_.config, model_.weights, batch, draws, schedule_);
  if (!std::isfinite(r.loss)) throw GuidanceError("training loss is not finite at step " + std::to_string(steps_done()));
  apply(r.grads);
  return r.loss;
}

double Trainer::step_sampled(std::span<const TrainExample> data) {
  if (data.empty()) throw UsageError("empty training set");
  std::vector<TrainExample> batch;
  batch.reserve(static_cast<std::size_t>(cfg_.batch_size));
  for (int i = 0; i < cfg_.batch_size; ++i) batch.push_back(data[rng_.below(data.size())]);
  return step(batch);
}

Model Trainer::sampling_model() const {
  Model m = model_;
  if (cfg_.ema_decay > 0) m.weights = ema_;
  return m;
}

std::vector<LossLogEntry> train(Trainer& trainer, std::span<const TrainExample> data,
                                const std::function<void(const LossLogEntry&)>& on_log) {
  std::vector<LossLogEntry> log;
  const int every = std::max(1, trainer.config().log_every);
  double acc = 0.0;
  int n = 0;
  for (int i = 0; i < trainer.config().steps; ++i) {
    acc += trainer.step_sampled(data);
    ++n;
    if (n == every || i + 1 == trainer.config().steps) {
      log.push_back({trainer.steps_done(), acc / n});
      if (on_log) on_log(log.back());
      acc = 0.0;
      n = 0;
    }
  }
  return log;
}

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double scale) {
  if (eps_cond.shape() != eps_uncond.shape())
    throw DimensionError("cfg_combine: " + shape_str(eps_cond.shape()) + " vs " + shape_str(eps_uncond.shape()));
  if (scale == 0.0) return eps_uncond;
  if (scale == 1.0) return eps_cond;
  Tensor out(eps_cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(eps_uncond[i] + scale * (static_cast<double>(eps_cond[i]) - eps_uncond[i]));
  return out;
}

Tensor predict_x0(const Tensor& z_t, const Tensor& eps_hat, int t, const Schedule& s) {
  if (z_t.shape() != eps_hat.shape()) throw DimensionError("predict_x0: shape mismatch");
  const double ab = s.ab(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor x0(z_t.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = static_cast<float>((z_t[i] - b * eps_hat[i]) / a);
  return x0;
}

Tensor ddim_step(const Tensor& z_t, const Tensor& eps_hat, int t, int t_prev, const Schedule& s) {
  if (!(t > t_prev && t_prev >= -1))
    throw UsageError("ddim_step: need t > t_prev >= -1, got t=" + std::to_string(t) + " t_prev=" + std::to_string(t_prev));
  Tensor x0 = predict_x0(z_t, eps_hat, t, s);
  const double ab = s.ab(t_prev);
  if (t_prev == -1) {
    for (auto& v : x0.data()) v = std::clamp(v, -1.f, 1.f);
    return x0;
  }
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(z_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = std::clamp(static_cast<double>(x0[i]), -1.0, 1.0);
    out[i] = static_cast<float>(a * x + b * eps_hat[i]);
  }
  return out;
}

std::vector<int> ddim_timesteps(int num_steps, const Schedule& s) {
  if (num_steps < 1 || num_steps > s.steps()) throw ConfigError("num_steps must lie in [1, schedule steps]");
  const int stride = s.steps() / num_steps;
  std::vector<int> ts;
  for (int i = num_steps - 1; i >= 0; --i) ts.push_back(i * stride);
  return ts;
}

Tensor UNetPredictor::predict(const Tensor& z_t, int t, std::span<const int> prompt, const AttentionHook* hook,
                              std::vector<AttentionSnapshot>* attention) const {
  ad::Tape tape;
  ParamBinder<float> params(tape, model_.weights, false);
  auto ctx = embed_tokens(params, model_.config, prompt);
  auto out = unet_forward(params, model_.config, tape.constant(z_t), t, ctx, hook);
  if (attention) {
    attention->clear();
    for (const auto& r : out.records) attention->push_back(snapshot(r));
  }
  return out.noise.value();
}

Tensor initial_noise(std::uint64_t seed, int image_size) {
  Rng rng(seed);
  return rng.normal_tensor({3, image_size, image_size});
}

Tensor to_unit_range(const Tensor& z) {
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = std::clamp((z[i] + 1.f) * 0.5f, 0.f, 1.f);
  return out;
}

SampleResult sample(const NoisePredictor& predictor, int image_size, std::span<const int> prompt,
                    const SamplerConfig& cfg, const Schedule& s, SamplingController* controller) {
  const auto ts = ddim_timesteps(cfg.num_steps, s);
  const std::vector<int> uncond = null_prompt(static_cast<int>(prompt.size()));
  SampleResult res;
  Tensor z = initial_noise(cfg.seed, image_size);
  for (int i = 0; i < static_cast<int>(ts.size()); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < static_cast<int>(ts.size()) ? ts[i + 1] : -1;
    StepTrace tr;
    tr.step = i;
    tr.t = t;
    if (controller) tr.loss = controller->before_denoise(i, t, z);
    const AttentionHook* hook = controller ? controller->conditional_hook(i, t) : nullptr;
    const bool keep = std::find(cfg.snapshot_steps.begin(), cfg.snapshot_steps.end(), i) != cfg.snapshot_steps.end();
    const bool observe = controller && controller->wants_attention(i);
    std::vector<AttentionSnapshot> att;
    Tensor eps_c = predictor.predict(z, t, prompt, hook, (keep || observe) ? &att : nullptr);
    if (observe) {
      auto l = controller->observe_attention(i, att);
      if (!tr.loss) tr.loss = l;
    }
    Tensor eps = cfg.cfg_scale == 1.0 ? std::move(eps_c)
                                      : cfg_combine(eps_c, predictor.predict(z, t, uncond, nullptr, nullptr), cfg.cfg_scale);
    z = ddim_step(z, eps, t, t_prev, s);
    if (controller) controller->after_step(i, t_prev, z);
    if (keep) tr.attention = std::move(att);
    res.trace.push_back(std::move(tr));
  }
  res.image = to_unit_range(z);
  res.z = std::move(z);
  return res;
}

#define MAGD_INSTANTIATE_DIFFUSION(T)                                                                          \
  template ad::BasicVar<T> denoising_loss(ad::BasicTape<T>&, const TapedPredictor<T>&, const TrainExample&,    \
                                          const NoiseDraw&, const Schedule&);                                  \
  template StepResult<T> train_step(const ModelConfig&, const BasicWeights<T>&, std::span<const TrainExample>, \
                                    std::span<const NoiseDraw>, const Schedule&);

MAGD_INSTANTIATE_DIFFUSION(float)
MAGD_INSTANTIATE_DIFFUSION(double)

}  // namespace magd
