#pragma once
// Spatial control of cross-attention: constant-map swapping, masked-attention guidance,
// paint-with-words logit bias and blended (mask-restricted) editing.

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "magd/diffusion.hpp"
#include "magd/mask.hpp"
#include "magd/model.hpp"

namespace magd {

enum class Method { none, swap, guidance, paint_with_words };

const char* method_name(Method m);
Method parse_method(const std::string& s);

struct GuidanceConfig {
  Method method = Method::none;
  double alpha = 0.08;
  double lambda = 0.5;
  double tau_fraction = 0.30;
  double pww_weight = 0.3;
  int guidance_repeats = 1;
  double blended_alpha = 0.01;

  void validate() const;
  // ceil(tau_fraction * num_steps)
  int controlled_steps(int num_steps) const;
};

using RegionMaps = std::vector<std::vector<std::uint8_t>>;

/// Cell-center nearest sampling to resolution x resolution. A region that disappears
/// gets the cell containing its centroid.
RegionMaps resize_mask(const SemanticMask& mask, int resolution);

/// [P, L]; columns in `words` hold 1/|words| inside the region, all other entries 0.
Tensor constant_attention_map(std::span<const std::uint8_t> region, std::span<const int> words, int resolution,
                              int prompt_len);

/// Per layer resolution: replacement values and the set of replaced columns.
struct SwapTargets {
  Tensor values;              // [P, L]
  std::vector<bool> replace;  // [L]
};
SwapTargets swap_targets(const SemanticMask& mask, const Correspondence& corr, int resolution, int prompt_len);

/// Replaces target-word columns of every head; other columns are copied bitwise.
AttentionSnapshot apply_attention_swap(const AttentionSnapshot& snap, const SemanticMask& mask,
                                       const Correspondence& corr);

/// W[p,w] = sum over regions i with w in C_i of (-1 if p in S_i else lambda); L_m = sum W * M.
Tensor loss_weights(const SemanticMask& mask, const Correspondence& corr, int resolution, int prompt_len,
                    double lambda);

template <class T>
ad::BasicVar<T> masked_attention_loss(std::span<const BasicAttentionRecord<T>> records, const SemanticMask& mask,
                                      const Correspondence& corr, double lambda);
double masked_attention_loss(std::span<const AttentionSnapshot> snaps, const SemanticMask& mask,
                             const Correspondence& corr, double lambda);

/// [P, L] logit bias: w' where some region i has p in S_i and w in C_i.
Tensor paint_with_words_bias(const SemanticMask& mask, const Correspondence& corr, int resolution, int prompt_len,
                             double weight);

class SwapHook : public AttentionHook {
 public:
  SwapHook(const SemanticMask& mask, const Correspondence& corr, const ModelConfig& cfg);
  ad::Var adjust_probs(const AttentionSite& site, ad::Var probs) const override;

 private:
  std::map<int, SwapTargets> targets_;  // by resolution
};

class PaintWithWordsHook : public AttentionHook {
 public:
  PaintWithWordsHook(const SemanticMask& mask, const Correspondence& corr, const ModelConfig& cfg, double weight);
  ad::Var adjust_logits(const AttentionSite& site, ad::Var logits) const override;

 private:
  std::map<int, Tensor> bias_;  // by resolution
};

template <class T>
struct LossAndGrad {
  double loss = 0.0;
  BasicTensor<T> grad;  // d L_m / d z_t
};

/// L_m of the conditional forward pass at z_t and its gradient w.r.t. z_t.
template <class T>
LossAndGrad<T> attention_loss_and_grad(const BasicWeights<T>& weights, const ModelConfig& cfg,
                                       const BasicTensor<T>& z_t, int t, std::span<const int> prompt,
                                       const SemanticMask& mask, const Correspondence& corr, double lambda);

template <class T>
double attention_loss(const BasicWeights<T>& weights, const ModelConfig& cfg, const BasicTensor<T>& z_t, int t,
                      std::span<const int> prompt, const SemanticMask& mask, const Correspondence& corr,
                      double lambda);

struct GuidanceStep {
  Tensor z;
  double loss_before = 0.0;  // L_m at the input z_t
  double grad_norm = 0.0;    // of the first repeat
};

/// z_t - alpha * grad L_m, repeated guidance_repeats times. Throws GuidanceError on a
/// non-finite gradient, naming `step`.
GuidanceStep guidance_update(const Model& model, const Tensor& z_t, int t, std::span<const int> prompt,
                             const SemanticMask& mask, const Correspondence& corr, double alpha, double lambda,
                             int repeats, int step);

/// Applies the configured method during the first controlled steps and records L_m there.
class GuidedController : public SamplingController {
 public:
  GuidedController(const Model& model, std::vector<int> prompt, SemanticMask mask, Correspondence corr,
                   GuidanceConfig cfg, int num_steps);

  std::optional<double> before_denoise(int step, int t, Tensor& z) override;
  const AttentionHook* conditional_hook(int step, int t) override;
  bool wants_attention(int step) const override { return step < controlled_; }
  std::optional<double> observe_attention(int step, const std::vector<AttentionSnapshot>& att) override;

  int controlled_steps() const { return controlled_; }
  const GuidanceConfig& config() const { return cfg_; }

 private:
  const Model& model_;
  std::vector<int> prompt_;
  SemanticMask mask_;
  Correspondence corr_;
  GuidanceConfig cfg_;
  int controlled_;
  std::unique_ptr<AttentionHook> hook_;
};

/// edit ? z_denoised : q_sample(x0, t_prev, fresh noise), per pixel across channels.
/// edit_mask is [H, W] with 0/1 entries.
Tensor blended_merge(const Tensor& z_denoised, const Tensor& x0_original, const Tensor& edit_mask, int t_prev,
                     const Schedule& s, Rng& rng);

/// Wraps another controller and merges the original image back outside the edit mask
/// after every step.
class BlendedController : public SamplingController {
 public:
  BlendedController(SamplingController* inner, Tensor x0_original, Tensor edit_mask, const Schedule& s,
                    std::uint64_t seed);

  std::optional<double> before_denoise(int step, int t, Tensor& z) override;
  const AttentionHook* conditional_hook(int step, int t) override;
  bool wants_attention(int step) const override;
  std::optional<double> observe_attention(int step, const std::vector<AttentionSnapshot>& att) override;
  void after_step(int step, int t_prev, Tensor& z) override;

 private:
  SamplingController* inner_;
  Tensor x0_;
  Tensor edit_;
  const Schedule& schedule_;
  Rng rng_;
};

SampleResult guided_sample(const Model& model, std::span<const int> prompt, const SemanticMask& mask,
                           const Correspondence& corr, const SamplerConfig& sampler, const GuidanceConfig& guidance,
                           const Schedule& s);

/// Regenerates the edit region of `x0_original` under the given mask layout; guidance
/// (when the method asks for it) uses blended_alpha as its step size.
SampleResult blended_sample(const Model& model, std::span<const int> prompt, const SemanticMask& mask,
                            const Correspondence& corr, const Tensor& x0_original, const Tensor& edit_mask,
                            const SamplerConfig& sampler, const GuidanceConfig& guidance, const Schedule& s);

// ---- mask/correspondence text files ----

struct MaskFile {
  std::vector<int> prompt;  // padded
  SemanticMask mask;
  Correspondence corr;

  friend bool operator==(const MaskFile&, const MaskFile&) = default;
};

std::string format_mask_file(const MaskFile& f);
// Errors are FormatError with "line N".
MaskFile parse_mask_file(const std::string& text);
void write_mask_file(const std::string& path, const MaskFile& f);
MaskFile read_mask_file(const std::string& path);

}  // namespace magd
