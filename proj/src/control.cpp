#include "magd/control.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "magd/binary_io.hpp"
#include "magd/errors.hpp"
#include "magd/ops.hpp"

namespace magd {

const char* method_name(Method m) {
  switch (m) {
    case Method::none: return "none";
    case Method::swap: return "swap";
    case Method::guidance: return "guidance";
    case Method::paint_with_words: return "paint_with_words";
  }
  throw ConfigError("bad method");
}

Method parse_method(const std::string& s) {
  for (Method m : {Method::none, Method::swap, Method::guidance, Method::paint_with_words})
    if (s == method_name(m)) return m;
  if (s == "pww") return Method::paint_with_words;
  throw ConfigError("unknown method '" + s + "' (none, swap, guidance, paint_with_words)");
}

void GuidanceConfig::validate() const {
  if (!(alpha >= 0)) throw ConfigError("alpha must be >= 0");
  if (!(lambda >= 0)) throw ConfigError("lambda must be >= 0");
  if (!(tau_fraction >= 0 && tau_fraction <= 1)) throw ConfigError("tau_fraction must lie in [0,1]");
  if (guidance_repeats < 1) throw ConfigError("guidance_repeats must be >= 1");
  if (!(blended_alpha >= 0)) throw ConfigError("blended_alpha must be >= 0");
  if (!std::isfinite(pww_weight)) throw ConfigError("pww_weight must be finite");
}

int GuidanceConfig::controlled_steps(int num_steps) const {
  // guard against 0.3 * 50 landing a hair above 15
  return static_cast<int>(std::ceil(tau_fraction * num_steps - 1e-9));
}

RegionMaps resize_mask(const SemanticMask& mask, int r) {
  const int H = mask.height, W = mask.width;
  if (r < 1 || r > H || r > W) throw UsageError("resize_mask: resolution " + std::to_string(r) + " exceeds mask");
  if (H % r != 0 || W % r != 0) throw UsageError("resize_mask: resolution must divide the mask size");
  const int fy = H / r, fx = W / r;
  RegionMaps out;
  for (const auto& src : mask.regions) {
    std::vector<std::uint8_t> dst(static_cast<std::size_t>(r) * r, 0);
    bool any = false;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < r; ++j) {
        const std::uint8_t v = src[static_cast<std::size_t>(i * fy + fy / 2) * W + (j * fx + fx / 2)];
        dst[static_cast<std::size_t>(i) * r + j] = v;
        any = any || v;
      }
    if (!any) {
      double sy = 0, sx = 0, n = 0;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          if (src[static_cast<std::size_t>(y) * W + x]) {
            sy += y + 0.5;
            sx += x + 0.5;
            ++n;
          }
      if (n > 0) {
        const int ci = std::min(r - 1, static_cast<int>(sy / n / fy));
        const int cj = std::min(r - 1, static_cast<int>(sx / n / fx));
        dst[static_cast<std::size_t>(ci) * r + cj] = 1;
      }
    }
    out.push_back(std::move(dst));
  }
  return out;
}

Tensor constant_attention_map(std::span<const std::uint8_t> region, std::span<const int> words, int r, int L) {
  if (words.empty()) throw ConfigError("constant_attention_map: empty word set");
  const int P = r * r;
  if (region.size() != static_cast<std::size_t>(P)) throw DimensionError("constant_attention_map: region size");
  Tensor out({P, L});
  const float inside = static_cast<float>(1.0 / static_cast<double>(words.size()));
  for (int w : words) {
    if (w < 0 || w >= L) throw ConfigError("word index " + std::to_string(w) + " outside prompt");
    for (int p = 0; p < P; ++p)
      if (region[p]) out[static_cast<std::size_t>(p) * L + w] = inside;
  }
  return out;
}

SwapTargets swap_targets(const SemanticMask& mask, const Correspondence& corr, int r, int L) {
  if (corr.count() != mask.count()) throw ConfigError("one word set per mask region required");
  const auto regions = resize_mask(mask, r);
  SwapTargets out{Tensor({r * r, L}), std::vector<bool>(static_cast<std::size_t>(L), false)};
  for (int i = 0; i < mask.count(); ++i) {
    const Tensor m = constant_attention_map(regions[i], corr.words[i], r, L);
    // a word bound to several regions gets the sum of their maps
    for (std::size_t k = 0; k < m.size(); ++k) out.values[k] += m[k];
    for (int w : corr.words[i]) out.replace[static_cast<std::size_t>(w)] = true;
  }
  return out;
}

AttentionSnapshot apply_attention_swap(const AttentionSnapshot& snap, const SemanticMask& mask,
                                       const Correspondence& corr) {
  const int heads = snap.map.dim(0), P = snap.map.dim(1), L = snap.map.dim(2);
  if (P != snap.resolution * snap.resolution) throw DimensionError("apply_attention_swap: map size");
  const auto tg = swap_targets(mask, corr, snap.resolution, L);
  AttentionSnapshot out = snap;
  for (int h = 0; h < heads; ++h)
    for (int p = 0; p < P; ++p)
      for (int w = 0; w < L; ++w)
        if (tg.replace[w])
          out.map[(static_cast<std::size_t>(h) * P + p) * L + w] = tg.values[static_cast<std::size_t>(p) * L + w];
  return out;
}

namespace {

Tensor64 loss_weights64(const SemanticMask& mask, const Correspondence& corr, int r, int L, double lambda) {
  if (corr.count() != mask.count()) throw ConfigError("one word set per mask region required");
  const auto regions = resize_mask(mask, r);
  const int P = r * r;
  std::vector<double> acc(static_cast<std::size_t>(P) * L, 0.0);
  for (int i = 0; i < mask.count(); ++i)
    for (int w : corr.words[i]) {
      if (w < 0 || w >= L) throw ConfigError("word index " + std::to_string(w) + " outside prompt");
      for (int p = 0; p < P; ++p) acc[static_cast<std::size_t>(p) * L + w] += regions[i][p] ? -1.0 : lambda;
    }
  return Tensor64({P, L}, std::move(acc));
}

}  // namespace

Tensor loss_weights(const SemanticMask& mask, const Correspondence& corr, int r, int L, double lambda) {
  return tensor_cast<float>(loss_weights64(mask, corr, r, L, lambda));
}

template <class T>
ad::BasicVar<T> masked_attention_loss(std::span<const BasicAttentionRecord<T>> records, const SemanticMask& mask,
                                      const Correspondence& corr, double lambda) {
  if (records.empty() || records.front().heads.empty()) throw UsageError("masked_attention_loss: no attention records");
  std::optional<ad::BasicVar<T>> total;
  std::map<int, BasicTensor<T>> weights;
  for (const auto& rec : records) {
    const int L = rec.heads.front().value().dim(1);
    auto it = weights.find(rec.resolution);
    if (it == weights.end())
      it = weights.emplace(rec.resolution, tensor_cast<T>(loss_weights64(mask, corr, rec.resolution, L, lambda))).first;
    for (const auto& h : rec.heads) {
      auto term = ad::weighted_sum(h, it->second);
      total = total ? ad::add(*total, term) : term;
    }
  }
  return *total;
}

double masked_attention_loss(std::span<const AttentionSnapshot> snaps, const SemanticMask& mask,
                             const Correspondence& corr, double lambda) {
  if (snaps.empty()) throw UsageError("masked_attention_loss: no attention snapshots");
  double total = 0.0;
  for (const auto& s : snaps) {
    const int heads = s.map.dim(0), P = s.map.dim(1), L = s.map.dim(2);
    const Tensor64 w = loss_weights64(mask, corr, s.resolution, L, lambda);
    for (int h = 0; h < heads; ++h)
      for (int k = 0; k < P * L; ++k) total += static_cast<double>(s.map[static_cast<std::size_t>(h) * P * L + k]) * w[k];
  }
  return total;
}

Tensor paint_with_words_bias(const SemanticMask& mask, const Correspondence& corr, int r, int L, double weight) {
  if (corr.count() != mask.count()) throw ConfigError("one word set per mask region required");
  const auto regions = resize_mask(mask, r);
  const int P = r * r;
  Tensor out({P, L});
  std::vector<bool> hit(static_cast<std::size_t>(P) * L, false);
  for (int i = 0; i < mask.count(); ++i)
    for (int w : corr.words[i])
      for (int p = 0; p < P; ++p)
        if (regions[i][p]) hit[static_cast<std::size_t>(p) * L + w] = true;
  for (std::size_t k = 0; k < hit.size(); ++k)
    if (hit[k]) out[k] = static_cast<float>(weight);
  return out;
}

SwapHook::SwapHook(const SemanticMask& mask, const Correspondence& corr, const ModelConfig& cfg) {
  for (int r : cfg.attention_resolutions())
    if (!targets_.count(r)) targets_.emplace(r, swap_targets(mask, corr, r, cfg.max_prompt_len));
}

ad::Var SwapHook::adjust_probs(const AttentionSite& site, ad::Var probs) const {
  const auto& tg = targets_.at(site.resolution);
  return ad::replace_columns(probs, tg.values, tg.replace);
}

PaintWithWordsHook::PaintWithWordsHook(const SemanticMask& mask, const Correspondence& corr, const ModelConfig& cfg,
                                       double weight) {
  for (int r : cfg.attention_resolutions())
    if (!bias_.count(r)) bias_.emplace(r, paint_with_words_bias(mask, corr, r, cfg.max_prompt_len, weight));
}

ad::Var PaintWithWordsHook::adjust_logits(const AttentionSite& site, ad::Var logits) const {
  return ad::add_constant(logits, bias_.at(site.resolution));
}

template <class T>
LossAndGrad<T> attention_loss_and_grad(const BasicWeights<T>& weights, const ModelConfig& cfg,
                                       const BasicTensor<T>& z_t, int t, std::span<const int> prompt,
                                       const SemanticMask& mask, const Correspondence& corr, double lambda) {
  ad::BasicTape<T> tape;
  ParamBinder<T> params(tape, weights, false);
  auto z = tape.leaf(z_t, true);
  auto out = unet_forward(params, cfg, z, t, embed_tokens(params, cfg, prompt));
  auto loss = masked_attention_loss<T>(out.records, mask, corr, lambda);
  tape.backward(loss);
  return {static_cast<double>(loss.value()[0]), tape.grad(z)};
}

template <class T>
double attention_loss(const BasicWeights<T>& weights, const ModelConfig& cfg, const BasicTensor<T>& z_t, int t,
                      std::span<const int> prompt, const SemanticMask& mask, const Correspondence& corr,
                      double lambda) {
  ad::BasicTape<T> tape;
  ParamBinder<T> params(tape, weights, false);
  auto out = unet_forward(params, cfg, tape.constant(z_t), t, embed_tokens(params, cfg, prompt));
  return static_cast<double>(masked_attention_loss<T>(out.records, mask, corr, lambda).value()[0]);
}

GuidanceStep guidance_update(const Model& model, const Tensor& z_t, int t, std::span<const int> prompt,
                             const SemanticMask& mask, const Correspondence& corr, double alpha, double lambda,
                             int repeats, int step) {
  GuidanceStep out{z_t, 0.0, 0.0};
  for (int k = 0; k < repeats; ++k) {
    auto lg = attention_loss_and_grad<float>(model.weights, model.config, out.z, t, prompt, mask, corr, lambda);
    if (!std::isfinite(lg.loss) || !lg.grad.all_finite())
      throw GuidanceError("non-finite masked-attention gradient at step " + std::to_string(step) + " (t=" +
                          std::to_string(t) + ")");
    if (k == 0) {
      out.loss_before = lg.loss;
      double ss = 0.0;
      for (float g : lg.grad.data()) ss += static_cast<double>(g) * g;
      out.grad_norm = std::sqrt(ss);
    }
    for (std::size_t i = 0; i < out.z.size(); ++i) out.z[i] = static_cast<float>(out.z[i] - alpha * lg.grad[i]);
  }
  return out;
}

GuidedController::GuidedController(const Model& model, std::vector<int> prompt, SemanticMask mask,
                                   Correspondence corr, GuidanceConfig cfg, int num_steps)
    : model_(model), prompt_(std::move(prompt)), mask_(std::move(mask)), corr_(std::move(corr)), cfg_(cfg) {
  cfg_.validate();
  mask_.validate();
  if (mask_.height != model.config.image_size || mask_.width != model.config.image_size)
    throw DimensionError("mask size does not match the model image size");
  corr_.validate(prompt_);
  if (corr_.count() != mask_.count()) throw ConfigError("one word set per mask region required");
  controlled_ = cfg_.controlled_steps(num_steps);
  if (cfg_.method == Method::swap) hook_ = std::make_unique<SwapHook>(mask_, corr_, model.config);
  if (cfg_.method == Method::paint_with_words)
    hook_ = std::make_unique<PaintWithWordsHook>(mask_, corr_, model.config, cfg_.pww_weight);
}

std::optional<double> GuidedController::before_denoise(int step, int t, Tensor& z) {
  if (cfg_.method != Method::guidance || step >= controlled_) return std::nullopt;
  auto g = guidance_update(model_, z, t, prompt_, mask_, corr_, cfg_.alpha, cfg_.lambda, cfg_.guidance_repeats, step);
  z = std::move(g.z);
  return g.loss_before;
}

const AttentionHook* GuidedController::conditional_hook(int step, int) {
  return step < controlled_ ? hook_.get() : nullptr;
}

std::optional<double> GuidedController::observe_attention(int, const std::vector<AttentionSnapshot>& att) {
  return masked_attention_loss(att, mask_, corr_, cfg_.lambda);
}

Tensor blended_merge(const Tensor& z_denoised, const Tensor& x0, const Tensor& edit, int t_prev, const Schedule& s,
                     Rng& rng) {
  if (z_denoised.shape() != x0.shape()) throw DimensionError("blended_merge: latent and original differ in shape");
  if (x0.rank() != 3 || edit.rank() != 2 || edit.dim(0) != x0.dim(1) || edit.dim(1) != x0.dim(2))
    throw DimensionError("blended_merge: edit mask must be [H,W] matching the image");
  const Tensor noisy = q_sample(x0, t_prev, rng.normal_tensor(x0.shape()), s);
  Tensor out = noisy;
  const std::size_t hw = edit.size();
  for (int c = 0; c < x0.dim(0); ++c)
    for (std::size_t p = 0; p < hw; ++p)
      if (edit[p] != 0.f) out[c * hw + p] = z_denoised[c * hw + p];
  return out;
}

BlendedController::BlendedController(SamplingController* inner, Tensor x0, Tensor edit, const Schedule& s,
                                     std::uint64_t seed)
    : inner_(inner), x0_(std::move(x0)), edit_(std::move(edit)), schedule_(s), rng_(seed) {}

std::optional<double> BlendedController::before_denoise(int step, int t, Tensor& z) {
  return inner_ ? inner_->before_denoise(step, t, z) : std::nullopt;
}
const AttentionHook* BlendedController::conditional_hook(int step, int t) {
  return inner_ ? inner_->conditional_hook(step, t) : nullptr;
}
bool BlendedController::wants_attention(int step) const { return inner_ && inner_->wants_attention(step); }
std::optional<double> BlendedController::observe_attention(int step, const std::vector<AttentionSnapshot>& att) {
  return inner_ ? inner_->observe_attention(step, att) : std::nullopt;
}
void BlendedController::after_step(int step, int t_prev, Tensor& z) {
  if (inner_) inner_->after_step(step, t_prev, z);
  z = blended_merge(z, x0_, edit_, t_prev, schedule_, rng_);
}

SampleResult guided_sample(const Model& model, std::span<const int> prompt, const SemanticMask& mask,
                           const Correspondence& corr, const SamplerConfig& sampler, const GuidanceConfig& guidance,
                           const Schedule& s) {
  const std::vector<int> padded = pad_prompt(prompt, model.config.max_prompt_len);
  GuidedController ctl(model, padded, mask, corr, guidance, sampler.num_steps);
  return sample(UNetPredictor(model), model.config.image_size, padded, sampler, s, &ctl);
}

SampleResult blended_sample(const Model& model, std::span<const int> prompt, const SemanticMask& mask,
                            const Correspondence& corr, const Tensor& x0, const Tensor& edit,
                            const SamplerConfig& sampler, const GuidanceConfig& guidance, const Schedule& s) {
  const std::vector<int> padded = pad_prompt(prompt, model.config.max_prompt_len);
  GuidanceConfig g = guidance;
  g.alpha = guidance.blended_alpha;
  GuidedController ctl(model, padded, mask, corr, g, sampler.num_steps);
  BlendedController blend(&ctl, x0, edit, s, split_seed(sampler.seed, 0xB1E7D));
  return sample(UNetPredictor(model), model.config.image_size, padded, sampler, s, &blend);
}

// ---------------------------------------------------------------------------
// Mask files

std::string format_mask_file(const MaskFile& f) {
  f.mask.validate();
  if (f.corr.count() != f.mask.count()) throw ConfigError("one word set per mask region required");
  const auto& vocab = Vocabulary::shapes();
  std::ostringstream os;
  os << f.mask.count() << ' ' << f.mask.height << ' ' << f.mask.width << ' ' << f.prompt.size();
  if (f.mask.allow_overlap) os << " overlap";
  os << '\n';
  for (std::size_t i = 0; i < f.prompt.size(); ++i) os << (i ? " " : "") << vocab.token(f.prompt[i]);
  os << '\n';
  for (int i = 0; i < f.mask.count(); ++i) {
    const std::string label = f.mask.labels.empty() ? "region" + std::to_string(i) : f.mask.labels[i];
    if (label.find_first_of(":\n") != std::string::npos) throw ConfigError("label may not contain ':' or newline");
    os << label << ':';
    for (std::size_t k = 0; k < f.corr.words[i].size(); ++k) os << (k ? "," : " ") << f.corr.words[i][k];
    os << '\n';
  }
  for (const auto& r : f.mask.regions)
    for (int y = 0; y < f.mask.height; ++y) {
      for (int x = 0; x < f.mask.width; ++x) os << (r[static_cast<std::size_t>(y) * f.mask.width + x] ? '1' : '0');
      os << '\n';
    }
  return os.str();
}

MaskFile parse_mask_file(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& m) -> FormatError {
    return FormatError("mask file line " + std::to_string(lineno) + ": " + m);
  };
  auto next = [&]() {
    if (!std::getline(in, line)) {
      ++lineno;
      throw fail("unexpected end of file");
    }
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
  };

  MaskFile f;
  next();
  int n = 0, H = 0, W = 0, L = 0;
  {
    std::istringstream hs(line);
    if (!(hs >> n >> H >> W >> L)) throw fail("expected header 'N H W L'");
    std::string flag;
    if (hs >> flag) {
      if (flag != "overlap") throw fail("unknown header flag '" + flag + "'");
      f.mask.allow_overlap = true;
    }
    if (n < 1 || H < 1 || W < 1 || L < 1) throw fail("header values must be positive");
  }
  const auto& vocab = Vocabulary::shapes();
  next();
  {
    std::istringstream ps(line);
    std::string tok;
    while (ps >> tok) {
      if (!vocab.contains(tok)) throw fail("unknown token '" + tok + "'");
      f.prompt.push_back(vocab.id(tok));
    }
    if (static_cast<int>(f.prompt.size()) != L) throw fail("prompt has " + std::to_string(f.prompt.size()) + " tokens, header says " + std::to_string(L));
  }
  for (int i = 0; i < n; ++i) {
    next();
    const auto colon = line.rfind(':');
    if (colon == std::string::npos) throw fail("expected 'label: w1,w2,...'");
    f.mask.labels.push_back(line.substr(0, colon));
    std::vector<int> words;
    std::stringstream ws(line.substr(colon + 1));
    std::string item;
    while (std::getline(ws, item, ',')) {
      try {
        std::size_t used = 0;
        const int w = std::stoi(item, &used);
        if (item.find_first_not_of(" ", used) != std::string::npos) throw std::invalid_argument("junk");
        words.push_back(w);
      } catch (const std::logic_error&) {
        throw fail("bad word index '" + item + "'");
      }
    }
    if (words.empty()) throw fail("empty word set");
    for (int w : words)
      if (w < 0 || w >= L) throw fail("word index " + std::to_string(w) + " outside prompt");
    f.corr.words.push_back(std::move(words));
  }
  f.mask.height = H;
  f.mask.width = W;
  for (int i = 0; i < n; ++i) {
    std::vector<std::uint8_t> r(static_cast<std::size_t>(H) * W);
    for (int y = 0; y < H; ++y) {
      next();
      if (static_cast<int>(line.size()) != W) throw fail("raster row must have " + std::to_string(W) + " characters");
      for (int x = 0; x < W; ++x) {
        if (line[x] != '0' && line[x] != '1') throw fail("raster characters must be 0 or 1");
        r[static_cast<std::size_t>(y) * W + x] = line[x] == '1';
      }
    }
    f.mask.regions.push_back(std::move(r));
  }
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") != std::string::npos) throw fail("trailing content");
  }
  try {
    f.mask.validate();
    f.corr.validate(f.prompt);
  } catch (const std::exception& e) {
    throw FormatError(std::string("mask file: ") + e.what());
  }
  return f;
}

void write_mask_file(const std::string& path, const MaskFile& f) { io::write_text(path, format_mask_file(f)); }

MaskFile read_mask_file(const std::string& path) {
  try {
    return parse_mask_file(io::read_text(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

#define MAGD_INSTANTIATE_CONTROL(T)                                                                              \
  template ad::BasicVar<T> masked_attention_loss(std::span<const BasicAttentionRecord<T>>, const SemanticMask&,  \
                                                 const Correspondence&, double);                                 \
  template LossAndGrad<T> attention_loss_and_grad(const BasicWeights<T>&, const ModelConfig&,                    \
                                                  const BasicTensor<T>&, int, std::span<const int>,              \
                                                  const SemanticMask&, const Correspondence&, double);           \
  template double attention_loss(const BasicWeights<T>&, const ModelConfig&, const BasicTensor<T>&, int,         \
                                 std::span<const int>, const SemanticMask&, const Correspondence&, double);

MAGD_INSTANTIATE_CONTROL(float)
MAGD_INSTANTIATE_CONTROL(double)

}  // namespace magd
