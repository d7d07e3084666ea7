#include "magd/model.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "magd/errors.hpp"
#include "magd/ops.hpp"
#include "magd/rng.hpp"
#include "magd/schedule.hpp"

namespace magd {

namespace {
const Schedule& noise_schedule() {
  static const Schedule s = make_schedule();
  return s;
}
}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> words) : tokens_(std::move(words)) {
  std::unordered_set<std::string> seen;
  for (const auto& w : tokens_) {
    if (!seen.insert(w).second) throw ConfigError("duplicate vocabulary token '" + w + "'");
  }
  if (tokens_.size() < 2 || tokens_[kNull] != "<null>" || tokens_[kPad] != "<pad>") {
    throw ConfigError("vocabulary must start with <null>, <pad>");
  }
}

const Vocabulary& Vocabulary::shapes() {
  static const Vocabulary v({"<null>", "<pad>", "red", "green", "blue", "yellow", "circle", "square", "triangle"});
  return v;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw ConfigError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(const std::string& token) const {
  auto it = std::find(tokens_.begin(), tokens_.end(), token);
  if (it == tokens_.end()) throw ConfigError("unknown token '" + token + "'");
  return static_cast<int>(it - tokens_.begin());
}

bool Vocabulary::contains(const std::string& token) const {
  return std::find(tokens_.begin(), tokens_.end(), token) != tokens_.end();
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& t : tokens_) {
    for (unsigned char c : t) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    h ^= 0xff;  // separator
    h *= 0x100000001b3ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(image_size, "image_size");
  positive(channels, "channels");
  positive(levels, "levels");
  positive(heads, "heads");
  positive(context_dim, "context_dim");
  positive(max_prompt_len, "max_prompt_len");
  positive(vocab_size, "vocab_size");
  positive(groups, "groups");
  if (image_size % (1 << levels) != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by 2^levels");
  }
  if (context_dim % heads != 0) throw ConfigError("context_dim must be divisible by heads");
  if (channels % groups != 0) throw ConfigError("channels must be divisible by groups");
  if (channels % 2 != 0) throw ConfigError("channels must be even (sinusoidal embedding)");
}

std::vector<int> ModelConfig::attention_resolutions() const {
  std::vector<int> r;
  for (const auto& l : attention_layers(*this)) r.push_back(l.resolution);
  return r;
}

// ---------------------------------------------------------------------------
// Weights

namespace {

std::string res_name(const std::string& p) { return p + ".res"; }
std::string attn_name(const std::string& p) { return p + ".attn"; }

void put_normal(Weights& w, Rng& rng, const std::string& name, Shape shape, float stddev) {
  w[name] = rng.normal_tensor(shape, stddev);
}

void put_const(Weights& w, const std::string& name, Shape shape, float v) { w[name] = Tensor(std::move(shape), v); }

void add_norm(Weights& w, const std::string& p, int c) {
  put_const(w, p + ".g", {c}, 1.0f);
  put_const(w, p + ".b", {c}, 0.0f);
}

void add_conv(Weights& w, Rng& rng, const std::string& p, int cin, int cout, int k, float gain = 1.0f) {
  put_normal(w, rng, p + ".w", {cout, cin, k, k}, gain / std::sqrt(static_cast<float>(cin * k * k)));
  put_const(w, p + ".b", {cout}, 0.0f);
}

void add_linear(Weights& w, Rng& rng, const std::string& p, int in, int out) {
  put_normal(w, rng, p + ".w", {in, out}, 1.0f / std::sqrt(static_cast<float>(in)));
  put_const(w, p + ".b", {out}, 0.0f);
}

void add_res(Weights& w, Rng& rng, const std::string& p, int cin, int cout, int tdim) {
  add_norm(w, p + ".norm1", cin);
  add_conv(w, rng, p + ".conv1", cin, cout, 3);
  add_linear(w, rng, p + ".temb", tdim, cout);
  add_norm(w, p + ".norm2", cout);
  add_conv(w, rng, p + ".conv2", cout, cout, 3);
  if (cin != cout) add_conv(w, rng, p + ".skip", cin, cout, 1);
}

void add_attn(Weights& w, Rng& rng, const std::string& p, int c, int ctx, int d) {
  add_norm(w, p + ".norm", c);
  put_normal(w, rng, p + ".q", {c, d}, 1.0f / std::sqrt(static_cast<float>(c)));
  put_normal(w, rng, p + ".k", {ctx, d}, 1.0f / std::sqrt(static_cast<float>(ctx)));
  put_normal(w, rng, p + ".v", {ctx, d}, 1.0f / std::sqrt(static_cast<float>(ctx)));
  add_linear(w, rng, p + ".o", d, c);
}

}  // namespace

std::vector<CrossAttentionLayer> attention_layers(const ModelConfig& cfg) {
  std::vector<CrossAttentionLayer> out;
  int id = 0;
  for (int l = 1; l < cfg.levels; ++l) {
    out.push_back({id++, cfg.image_size >> l, cfg.level_channels(l), attn_name("enc" + std::to_string(l))});
  }
  out.push_back({id++, cfg.image_size >> cfg.levels, cfg.level_channels(cfg.levels), attn_name("mid")});
  for (int l = cfg.levels - 1; l >= 1; --l) {
    out.push_back({id++, cfg.image_size >> l, cfg.level_channels(l), attn_name("dec" + std::to_string(l))});
  }
  return out;
}

Weights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Weights w;
  const int tdim = cfg.time_dim();
  put_normal(w, rng, "tok_emb", {cfg.vocab_size, cfg.context_dim}, 1.0f);
  put_normal(w, rng, "pos_emb", {cfg.max_prompt_len, cfg.context_dim}, 0.5f);
  add_linear(w, rng, "time.l1", cfg.channels, tdim);
  add_linear(w, rng, "time.l2", tdim, tdim);
  add_conv(w, rng, "conv_in", 3, cfg.channels, 3);
  add_res(w, rng, res_name("enc0"), cfg.channels, cfg.channels, tdim);
  for (int l = 1; l <= cfg.levels; ++l) {
    const std::string p = l < cfg.levels ? "enc" + std::to_string(l) : "mid";
    add_res(w, rng, res_name(p), cfg.level_channels(l - 1), cfg.level_channels(l), tdim);
  }
  for (const auto& layer : attention_layers(cfg)) {
    add_attn(w, rng, layer.prefix, layer.channels, cfg.context_dim, cfg.context_dim);
  }
  for (int l = cfg.levels - 1; l >= 0; --l) {
    add_res(w, rng, res_name("dec" + std::to_string(l)), cfg.level_channels(l + 1) + cfg.level_channels(l),
            cfg.level_channels(l), tdim);
  }
  add_norm(w, "out.norm", cfg.channels);
  add_conv(w, rng, "out.conv", cfg.channels, 3, 3, 0.1f);
  return w;
}

std::size_t parameter_count(const Weights& weights) {
  std::size_t n = 0;
  for (const auto& [_, t] : weights) n += t.size();
  return n;
}

// ---------------------------------------------------------------------------
// Binding

template <class T>
ad::BasicVar<T> ParamBinder<T>::operator()(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  auto w = weights_.find(name);
  if (w == weights_.end()) throw ConfigError("missing weight '" + name + "'");
  ad::BasicVar<T> v = tape_.leaf(w->second, trainable_);
  bound_.emplace(name, v);
  return v;
}

template <class T>
BasicWeights<T> ParamBinder<T>::gradients() const {
  BasicWeights<T> g;
  for (const auto& [name, v] : bound_) g[name] = tape_.grad(v);
  return g;
}

// ---------------------------------------------------------------------------
// Forward

template <class T>
BasicTensor<T> BasicAttentionRecord<T>::map() const {
  if (heads.empty()) return {};
  const Shape& s = heads.front().shape();
  std::vector<T> data;
  data.reserve(heads.size() * heads.front().value().size());
  for (const auto& h : heads) data.insert(data.end(), h.value().vec().begin(), h.value().vec().end());
  return BasicTensor<T>({static_cast<int>(heads.size()), s[0], s[1]}, std::move(data));
}

AttentionSnapshot snapshot(const AttentionRecord& record) {
  return {record.layer, record.resolution, record.map()};
}

std::vector<int> pad_prompt(std::span<const int> prompt, int length) {
  std::vector<int> out(static_cast<std::size_t>(length), Vocabulary::kPad);
  const std::size_t n = std::min(prompt.size(), out.size());
  std::copy_n(prompt.begin(), n, out.begin());
  return out;
}

std::vector<int> null_prompt(int length) { return std::vector<int>(static_cast<std::size_t>(length), Vocabulary::kNull); }

template <class T>
ad::BasicVar<T> embed_tokens(ParamBinder<T>& params, const ModelConfig& cfg, std::span<const int> prompt) {
  const std::vector<int> ids = pad_prompt(prompt, cfg.max_prompt_len);
  const int L = cfg.max_prompt_len;
  // One-hot selection keeps the lookup differentiable with existing ops.
  BasicTensor<T> onehot({L, cfg.vocab_size}, T(0));
  for (int i = 0; i < L; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= cfg.vocab_size) {
      throw ConfigError("token id " + std::to_string(id) + " outside vocabulary of size " +
                        std::to_string(cfg.vocab_size));
    }
    onehot[static_cast<std::size_t>(i * cfg.vocab_size + id)] = T(1);
  }
  ad::BasicVar<T> ctx = ad::matmul(params.tape().constant(std::move(onehot)), params("tok_emb"));
  if (cfg.positional_embedding) ctx = ad::add(ctx, params("pos_emb"));
  return ctx;
}

namespace {

template <class T>
ad::BasicVar<T> linear(ParamBinder<T>& params, const std::string& p, ad::BasicVar<T> x) {
  return ad::add_row_vector(ad::matmul(x, params(p + ".w")), params(p + ".b"));
}

template <class T>
ad::BasicVar<T> norm(ParamBinder<T>& params, const ModelConfig& cfg, const std::string& p, ad::BasicVar<T> x) {
  return ad::group_norm(x, cfg.groups, params(p + ".g"), params(p + ".b"));
}

template <class T>
ad::BasicVar<T> conv(ParamBinder<T>& params, const std::string& p, ad::BasicVar<T> x) {
  return ad::conv2d(x, params(p + ".w"), params(p + ".b"));
}

template <class T>
ad::BasicVar<T> res_block(ParamBinder<T>& params, const ModelConfig& cfg, const std::string& p, ad::BasicVar<T> x,
                          ad::BasicVar<T> temb) {
  auto h = conv(params, p + ".conv1", ad::silu(norm(params, cfg, p + ".norm1", x)));
  auto tb = linear(params, p + ".temb", temb);  // [1, cout]
  h = ad::add_channel(h, ad::reshape(tb, {tb.value().dim(1)}));
  h = conv(params, p + ".conv2", ad::silu(norm(params, cfg, p + ".norm2", h)));
  auto skip = x.shape()[0] == h.shape()[0] ? x : conv(params, p + ".skip", x);
  return ad::add(skip, h);
}

}  // namespace

Tensor64 timestep_embedding(int t, int dim) {
  const int half = dim / 2;
  Tensor64 e({dim});
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e[static_cast<std::size_t>(i)] = std::sin(t * freq);
    e[static_cast<std::size_t>(half + i)] = std::cos(t * freq);
  }
  return e;
}

template <class T>
CrossAttentionOutput<T> cross_attention_forward(ParamBinder<T>& params, const ModelConfig& cfg,
                                                const CrossAttentionLayer& layer, ad::BasicVar<T> features,
                                                ad::BasicVar<T> context, const BasicAttentionHook<T>* hook) {
  using Var = ad::BasicVar<T>;
  const Shape& fs = features.shape();
  if (fs.size() != 3 || fs[1] * fs[2] != layer.resolution * layer.resolution || fs[0] != layer.channels) {
    throw DimensionError("cross-attention layer " + std::to_string(layer.id) + " expects [" +
                         std::to_string(layer.channels) + "," + std::to_string(layer.resolution) + "," +
                         std::to_string(layer.resolution) + "], got " + shape_str(fs));
  }
  if (context.value().rank() != 2 || context.value().dim(1) != cfg.context_dim) {
    throw DimensionError("context must be [L," + std::to_string(cfg.context_dim) + "], got " +
                         shape_str(context.shape()));
  }
  const int c = fs[0], P = fs[1] * fs[2];
  const std::string& p = layer.prefix;
  Var xn = ad::transpose(ad::reshape(norm(params, cfg, p + ".norm", features), {c, P}));  // [P, c]
  Var q = ad::matmul(xn, params(p + ".q"));
  Var k = ad::matmul(context, params(p + ".k"));
  Var v = ad::matmul(context, params(p + ".v"));
  const int dh = cfg.context_dim / cfg.heads;
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(dh));

  BasicAttentionRecord<T> record{layer.id, layer.resolution, {}};
  std::vector<Var> head_out;
  for (int h = 0; h < cfg.heads; ++h) {
    Var qh = cfg.heads == 1 ? q : ad::slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = cfg.heads == 1 ? k : ad::slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = cfg.heads == 1 ? v : ad::slice_cols(v, h * dh, (h + 1) * dh);
    Var logits = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt_d);  // [P, L]
    const AttentionSite site{layer.id, layer.resolution, h};
    if (hook) logits = hook->adjust_logits(site, logits);
    Var m = ad::softmax_last_dim(logits);
    if (hook) m = hook->adjust_probs(site, m);
    record.heads.push_back(m);
    head_out.push_back(ad::matmul(m, vh));
  }
  Var o = linear(params, p + ".o", ad::concat_cols(head_out));  // [P, c]
  Var out = ad::add(features, ad::reshape(ad::transpose(o), fs));
  return {out, std::move(record)};
}

template <class T>
UNetOutput<T> unet_forward(ParamBinder<T>& params, const ModelConfig& cfg, ad::BasicVar<T> z_t, int t,
                           ad::BasicVar<T> context, const BasicAttentionHook<T>* hook) {
  using Var = ad::BasicVar<T>;
  const Shape expect{3, cfg.image_size, cfg.image_size};
  if (z_t.shape() != expect) {
    throw DimensionError("unet_forward: expected input " + shape_str(expect) + ", got " + shape_str(z_t.shape()));
  }
  auto& tape = params.tape();
  Var temb = tape.constant(tensor_cast<T>(timestep_embedding(t, cfg.channels)).reshaped({1, cfg.channels}));
  temb = linear(params, "time.l2", ad::silu(linear(params, "time.l1", temb)));

  const auto layers = attention_layers(cfg);
  std::size_t next_layer = 0;
  UNetOutput<T> out;
  auto attend = [&](Var h) {
    auto r = cross_attention_forward(params, cfg, layers[next_layer++], h, context, hook);
    out.records.push_back(std::move(r.record));
    return r.features;
  };

  Var h = conv(params, "conv_in", z_t);
  h = res_block(params, cfg, res_name("enc0"), h, temb);
  std::vector<Var> skips{h};
  for (int l = 1; l < cfg.levels; ++l) {
    h = res_block(params, cfg, res_name("enc" + std::to_string(l)), ad::downsample2x(h), temb);
    h = attend(h);
    skips.push_back(h);
  }
  h = res_block(params, cfg, res_name("mid"), ad::downsample2x(h), temb);
  h = attend(h);
  for (int l = cfg.levels - 1; l >= 0; --l) {
    h = ad::concat_channels(ad::upsample2x(h), skips[static_cast<std::size_t>(l)]);
    h = res_block(params, cfg, res_name("dec" + std::to_string(l)), h, temb);
    if (l >= 1) h = attend(h);
  }
  h = conv(params, "out.conv", ad::silu(norm(params, cfg, "out.norm", h)));
  // The network output is read as v = sqrt(ab) eps - sqrt(1-ab) x0 and converted to
  // eps, which keeps the x0 estimate bounded at high noise.
  const double ab = noise_schedule().ab(t);
  out.noise = ad::add(ad::scale(z_t, static_cast<T>(std::sqrt(1.0 - ab))), ad::scale(h, static_cast<T>(std::sqrt(ab))));
  return out;
}

#define MAGD_INSTANTIATE_MODEL(T)                                                                        \
  template class ParamBinder<T>;                                                                         \
  template struct BasicAttentionRecord<T>;                                                               \
  template ad::BasicVar<T> embed_tokens(ParamBinder<T>&, const ModelConfig&, std::span<const int>);       \
  template CrossAttentionOutput<T> cross_attention_forward(ParamBinder<T>&, const ModelConfig&,          \
                                                           const CrossAttentionLayer&, ad::BasicVar<T>,  \
                                                           ad::BasicVar<T>, const BasicAttentionHook<T>*); \
  template UNetOutput<T> unet_forward(ParamBinder<T>&, const ModelConfig&, ad::BasicVar<T>, int,          \
                                      ad::BasicVar<T>, const BasicAttentionHook<T>*);

MAGD_INSTANTIATE_MODEL(float)
MAGD_INSTANTIATE_MODEL(double)

}  // namespace magd
