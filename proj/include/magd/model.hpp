#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "magd/autodiff.hpp"
#include "magd/tensor.hpp"

namespace magd {

/// Prompt words. Index 0 is NULL (unconditional prompt), index 1 is PAD.
class Vocabulary {
 public:
  static constexpr int kNull = 0;
  static constexpr int kPad = 1;

  explicit Vocabulary(std::vector<std::string> words);
  // NULL, PAD, the four colors and the three shapes.
  static const Vocabulary& shapes();

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const;
  int id(const std::string& token) const;  // throws ConfigError when unknown
  bool contains(const std::string& token) const;
  std::uint64_t hash() const;  // FNV-1a over the ordered token strings
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
};

struct ModelConfig {
  int image_size = 32;
  int channels = 32;  // level 0 width; deeper levels use 2x
  int levels = 3;     // number of 2x downsamplings
  int heads = 1;
  int context_dim = 32;
  int max_prompt_len = 8;
  int vocab_size = 9;
  int groups = 8;
  bool positional_embedding = true;  // test hook

  void validate() const;
  int level_channels(int level) const { return level == 0 ? channels : 2 * channels; }
  int time_dim() const { return 4 * channels; }
  int num_attention_layers() const { return 2 * levels - 1; }
  // Spatial side of each cross-attention layer, in record order.
  std::vector<int> attention_resolutions() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
using BasicWeights = std::map<std::string, BasicTensor<T>>;
using Weights = BasicWeights<float>;

template <class To, class From>
BasicWeights<To> weights_cast(const BasicWeights<From>& w) {
  BasicWeights<To> out;
  for (const auto& [name, t] : w) out.emplace(name, tensor_cast<To>(t));
  return out;
}

/// Initial weights, deterministic in `seed`.
Weights init_weights(const ModelConfig& config, std::uint64_t seed);

/// Puts weights on a tape, either as trainable leaves or as constants. Each name is
/// bound at most once per tape so gradients can be collected afterwards.
template <class T>
class ParamBinder {
 public:
  ParamBinder(ad::BasicTape<T>& tape, const BasicWeights<T>& weights, bool trainable)
      : tape_(tape), weights_(weights), trainable_(trainable) {}

  ad::BasicVar<T> operator()(const std::string& name);
  ad::BasicTape<T>& tape() { return tape_; }
  BasicWeights<T> gradients() const;

 private:
  ad::BasicTape<T>& tape_;
  const BasicWeights<T>& weights_;
  bool trainable_;
  std::map<std::string, ad::BasicVar<T>> bound_;
};

struct CrossAttentionLayer {
  int id = 0;
  int resolution = 0;
  int channels = 0;
  std::string prefix;  // weight name prefix
};

std::vector<CrossAttentionLayer> attention_layers(const ModelConfig& config);

/// Cross-attention map of one layer. `heads[h]` is the [P, L] map used in the forward
/// computation; it is live on the forward tape so losses built on it reach z_t.
template <class T>
struct BasicAttentionRecord {
  int layer = 0;
  int resolution = 0;
  std::vector<ad::BasicVar<T>> heads;

  BasicTensor<T> map() const;  // [heads, P, L]
};
using AttentionRecord = BasicAttentionRecord<float>;

/// Detached copy of an attention map.
struct AttentionSnapshot {
  int layer = 0;
  int resolution = 0;
  Tensor map;  // [heads, P, L]
};

AttentionSnapshot snapshot(const AttentionRecord& record);

struct AttentionSite {
  int layer = 0;
  int resolution = 0;
  int head = 0;
};

/// Intercepts attention inside the forward pass. Logits are QK^T/sqrt(d) before the
/// softmax; probs are the map itself.
template <class T>
class BasicAttentionHook {
 public:
  virtual ~BasicAttentionHook() = default;
  virtual ad::BasicVar<T> adjust_logits(const AttentionSite&, ad::BasicVar<T> logits) const { return logits; }
  virtual ad::BasicVar<T> adjust_probs(const AttentionSite&, ad::BasicVar<T> probs) const { return probs; }
};
using AttentionHook = BasicAttentionHook<float>;

/// Pads with PAD or truncates to `length`.
std::vector<int> pad_prompt(std::span<const int> prompt, int length);
std::vector<int> null_prompt(int length);

/// Token plus positional embedding, [L, context_dim].
template <class T>
ad::BasicVar<T> embed_tokens(ParamBinder<T>& params, const ModelConfig& config, std::span<const int> prompt);

template <class T>
struct CrossAttentionOutput {
  ad::BasicVar<T> features;
  BasicAttentionRecord<T> record;
};

template <class T>
CrossAttentionOutput<T> cross_attention_forward(ParamBinder<T>& params, const ModelConfig& config,
                                                const CrossAttentionLayer& layer, ad::BasicVar<T> features,
                                                ad::BasicVar<T> context, const BasicAttentionHook<T>* hook = nullptr);

Tensor64 timestep_embedding(int t, int dim);

template <class T>
struct UNetOutput {
  ad::BasicVar<T> noise;
  std::vector<BasicAttentionRecord<T>> records;  // encoder, bottleneck, decoder order
};

template <class T>
UNetOutput<T> unet_forward(ParamBinder<T>& params, const ModelConfig& config, ad::BasicVar<T> z_t, int t,
                           ad::BasicVar<T> context, const BasicAttentionHook<T>* hook = nullptr);

/// Immutable bundle used by the sampler and trainer.
struct Model {
  ModelConfig config;
  Weights weights;
  std::uint64_t train_steps = 0;
};

std::size_t parameter_count(const Weights& weights);

}  // namespace magd
