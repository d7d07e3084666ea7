#pragma once
// Color-oracle segmentation, mIoU, attention heatmaps and method benchmarks.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "magd/control.hpp"
#include "magd/data.hpp"

namespace magd {

inline constexpr double kOracleThreshold = 0.35;

/// Pixel goes to region i when within `threshold` of its color and strictly closer to it
/// than to every other region color and to the background (both black and white when
/// the background is unknown). image is [3,H,W] in [0,1].
RegionMaps color_segment_oracle(const Tensor& image, const std::vector<Color>& colors,
                                std::optional<Background> background = std::nullopt,
                                double threshold = kOracleThreshold);

/// Color word of each region, read from the caption positions bound to it.
std::vector<Color> region_colors(std::span<const int> prompt, const Correspondence& corr);

struct IouResult {
  std::vector<double> per_region;
  double mean = 0.0;
};

IouResult miou(const RegionMaps& pred, const RegionMaps& truth);

/// 256-entry colormap from blue (0) to red (255).
const std::vector<std::array<std::uint8_t, 3>>& heatmap_colormap();

/// Column `word` of head `head`, min-max normalized to colormap indices (constant
/// columns map to index 0). Returns [3,r,r] in [0,1].
Tensor attention_heatmap(const AttentionSnapshot& snap, int word, int head = 0);
void attention_heatmap_export(const AttentionSnapshot& snap, int word, const std::string& path, int head = 0);

struct SampleScore {
  int sample_id = 0;
  std::uint64_t seed = 0;
  std::vector<double> iou;
  double miou = 0.0;
  double seconds = 0.0;
};

struct EvalReport {
  std::string method;  // label, e.g. "guidance(alpha=0.08)"
  GuidanceConfig guidance;
  std::vector<SampleScore> samples;  // sorted by (sample_id, seed)
  double mean = 0.0;
  double stddev = 0.0;  // population
};

struct MethodSpec {
  std::string label;
  GuidanceConfig guidance;
};

struct BenchmarkConfig {
  SamplerConfig sampler;  // seed field unused; per-sample seeds come from `seeds`
  std::vector<std::uint64_t> seeds{0};
  int jobs = 1;
  int first_id = 0;  // id of scenes[0] in its dataset
};

/// Samples every (scene, seed, method), segments with the color oracle and scores
/// against the scene masks. Parallel over samples with a bounded pool.
std::vector<EvalReport> benchmark_run(const Model& model, const std::vector<Scene>& scenes,
                                      const std::vector<MethodSpec>& methods, const BenchmarkConfig& cfg,
                                      const Schedule& s);

/// Seed used for scene `id` and base seed `seed`.
std::uint64_t sample_seed(int id, std::uint64_t seed);

std::string format_report_table(const std::vector<EvalReport>& reports);
// One line per sample: sample id, method, seed, per-region IoU, mean.
std::string format_report_records(const std::vector<EvalReport>& reports);

}  // namespace magd
