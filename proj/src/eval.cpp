#include "magd/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "magd/errors.hpp"
#include "magd/image_io.hpp"

namespace magd {

RegionMaps color_segment_oracle(const Tensor& image, const std::vector<Color>& colors,
                                std::optional<Background> background, double threshold) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("oracle: image must be [3,H,W]");
  if (std::set<Color>(colors.begin(), colors.end()).size() != colors.size())
    throw ConfigError("oracle: regions share a color and cannot be separated");
  std::vector<std::array<float, 3>> bgs;
  if (background) {
    bgs.push_back(background_rgb(*background));
  } else {
    bgs = {background_rgb(Background::black), background_rgb(Background::white)};
  }
  const std::size_t hw = static_cast<std::size_t>(image.dim(1)) * image.dim(2);
  RegionMaps out(colors.size(), std::vector<std::uint8_t>(hw, 0));
  auto dist2 = [&](std::size_t p, const std::array<float, 3>& c) {
    double d = 0;
    for (int k = 0; k < 3; ++k) {
      const double e = static_cast<double>(image[k * hw + p]) - c[k];
      d += e * e;
    }
    return d;
  };
  const double th2 = threshold * threshold;
  for (std::size_t p = 0; p < hw; ++p) {
    int best = -1;
    double bd = 0;
    for (std::size_t i = 0; i < colors.size(); ++i) {
      const double d = dist2(p, color_rgb(colors[i]));
      if (best < 0 || d < bd) {
        best = static_cast<int>(i);
        bd = d;
      }
    }
    if (best < 0 || bd > th2) continue;
    bool ok = true;
    for (std::size_t i = 0; i < colors.size() && ok; ++i)
      if (static_cast<int>(i) != best && dist2(p, color_rgb(colors[i])) <= bd) ok = false;
    for (const auto& b : bgs)
      if (dist2(p, b) <= bd) ok = false;
    if (ok) out[static_cast<std::size_t>(best)][p] = 1;
  }
  return out;
}

std::vector<Color> region_colors(std::span<const int> prompt, const Correspondence& corr) {
  const auto& v = Vocabulary::shapes();
  std::vector<Color> out;
  for (std::size_t i = 0; i < corr.words.size(); ++i) {
    std::optional<Color> c;
    for (int w : corr.words[i]) {
      const std::string& tok = v.token(prompt[static_cast<std::size_t>(w)]);
      for (int k = 0; k < kNumColors; ++k)
        if (tok == color_name(static_cast<Color>(k))) c = static_cast<Color>(k);
    }
    if (!c) throw ConfigError("region " + std::to_string(i) + " has no color word");
    out.push_back(*c);
  }
  return out;
}

IouResult miou(const RegionMaps& pred, const RegionMaps& truth) {
  if (pred.size() != truth.size()) throw DimensionError("miou: region counts differ");
  IouResult r;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].size() != truth[i].size()) throw DimensionError("miou: resolution mismatch in region " + std::to_string(i));
    std::size_t inter = 0, uni = 0;
    for (std::size_t p = 0; p < pred[i].size(); ++p) {
      inter += pred[i][p] && truth[i][p];
      uni += pred[i][p] || truth[i][p];
    }
    r.per_region.push_back(uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni));
  }
  double s = 0;
  for (double v : r.per_region) s += v;
  r.mean = r.per_region.empty() ? 0.0 : s / static_cast<double>(r.per_region.size());
  return r;
}

const std::vector<std::array<std::uint8_t, 3>>& heatmap_colormap() {
  static const auto map = [] {
    std::vector<std::array<std::uint8_t, 3>> m(256);
    for (int k = 0; k < 256; ++k)
      m[k] = {static_cast<std::uint8_t>(k), 0, static_cast<std::uint8_t>(255 - k)};
    return m;
  }();
  return map;
}

Tensor attention_heatmap(const AttentionSnapshot& snap, int word, int head) {
  const int heads = snap.map.dim(0), P = snap.map.dim(1), L = snap.map.dim(2);
  if (word < 0 || word >= L) throw UsageError("heatmap: word " + std::to_string(word) + " outside prompt");
  if (head < 0 || head >= heads) throw UsageError("heatmap: head out of range");
  const int r = snap.resolution;
  if (r * r != P) throw DimensionError("heatmap: map does not match its resolution");
  std::vector<float> col(static_cast<std::size_t>(P));
  for (int p = 0; p < P; ++p) col[p] = snap.map[(static_cast<std::size_t>(head) * P + p) * L + word];
  const auto [lo, hi] = std::minmax_element(col.begin(), col.end());
  const double mn = *lo, range = static_cast<double>(*hi) - mn;
  const auto& cmap = heatmap_colormap();
  Tensor img({3, r, r});
  for (int p = 0; p < P; ++p) {
    const int idx = range > 0 ? static_cast<int>(std::lround((col[p] - mn) / range * 255.0)) : 0;
    for (int c = 0; c < 3; ++c) img[static_cast<std::size_t>(c) * P + p] = cmap[idx][c] / 255.f;
  }
  return img;
}

void attention_heatmap_export(const AttentionSnapshot& snap, int word, const std::string& path, int head) {
  image_write(path, attention_heatmap(snap, word, head));
}

std::uint64_t sample_seed(int id, std::uint64_t seed) { return split_seed(seed, static_cast<std::uint64_t>(id) + 1); }

std::vector<EvalReport> benchmark_run(const Model& model, const std::vector<Scene>& scenes,
                                      const std::vector<MethodSpec>& methods, const BenchmarkConfig& cfg,
                                      const Schedule& s) {
  if (methods.empty()) throw UsageError("benchmark: no methods");
  if (scenes.empty()) throw UsageError("benchmark: no samples");
  if (cfg.seeds.empty()) throw UsageError("benchmark: at least one seed required");
  for (const auto& m : methods) m.guidance.validate();

  struct Task {
    int scene, seed_index, method;
  };
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < scenes.size(); ++i)
    for (std::size_t k = 0; k < cfg.seeds.size(); ++k)
      for (std::size_t m = 0; m < methods.size(); ++m)
        tasks.push_back({static_cast<int>(i), static_cast<int>(k), static_cast<int>(m)});
  std::vector<SampleScore> scores(tasks.size());

  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr err;
  auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < tasks.size();) {
      try {
        const Task& tk = tasks[j];
        const Scene& sc = scenes[static_cast<std::size_t>(tk.scene)];
        SamplerConfig sampler = cfg.sampler;
        const int id = cfg.first_id + tk.scene;
        sampler.seed = sample_seed(id, cfg.seeds[static_cast<std::size_t>(tk.seed_index)]);
        const auto t0 = std::chrono::steady_clock::now();
        const auto res = guided_sample(model, sc.caption, sc.mask, sc.correspondence, sampler,
                                       methods[static_cast<std::size_t>(tk.method)].guidance, s);
        const auto pred = color_segment_oracle(res.image, region_colors(sc.caption, sc.correspondence));
        const auto iou = miou(pred, sc.mask.regions);
        scores[j] = {id, sampler.seed, iou.per_region, iou.mean,
                     std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!err) err = std::current_exception();
        next = tasks.size();
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(cfg.jobs, static_cast<int>(tasks.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < jobs; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (err) std::rethrow_exception(err);

  std::vector<EvalReport> reports;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    EvalReport r;
    r.method = methods[m].label;
    r.guidance = methods[m].guidance;
    for (std::size_t j = 0; j < tasks.size(); ++j)
      if (tasks[j].method == static_cast<int>(m)) r.samples.push_back(scores[j]);
    std::sort(r.samples.begin(), r.samples.end(), [](const SampleScore& a, const SampleScore& b) {
      return a.sample_id != b.sample_id ? a.sample_id < b.sample_id : a.seed < b.seed;
    });
    double sum = 0;
    for (const auto& sc : r.samples) sum += sc.miou;
    r.mean = sum / static_cast<double>(r.samples.size());
    double ss = 0;
    for (const auto& sc : r.samples) ss += (sc.miou - r.mean) * (sc.miou - r.mean);
    r.stddev = std::sqrt(ss / static_cast<double>(r.samples.size()));
    reports.push_back(std::move(r));
  }
  return reports;
}

std::string format_report_table(const std::vector<EvalReport>& reports) {
  std::size_t w = 6;
  for (const auto& r : reports) w = std::max(w, r.method.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w)) << "method" << "  " << std::right << std::setw(8) << "samples"
     << "  " << std::setw(8) << "mIoU" << "  " << std::setw(8) << "std" << '\n';
  os << std::string(w + 32, '-') << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& r : reports)
    os << std::left << std::setw(static_cast<int>(w)) << r.method << "  " << std::right << std::setw(8)
       << r.samples.size() << "  " << std::setw(8) << r.mean << "  " << std::setw(8) << r.stddev << '\n';
  return os.str();
}

std::string format_report_records(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (const auto& r : reports)
    for (const auto& s : r.samples) {
      os << "sample=" << s.sample_id << " method=" << r.method << " seed=" << s.seed << " iou=";
      for (std::size_t i = 0; i < s.iou.size(); ++i) os << (i ? "," : "") << s.iou[i];
      os << " mean=" << s.miou << '\n';
    }
  return os.str();
}

}  // namespace magd
