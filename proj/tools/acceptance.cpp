// Acceptance suite: runs criteria 1-10 and prints one PASS/FAIL line per criterion.
// A trained default checkpoint is cached under --cache-dir and reused by later runs.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"

#include "magd/binary_io.hpp"
#include "magd/checkpoint.hpp"
#include "magd/commands.hpp"
#include "magd/control.hpp"
#include "magd/eval.hpp"
#include "magd/image_io.hpp"

namespace fs = std::filesystem;
using namespace magd;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

constexpr std::uint64_t kHeldOutSeed = 977;
constexpr int kTrainSteps = 2000;

struct Context {
  std::string cache;
  int jobs = 1;
  std::optional<Model> model;
  std::vector<double> loss_log;  // from the cached training run
  bool trained_now = false;
  bool retrain = false;

  std::string path(const std::string& name) const { return cache + "/" + name; }

  // Default configuration, default dataset, 2000 steps.
  const Model& trained() {
    if (model) return *model;
    const std::string ckpt = path("train2000.ckpt");
    RunConfig cfg;
    cfg.train.steps = kTrainSteps;
    bool reuse = !retrain && fs::exists(ckpt) && fs::exists(ckpt + ".loss");
    if (reuse) {
      try {
        Model m = load_checkpoint(ckpt);
        reuse = m.config == cfg.model && m.train_steps == static_cast<std::uint64_t>(kTrainSteps);
        if (reuse) model = std::move(m);
      } catch (const std::exception&) {
        reuse = false;
      }
    }
    if (!reuse) {
      std::ostringstream log;
      cmd_gen_data(cfg, path("train_data"), log);
      std::cout << "  training " << kTrainSteps << " steps (cached afterwards) ..." << std::endl;
      cmd_train(cfg, path("train_data"), ckpt, log);
      model = load_checkpoint(ckpt);
      trained_now = true;
    }
    std::istringstream in(io::read_text(ckpt + ".loss"));
    loss_log.clear();
    for (long step; in >> step;) {
      double v;
      in >> v;
      loss_log.push_back(v);
    }
    return *model;
  }

  std::vector<Scene> held_out(int count) const {
    std::vector<Scene> out;
    for (int i = 0; i < count; ++i) {
      Rng rng(split_seed(kHeldOutSeed, static_cast<std::uint64_t>(i)));
      out.push_back(render_scene(random_scene(rng)));
    }
    return out;
  }
};

// ---- 1 ----

SemanticMask random_mask(Rng& rng, int size, int regions) {
  SemanticMask m;
  m.height = m.width = size;
  for (int i = 0; i < regions; ++i) {
    m.regions.emplace_back(static_cast<std::size_t>(size) * size, 0);
    m.labels.push_back("r" + std::to_string(i));
  }
  // Disjoint rectangles in separate horizontal bands.
  const int band = size / regions;
  for (int i = 0; i < regions; ++i) {
    const int y0 = i * band + static_cast<int>(rng.uniform() * (band / 2));
    const int y1 = std::min(size, y0 + 1 + static_cast<int>(rng.uniform() * (band - (y0 - i * band))));
    const int x0 = static_cast<int>(rng.uniform() * (size / 2));
    const int x1 = std::min(size, x0 + 1 + static_cast<int>(rng.uniform() * (size / 2 + 1)));
    for (int y = y0; y < std::max(y1, y0 + 1); ++y)
      for (int x = x0; x < x1; ++x) m.regions[i][static_cast<std::size_t>(y) * size + x] = 1;
  }
  return m;
}

Outcome gradient_check() {
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.levels = 2;
  cfg.channels = 8;
  cfg.groups = 4;
  cfg.context_dim = 8;
  const std::vector<int> prompt = pad_prompt(std::vector<int>{2, 6, 4, 8}, cfg.max_prompt_len);
  const Correspondence corr{{{0, 1}, {2, 3}}};
  const double h = 1e-3;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(split_seed(4242, seed));
    const auto w = weights_cast<double>(init_weights(cfg, seed));
    const SemanticMask mask = random_mask(rng, cfg.image_size, 2);
    const Tensor64 z = tensor_cast<double>(rng.normal_tensor({3, cfg.image_size, cfg.image_size}));
    const int t = static_cast<int>(rng.uniform() * 1000);
    const auto lg = attention_loss_and_grad<double>(w, cfg, z, t, prompt, mask, corr, 0.5);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      Tensor64 zp = z, zm = z;
      zp[i] += h;
      zm[i] -= h;
      const double fd = (attention_loss<double>(w, cfg, zp, t, prompt, mask, corr, 0.5) -
                         attention_loss<double>(w, cfg, zm, t, prompt, mask, corr, 0.5)) /
                        (2 * h);
      num += (lg.grad[i] - fd) * (lg.grad[i] - fd);
      den += fd * fd;
    }
    worst = std::max(worst, std::sqrt(num) / std::max(std::sqrt(den), 1e-300));
  }
  return {worst <= 1e-3, fmt("worst relative L2 error %.3g over 5 seeds (tol 1e-3)", worst)};
}

// ---- 2 ----

Outcome loss_oracle() {
  Rng rng(2024);
  double worst = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const int r = rng.uniform() < 0.5 ? 4 : 8, L = 8, P = r * r;
    const int heads = 1 + static_cast<int>(rng.uniform() * 2), layers = 1 + static_cast<int>(rng.uniform() * 3);
    const int n = 1 + static_cast<int>(rng.uniform() * 3);
    const double lambda = rng.uniform() * 2.0;
    SemanticMask mask;
    mask.height = mask.width = r;
    mask.regions.assign(static_cast<std::size_t>(n), std::vector<std::uint8_t>(static_cast<std::size_t>(P), 0));
    mask.labels.assign(static_cast<std::size_t>(n), "r");
    for (int p = 0; p < P; ++p) {
      const int owner = static_cast<int>(rng.uniform() * (n + 1)) - 1;
      if (owner >= 0) mask.regions[owner][p] = 1;
    }
    for (int i = 0; i < n; ++i) mask.regions[i][static_cast<std::size_t>(i)] = 1;
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < n; ++k)
        if (k != i) mask.regions[k][static_cast<std::size_t>(i)] = 0;
    Correspondence corr;
    for (int i = 0; i < n; ++i) {
      std::vector<int> ws;
      for (int w = 0; w < L; ++w)
        if (rng.uniform() < 0.3) ws.push_back(w);
      if (ws.empty()) ws.push_back(static_cast<int>(rng.uniform() * L));
      corr.words.push_back(ws);
    }
    std::vector<AttentionSnapshot> snaps;
    for (int l = 0; l < layers; ++l) {
      Tensor m({heads, P, L});
      for (int k = 0; k < heads * P; ++k) {
        double s = 0;
        std::vector<double> row(L);
        for (auto& v : row) s += (v = rng.uniform() + 1e-3);
        for (int w = 0; w < L; ++w) m[static_cast<std::size_t>(k) * L + w] = static_cast<float>(row[w] / s);
      }
      snaps.push_back({l, r, m});
    }
    // sum over layers, heads, regions, pixels and the region's words
    double oracle = 0.0;
    for (const auto& s : snaps)
      for (int hd = 0; hd < heads; ++hd)
        for (int i = 0; i < n; ++i)
          for (int p = 0; p < P; ++p)
            for (int w : corr.words[i]) {
              const double v = s.map[(static_cast<std::size_t>(hd) * P + p) * L + w];
              oracle += mask.regions[i][p] ? -v : lambda * v;
            }
    const double got = masked_attention_loss(snaps, mask, corr, lambda);
    ad::BasicTape<double> tape;
    std::vector<BasicAttentionRecord<double>> recs;
    for (const auto& s : snaps) {
      BasicAttentionRecord<double> rec{s.layer, r, {}};
      for (int hd = 0; hd < heads; ++hd) {
        Tensor64 one({P, L});
        for (int k = 0; k < P * L; ++k) one[k] = s.map[static_cast<std::size_t>(hd) * P * L + k];
        rec.heads.push_back(tape.constant(one));
      }
      recs.push_back(std::move(rec));
    }
    const double taped =
        masked_attention_loss<double>(std::span<const BasicAttentionRecord<double>>(recs), mask, corr, lambda)
            .value()[0];
    worst = std::max({worst, std::abs(got - oracle), std::abs(taped - oracle)});
  }
  return {worst <= 1e-5, fmt("max |loss - brute force| = %.3g over 100 instances (tol 1e-5)", worst)};
}

// ---- 3 ----

Outcome swap_exactness(Context& ctx) {
  const Model& model = ctx.trained();
  const auto scenes = ctx.held_out(3);
  std::size_t checked = 0, mismatched = 0, idem_fail = 0;
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    const Scene& sc = scenes[k];
    GuidanceConfig g;
    g.method = Method::swap;
    SamplerConfig sp;
    sp.seed = 11 + k;
    const int controlled = g.controlled_steps(sp.num_steps);
    for (int i = 0; i < sp.num_steps; ++i) sp.snapshot_steps.push_back(i);
    const auto res = guided_sample(model, sc.caption, sc.mask, sc.correspondence, sp, g, make_schedule());
    for (const auto& st : res.trace) {
      for (const auto& snap : st.attention) {
        const int r = snap.resolution, P = r * r, L = snap.map.dim(2);
        const auto regions = resize_mask(sc.mask, r);
        if (st.step < controlled) {
          // expected column: sum over regions bound to the word of 1/|C_i| on S_i
          for (int w = 0; w < L; ++w) {
            std::vector<double> col(static_cast<std::size_t>(P), 0.0);
            bool target = false;
            for (int i = 0; i < sc.mask.count(); ++i) {
              const auto& ws = sc.correspondence.words[i];
              if (std::find(ws.begin(), ws.end(), w) == ws.end()) continue;
              target = true;
              for (int p = 0; p < P; ++p)
                if (regions[i][p]) col[p] += 1.0 / static_cast<double>(ws.size());
            }
            if (!target) continue;
            for (int hd = 0; hd < snap.map.dim(0); ++hd)
              for (int p = 0; p < P; ++p) {
                ++checked;
                if (snap.map[(static_cast<std::size_t>(hd) * P + p) * L + w] != static_cast<float>(col[p])) ++mismatched;
              }
          }
          if (!(apply_attention_swap(snap, sc.mask, sc.correspondence).map == snap.map)) ++idem_fail;
        } else {
          const auto once = apply_attention_swap(snap, sc.mask, sc.correspondence);
          if (!(apply_attention_swap(once, sc.mask, sc.correspondence).map == once.map)) ++idem_fail;
        }
      }
    }
  }
  return {checked > 0 && mismatched == 0 && idem_fail == 0,
          fmt("%zu target entries checked, %zu mismatches, %zu idempotence failures", checked, mismatched, idem_fail)};
}

// ---- 4 ----

Outcome descent(Context& ctx) {
  const Model& model = ctx.trained();
  const auto w64 = weights_cast<double>(model.weights);
  const auto scenes = ctx.held_out(20);
  const auto s = make_schedule();
  const int t = ddim_timesteps(50, s).front();
  int eligible = 0, decreased = 0;
  double min_drop = INFINITY;
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    const Scene& sc = scenes[k];
    const Tensor z = initial_noise(sample_seed(static_cast<int>(k), 0), model.config.image_size);
    const auto step =
        guidance_update(model, z, t, sc.caption, sc.mask, sc.correspondence, 1e-4, 0.5, 1, 0);
    if (step.grad_norm <= 1e-6) continue;
    ++eligible;
    const double before = attention_loss<double>(w64, model.config, tensor_cast<double>(z), t, sc.caption, sc.mask,
                                                 sc.correspondence, 0.5);
    const double after = attention_loss<double>(w64, model.config, tensor_cast<double>(step.z), t, sc.caption,
                                                sc.mask, sc.correspondence, 0.5);
    if (after < before) ++decreased;
    min_drop = std::min(min_drop, before - after);
  }
  return {eligible >= 20 && decreased == eligible,
          fmt("%d/%d seeds decrease L_m (smallest drop %.3g)", decreased, eligible, min_drop)};
}

// ---- 5 ----

Outcome null_control(Context& ctx) {
  const Model& model = ctx.trained();
  const Scene sc = ctx.held_out(1).front();
  SamplerConfig sp;
  sp.seed = 7;
  const auto s = make_schedule();
  const auto run = [&](GuidanceConfig g) { return guided_sample(model, sc.caption, sc.mask, sc.correspondence, sp, g, s); };
  const auto vanilla = run({});
  std::vector<std::pair<std::string, GuidanceConfig>> cases;
  GuidanceConfig g;
  g.method = Method::guidance;
  g.alpha = 0.0;
  cases.push_back({"guidance alpha=0", g});
  g = {};
  g.method = Method::paint_with_words;
  g.pww_weight = 0.0;
  cases.push_back({"pww w'=0", g});
  for (Method m : {Method::swap, Method::guidance, Method::paint_with_words}) {
    g = {};
    g.method = m;
    g.tau_fraction = 0.0;
    cases.push_back({std::string(method_name(m)) + " tau=0", g});
  }
  std::string failed;
  for (const auto& [name, cfg] : cases) {
    const auto r = run(cfg);
    if (!(r.z == vanilla.z && r.image == vanilla.image)) failed += (failed.empty() ? "" : ", ") + name;
  }
  return {failed.empty(), failed.empty() ? fmt("%zu configurations bitwise equal to vanilla", cases.size())
                                         : "differs from vanilla: " + failed};
}

// ---- 6, 7 ----

struct Benchmarks {
  std::map<std::string, double> mean;
  std::string table;
};

const Benchmarks& benchmarks(Context& ctx) {
  static std::optional<Benchmarks> cache;
  if (cache) return *cache;
  const Model& model = ctx.trained();
  std::vector<MethodSpec> specs;
  GuidanceConfig g;
  specs.push_back({"none", g});
  g.method = Method::swap;
  specs.push_back({"swap", g});
  g.method = Method::paint_with_words;
  specs.push_back({"pww", g});
  for (double a : {0.01, 0.04, 0.08, 0.16}) {
    g = {};
    g.method = Method::guidance;
    g.alpha = a;
    specs.push_back({"guidance(alpha=" + format_double(a) + ")", g});
  }
  BenchmarkConfig bc;
  bc.jobs = ctx.jobs;
  const auto scenes = ctx.held_out(50);
  const auto reports = benchmark_run(model, scenes, specs, bc, make_schedule());
  Benchmarks b;
  for (const auto& r : reports) b.mean[r.method] = r.mean;
  b.table = format_report_table(reports);
  io::write_text(ctx.path("benchmark_report.txt"), b.table);
  io::write_text(ctx.path("benchmark_records.txt"), format_report_records(reports));
  cache = std::move(b);
  return *cache;
}

Outcome method_ordering(Context& ctx) {
  const auto& b = benchmarks(ctx);
  std::istringstream table(b.table);
  for (std::string line; std::getline(table, line);) std::cout << "    " << line << '\n';
  const double none = b.mean.at("none"), swap = b.mean.at("swap"), guid = b.mean.at("guidance(alpha=0.08)");
  const bool ok = guid > swap && swap > none && guid - none >= 0.10;
  return {ok, fmt("mIoU none %.4f, swap %.4f, guidance(0.08) %.4f; need guidance > swap > none and gap >= 0.10 "
                  "(gap %.4f) over 50 held-out pairs",
                  none, swap, guid, guid - none)};
}

Outcome alpha_trend(Context& ctx) {
  const auto& b = benchmarks(ctx);
  const std::vector<double> alphas{0.01, 0.04, 0.08, 0.16};
  std::vector<double> m;
  for (double a : alphas) m.push_back(b.mean.at("guidance(alpha=" + format_double(a) + ")"));
  const std::size_t best = static_cast<std::size_t>(std::max_element(m.begin(), m.end()) - m.begin());
  bool ok = true;
  for (std::size_t i = 0; i + 1 < m.size(); ++i) {
    if (i < best) ok = ok && m[i + 1] >= m[i] - 0.02;
    else ok = ok && m[i + 1] <= m[i] + 0.02;
  }
  return {ok, fmt("mIoU over alpha {0.01,0.04,0.08,0.16} = %.4f %.4f %.4f %.4f (peak at %.2f, tol 0.02)", m[0], m[1],
                  m[2], m[3], alphas[best])};
}

// ---- 8 ----

Outcome blended_editing(Context& ctx) {
  const Model& model = ctx.trained();
  const auto scenes = ctx.held_out(20);
  const auto s = make_schedule();
  const int H = model.config.image_size, HW = H * H;
  double iou_guided = 0.0, iou_plain = 0.0;
  std::size_t outside_bad = 0;
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    const Scene& sc = scenes[k];
    const auto& target = sc.mask.regions[0];
    // original: the scene with the first object painted over by the background
    Tensor original = sc.image;
    const auto bg = background_rgb(sc.background);
    for (int p = 0; p < HW; ++p)
      if (target[p])
        for (int c = 0; c < 3; ++c) original[static_cast<std::size_t>(c) * HW + p] = 2.0f * bg[c] - 1.0f;
    // edit mask: region dilated by 2 pixels
    Tensor edit({H, H});
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < H; ++x)
        for (int dy = -2; dy <= 2; ++dy)
          for (int dx = -2; dx <= 2; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy >= 0 && yy < H && xx >= 0 && xx < H && target[static_cast<std::size_t>(yy) * H + xx])
              edit[static_cast<std::size_t>(y) * H + x] = 1.0f;
          }
    const Color want = region_colors(sc.caption, sc.correspondence)[0];
    SamplerConfig sp;
    sp.seed = sample_seed(static_cast<int>(k), 0);
    for (bool guided : {true, false}) {
      GuidanceConfig g;
      g.method = guided ? Method::guidance : Method::none;
      const auto res = blended_sample(model, sc.caption, sc.mask, sc.correspondence, original, edit, sp, g, s);
      for (int p = 0; p < HW; ++p)
        if (edit[p] == 0.0f)
          for (int c = 0; c < 3; ++c)
            if (res.z[static_cast<std::size_t>(c) * HW + p] != original[static_cast<std::size_t>(c) * HW + p])
              ++outside_bad;
      auto pred = color_segment_oracle(res.image, {want}, sc.background);
      for (int p = 0; p < HW; ++p)
        if (edit[p] == 0.0f) pred[0][p] = 0;
      const double iou = miou(pred, {target}).mean;
      (guided ? iou_guided : iou_plain) += iou / static_cast<double>(scenes.size());
    }
  }
  return {outside_bad == 0 && iou_guided >= iou_plain,
          fmt("%zu outside-mask values differ from the original; inside-mask IoU guided %.4f vs plain %.4f over 20 "
              "samples",
              outside_bad, iou_guided, iou_plain)};
}

// ---- 9 ----

std::map<std::string, std::string> dir_contents(const std::string& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = io::read_text(e.path().string());
  return out;
}

Outcome determinism(Context& ctx) {
  const auto scene = ctx.held_out(1).front();
  std::vector<std::map<std::string, std::string>> runs;
  for (const char* tag : {"a", "b"}) {
    const std::string root = ctx.path(std::string("determinism_") + tag);
    fs::remove_all(root);
    fs::create_directories(root);
    RunConfig cfg;
    cfg.dataset_count = 64;
    cfg.train.steps = 100;
    cfg.checkpoint_every = 50;
    cfg.jobs = ctx.jobs;
    cfg.sampler.snapshot_steps = {0, 10};
    std::ostringstream log;
    cmd_gen_data(cfg, root + "/data", log);
    cmd_train(cfg, root + "/data", root + "/model/model.ckpt", log);
    write_mask_file(root + "/scene.mask", {scene.caption, scene.mask, scene.correspondence});
    for (const char* m : {"none", "swap", "guidance"}) {
      RunConfig c = cfg;
      c.guidance.method = parse_method(m);
      cmd_sample(c, root + "/model/model.ckpt", root + "/scene.mask", root + "/samples", log);
    }
    cmd_eval(cfg, root + "/model/model.ckpt", root + "/data", {"none", "swap", "guidance"}, {0, 4, {0, 1}},
             root + "/eval", log);
    runs.push_back(dir_contents(root));
  }
  std::size_t differing = 0;
  for (const auto& [name, bytes] : runs[0]) {
    auto it = runs[1].find(name);
    if (it == runs[1].end() || it->second != bytes) ++differing;
  }
  if (runs[0].size() != runs[1].size()) ++differing;
  return {differing == 0 && !runs[0].empty(),
          fmt("%zu files compared across two runs (train 100 steps, sample, eval), %zu differ", runs[0].size(),
              differing)};
}

// ---- 10 ----

int largest_component(const std::vector<std::uint8_t>& m, int H) {
  std::vector<int> seen(m.size(), 0);
  int best = 0;
  for (std::size_t s = 0; s < m.size(); ++s) {
    if (!m[s] || seen[s]) continue;
    int size = 0;
    std::vector<std::size_t> stack{s};
    seen[s] = 1;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++size;
      const int y = static_cast<int>(p) / H, x = static_cast<int>(p) % H;
      const int ny[4] = {y - 1, y + 1, y, y}, nx[4] = {x, x, x - 1, x + 1};
      for (int k = 0; k < 4; ++k) {
        if (ny[k] < 0 || ny[k] >= H || nx[k] < 0 || nx[k] >= H) continue;
        const std::size_t q = static_cast<std::size_t>(ny[k]) * H + nx[k];
        if (m[q] && !seen[q]) seen[q] = 1, stack.push_back(q);
      }
    }
    best = std::max(best, size);
  }
  return best;
}

Outcome training_sanity(Context& ctx) {
  const Model& model = ctx.trained();
  if (ctx.loss_log.size() < 2) return {false, "loss log has fewer than two entries"};
  const double first = ctx.loss_log.front(), last = ctx.loss_log.back();
  const UNetPredictor pred(model);
  const auto s = make_schedule();
  const int attempts = 50;
  int passed = 0;
  const std::vector<Color> palette{Color::red, Color::green, Color::blue, Color::yellow};
  const auto uncond = null_prompt(model.config.max_prompt_len);
  for (int i = 0; i < attempts; ++i) {
    SamplerConfig sp;
    sp.cfg_scale = 1.0;
    sp.seed = split_seed(31337, static_cast<std::uint64_t>(i));
    const auto res = sample(pred, model.config.image_size, uncond, sp, s);
    const auto seg = color_segment_oracle(res.image, palette);
    bool ok = false;
    for (const auto& m : seg) ok = ok || largest_component(m, model.config.image_size) >= 16;
    passed += ok;
  }
  const double rate = static_cast<double>(passed) / attempts;
  return {last < 0.5 * first && rate >= 0.30,
          fmt("loss %.4f -> %.4f (ratio %.3f, need < 0.5); %d/%d unconditional samples contain a palette-colored "
              "object of >= 16 pixels (rate %.2f, need >= 0.30)%s",
              first, last, last / first, passed, attempts, rate, ctx.trained_now ? "" : "; checkpoint from cache")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"magd acceptance suite"};
  std::string cache = "acceptance_cache";
  int jobs = 0;
  std::vector<int> only;
  app.add_option("--cache-dir", cache, "Directory for the trained checkpoint and run artifacts");
  app.add_option("--jobs", jobs, "Worker threads for benchmarks (0: hardware threads)");
  app.add_option("--only", only, "Run only these criteria");
  std::vector<int> expect_fail;
  app.add_option("--expect-fail", expect_fail,
                 "Criteria known to fail; exit status is 0 only if exactly these fail");
  bool retrain = false;
  app.add_flag("--retrain", retrain, "Ignore a cached checkpoint");
  CLI11_PARSE(app, argc, argv);

  fs::create_directories(cache);
  Context ctx;
  ctx.cache = cache;
  ctx.jobs = resolve_jobs(jobs, 50);
  ctx.retrain = retrain;

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_check},
      {"loss oracle equivalence", loss_oracle},
      {"swap exactness", [&] { return swap_exactness(ctx); }},
      {"descent property", [&] { return descent(ctx); }},
      {"null-control equivalence", [&] { return null_control(ctx); }},
      {"method ordering", [&] { return method_ordering(ctx); }},
      {"alpha-sweep trend", [&] { return alpha_trend(ctx); }},
      {"blended editing", [&] { return blended_editing(ctx); }},
      {"determinism", [&] { return determinism(ctx); }},
      {"training sanity", [&] { return training_sanity(ctx); }},
  };
  std::vector<int> failed;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) failed.push_back(id);
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << criteria[i].first << ": " << o.detail
              << fmt(" [%.1fs]", secs) << std::endl;
  }
  std::vector<int> expected;
  for (int id : expect_fail)
    if (only.empty() || std::find(only.begin(), only.end(), id) != only.end()) expected.push_back(id);
  std::sort(expected.begin(), expected.end());
  expected.erase(std::unique(expected.begin(), expected.end()), expected.end());
  auto list = [](const std::vector<int>& v) {
    std::string out;
    for (int id : v) out += (out.empty() ? "" : ",") + std::to_string(id);
    return out.empty() ? std::string("none") : out;
  };
  std::cout << failed.size() << " criteria failed (" << list(failed) << "); expected failures: " << list(expected)
            << std::endl;
  return failed == expected ? 0 : 1;
}
