#include "magd/commands.hpp"

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "magd/binary_io.hpp"
#include "magd/checkpoint.hpp"
#include "magd/errors.hpp"
#include "magd/image_io.hpp"

namespace magd {

namespace {

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

Model load_model_for(const RunConfig& cfg, const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint '" + path + "' not found");
  Model m = load_checkpoint(path);
  if (m.config.max_prompt_len != cfg.model.max_prompt_len)
    throw ConfigError("checkpoint prompt length differs from configuration");
  return m;
}

}  // namespace

int resolve_jobs(int jobs, std::size_t work_items) {
  int j = jobs > 0 ? jobs : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  return std::max(1, std::min<int>(j, static_cast<int>(std::max<std::size_t>(1, work_items))));
}

int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir, std::ostream& log) {
  cfg.validate();
  const auto ix = generate_dataset(out_dir, cfg.dataset_seed, cfg.dataset_count, cfg.data);
  log << "wrote " << ix.count << " samples to " << out_dir << " (hash " << std::hex << dataset_hash(out_dir)
      << std::dec << ")\n";
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, const std::string& dataset_dir, const std::string& out, std::ostream& log) {
  cfg.validate();
  const auto ix = load_index(dataset_dir);
  if (ix.height != cfg.model.image_size || ix.prompt_len != cfg.model.max_prompt_len)
    throw ConfigError("dataset geometry does not match the model configuration");
  std::vector<TrainExample> data;
  for (auto& s : load_all(ix)) data.push_back({std::move(s.image), std::move(s.caption)});

  Trainer trainer(Model{cfg.model, init_weights(cfg.model, cfg.init_seed), 0}, cfg.train, make_schedule());
  std::ostringstream loss_log;
  loss_log << std::setprecision(9);
  const auto parent = std::filesystem::path(out).parent_path();
  if (!parent.empty()) ensure_dir(parent.string());
  train(trainer, data, [&](const LossLogEntry& e) {
    loss_log << e.step << ' ' << e.loss << '\n';
    log << "step " << e.step << " loss " << e.loss << '\n';
    if (cfg.checkpoint_every > 0 && e.step % static_cast<std::uint64_t>(cfg.checkpoint_every) == 0 &&
        e.step < static_cast<std::uint64_t>(cfg.train.steps))
      save_checkpoint(out + ".step" + std::to_string(e.step), trainer.sampling_model());
  });
  save_checkpoint(out, trainer.sampling_model());
  io::write_text(out + ".loss", loss_log.str());
  log << "wrote " << out << '\n';
  return kExitOk;
}

std::string sample_basename(const RunConfig& cfg) {
  return std::string(method_name(cfg.guidance.method)) + "_seed" + std::to_string(cfg.sampler.seed) + "_a" +
         format_double(cfg.guidance.alpha) + "_l" + format_double(cfg.guidance.lambda);
}

int cmd_sample(const RunConfig& cfg, const std::string& checkpoint, const std::string& mask_file,
               const std::string& out_dir, std::ostream& log) {
  cfg.validate();
  const Model model = load_model_for(cfg, checkpoint);
  const MaskFile mf = read_mask_file(mask_file);
  ensure_dir(out_dir);
  const auto res = guided_sample(model, mf.prompt, mf.mask, mf.corr, cfg.sampler, cfg.guidance, make_schedule());
  const std::string base = out_dir + "/" + sample_basename(cfg);
  image_write(base + ".ppm", res.image);

  std::ostringstream trace;
  trace << std::setprecision(9);
  std::set<int> words;
  for (const auto& ws : mf.corr.words) words.insert(ws.begin(), ws.end());
  for (const auto& st : res.trace) {
    trace << st.step << ' ' << st.t << ' ';
    if (st.loss) trace << *st.loss; else trace << '-';
    trace << '\n';
    for (const auto& snap : st.attention)
      for (int w : words)
        attention_heatmap_export(snap, w,
                                 base + ".step" + std::to_string(st.step) + ".layer" + std::to_string(snap.layer) +
                                     ".word" + std::to_string(w) + ".ppm");
  }
  io::write_text(base + ".trace.txt", trace.str());
  log << "wrote " << base << ".ppm\n";
  return kExitOk;
}

std::vector<Scene> select_scenes(const std::string& dataset_dir, const EvalSelection& sel) {
  const auto ix = load_index(dataset_dir);
  const int end = sel.count < 0 ? ix.count : sel.first + sel.count;
  if (sel.first < 0 || end > ix.count || end <= sel.first)
    throw UsageError("sample range [" + std::to_string(sel.first) + "," + std::to_string(end) + ") outside dataset of " +
                     std::to_string(ix.count));
  auto all = load_all(ix);
  return std::vector<Scene>(all.begin() + sel.first, all.begin() + end);
}

MethodSpec method_spec(const std::string& method, const GuidanceConfig& base) {
  GuidanceConfig g = base;
  g.method = parse_method(method);
  return {method_name(g.method), g};
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& dataset_dir,
             const std::vector<std::string>& methods, const EvalSelection& sel, const std::string& out_dir,
             std::ostream& log) {
  cfg.validate();
  if (methods.empty()) throw UsageError("eval: no methods given");
  const Model model = load_model_for(cfg, checkpoint);
  const auto scenes = select_scenes(dataset_dir, sel);
  std::vector<MethodSpec> specs;
  for (const auto& m : methods) specs.push_back(method_spec(m, cfg.guidance));
  BenchmarkConfig bc{cfg.sampler, sel.seeds, resolve_jobs(cfg.jobs, scenes.size() * sel.seeds.size()), sel.first};
  const auto reports = benchmark_run(model, scenes, specs, bc, make_schedule());
  ensure_dir(out_dir);
  const std::string table = format_report_table(reports);
  io::write_text(out_dir + "/report.txt", table);
  io::write_text(out_dir + "/records.txt", format_report_records(reports));
  log << table;

  std::map<std::string, double> mean;
  for (const auto& r : reports) mean[r.method] = r.mean;
  const std::vector<std::string> order{"none", "swap", "guidance"};
  std::vector<std::string> present;
  for (const auto& m : order)
    if (mean.count(m)) present.push_back(m);
  bool ok = true;
  for (std::size_t i = 1; i < present.size(); ++i) ok = ok && mean[present[i]] > mean[present[i - 1]];
  if (mean.count("none") && mean.count("guidance")) ok = ok && mean["guidance"] - mean["none"] >= 0.10;
  if (!ok) {
    log << "method ordering guidance > swap > none (gap >= 0.10) does not hold\n";
    return kExitOrdering;
  }
  return kExitOk;
}

int cmd_ablate(const RunConfig& cfg, const std::string& checkpoint, const std::string& dataset_dir,
               const std::vector<double>& alphas, const std::vector<double>& lambdas, const EvalSelection& sel,
               const std::string& out_dir, std::ostream& log) {
  cfg.validate();
  if (alphas.empty() || lambdas.empty()) throw UsageError("ablate: empty alpha or lambda grid");
  const Model model = load_model_for(cfg, checkpoint);
  const auto scenes = select_scenes(dataset_dir, sel);
  std::vector<MethodSpec> specs;
  for (double a : alphas)
    for (double l : lambdas) {
      GuidanceConfig g = cfg.guidance;
      g.method = Method::guidance;
      g.alpha = a;
      g.lambda = l;
      specs.push_back({"guidance(alpha=" + format_double(a) + ",lambda=" + format_double(l) + ")", g});
    }
  BenchmarkConfig bc{cfg.sampler, sel.seeds, resolve_jobs(cfg.jobs, scenes.size() * sel.seeds.size()), sel.first};
  const auto reports = benchmark_run(model, scenes, specs, bc, make_schedule());

  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << std::setw(8) << "alpha";
  for (double l : lambdas) os << "  " << std::setw(12) << ("lambda=" + format_double(l));
  os << '\n';
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    os << std::setw(8) << format_double(alphas[i]);
    for (std::size_t j = 0; j < lambdas.size(); ++j) os << "  " << std::setw(12) << reports[i * lambdas.size() + j].mean;
    os << '\n';
  }
  ensure_dir(out_dir);
  io::write_text(out_dir + "/ablate.txt", os.str());
  io::write_text(out_dir + "/records.txt", format_report_records(reports));
  log << os.str();
  return kExitOk;
}

}  // namespace magd
