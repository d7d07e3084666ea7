// magd: train, sample, evaluate and ablate the attention-guided toy diffusion model.

#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "magd/commands.hpp"
#include "magd/errors.hpp"

using namespace magd;

namespace {

// Adds --config plus one flag per RunConfig key; values apply on top of the file.
struct ConfigFlags {
  std::string path;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("--config", path, "key=value configuration file");
    for (const auto& k : RunConfig::keys()) {
      std::string flag = "--" + k;
      std::replace(flag.begin(), flag.end(), '_', '-');
      app->add_option_function<std::string>(
          flag, [this, k](const std::string& v) { values[k] = v; }, "override '" + k + "'");
    }
  }

  RunConfig build() const {
    RunConfig c = path.empty() ? RunConfig{} : load_run_config(path);
    for (const auto& [k, v] : values) c.set(k, v);
    c.validate();
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-guided toy diffusion: training, sampling and evaluation"};
  app.require_subcommand(1);
  int status = kExitOk;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic shapes dataset");
  ConfigFlags gen_flags;
  gen_flags.attach(gen);
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "Train the toy model");
  ConfigFlags tr_flags;
  tr_flags.attach(tr);
  std::string tr_data, tr_out;
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "output checkpoint")->required();

  auto* sm = app.add_subcommand("sample", "Sample one image under a mask layout");
  ConfigFlags sm_flags;
  sm_flags.attach(sm);
  std::string sm_ckpt, sm_mask, sm_out = ".";
  sm->add_option("--checkpoint", sm_ckpt)->required();
  sm->add_option("--mask", sm_mask, "mask/correspondence file")->required();
  sm->add_option("--out", sm_out, "output directory");

  EvalSelection sel;
  auto add_selection = [&](CLI::App* a) {
    a->add_option("--first", sel.first, "first dataset sample");
    a->add_option("--count", sel.count, "number of samples (-1: all)");
    a->add_option("--seeds", sel.seeds, "sampling seeds per sample")->delimiter(',');
  };

  auto* ev = app.add_subcommand("eval", "Benchmark control methods by mIoU");
  ConfigFlags ev_flags;
  ev_flags.attach(ev);
  std::string ev_ckpt, ev_data, ev_out = "eval_out";
  std::vector<std::string> ev_methods{"none", "swap", "paint_with_words", "guidance"};
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data, "held-out dataset directory")->required();
  ev->add_option("--methods", ev_methods)->delimiter(',');
  ev->add_option("--out", ev_out, "report directory");
  add_selection(ev);

  auto* ab = app.add_subcommand("ablate", "Sweep guidance alpha and lambda");
  ConfigFlags ab_flags;
  ab_flags.attach(ab);
  std::string ab_ckpt, ab_data, ab_out = "ablate_out";
  std::vector<double> alphas{0, 0.01, 0.04, 0.08, 0.16}, lambdas{0, 0.25, 0.5, 1.0};
  ab->add_option("--checkpoint", ab_ckpt)->required();
  ab->add_option("--data", ab_data)->required();
  ab->add_option("--alphas", alphas)->delimiter(',');
  ab->add_option("--lambdas", lambdas)->delimiter(',');
  ab->add_option("--out", ab_out, "report directory");
  add_selection(ab);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) status = cmd_gen_data(gen_flags.build(), gen_out, std::cout);
    if (tr->parsed()) status = cmd_train(tr_flags.build(), tr_data, tr_out, std::cout);
    if (sm->parsed()) status = cmd_sample(sm_flags.build(), sm_ckpt, sm_mask, sm_out, std::cout);
    if (ev->parsed()) status = cmd_eval(ev_flags.build(), ev_ckpt, ev_data, ev_methods, sel, ev_out, std::cout);
    if (ab->parsed()) status = cmd_ablate(ab_flags.build(), ab_ckpt, ab_data, alphas, lambdas, sel, ab_out, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "magd: " << e.what() << '\n';
    return kExitError;
  }
  return status;
}
