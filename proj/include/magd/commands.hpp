#pragma once
// Command implementations behind the magd tool. Each returns a process exit status.

#include <ostream>
#include <string>
#include <vector>

#include "magd/eval.hpp"
#include "magd/run_config.hpp"

namespace magd {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitOrdering = 3;  // eval finished but the method ordering did not hold

int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir, std::ostream& log);

/// Writes the checkpoint, `<out>.loss` (step loss per line) and `<out>.step<N>` every
/// checkpoint_every steps.
int cmd_train(const RunConfig& cfg, const std::string& dataset_dir, const std::string& out_checkpoint,
              std::ostream& log);

/// Output files are named <method>_seed<seed>_a<alpha>_l<lambda> plus .ppm, .trace.txt and
/// one heatmap per snapshot step, layer and target word.
int cmd_sample(const RunConfig& cfg, const std::string& checkpoint, const std::string& mask_file,
               const std::string& out_dir, std::ostream& log);
std::string sample_basename(const RunConfig& cfg);

struct EvalSelection {
  int first = 0;
  int count = -1;  // -1: to the end
  std::vector<std::uint64_t> seeds{0};
};

std::vector<Scene> select_scenes(const std::string& dataset_dir, const EvalSelection& sel);
MethodSpec method_spec(const std::string& method, const GuidanceConfig& base);

/// Writes report.txt and records.txt. Fails with kExitOrdering if present methods do not
/// order as guidance > swap > none.
int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& dataset_dir,
             const std::vector<std::string>& methods, const EvalSelection& sel, const std::string& out_dir,
             std::ostream& log);

/// Guidance grid over alpha x lambda; writes ablate.txt and records.txt.
int cmd_ablate(const RunConfig& cfg, const std::string& checkpoint, const std::string& dataset_dir,
               const std::vector<double>& alphas, const std::vector<double>& lambdas, const EvalSelection& sel,
               const std::string& out_dir, std::ostream& log);

int resolve_jobs(int jobs, std::size_t work_items);

}  // namespace magd
