#pragma once

#include <vector>

namespace magd {

struct Schedule {
  std::vector<double> beta;
  std::vector<double> alpha_bar;

  int steps() const { return static_cast<int>(beta.size()); }
  // alpha_bar(-1) == 1 denotes the clean sample.
  double ab(int t) const;
};

/// Linear beta schedule.
Schedule make_schedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);

}  // namespace magd
