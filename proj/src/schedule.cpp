#include "magd/schedule.hpp"

#include <string>

#include "magd/errors.hpp"

namespace magd {

double Schedule::ab(int t) const {
  if (t == -1) return 1.0;
  if (t < 0 || t >= steps()) throw UsageError("timestep " + std::to_string(t) + " outside schedule");
  return alpha_bar[static_cast<std::size_t>(t)];
}

Schedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 2) throw ConfigError("schedule needs at least 2 steps");
  if (!(beta_start > 0 && beta_end < 1 && beta_start <= beta_end)) throw ConfigError("bad beta range");
  Schedule s;
  s.beta.resize(static_cast<std::size_t>(steps));
  s.alpha_bar.resize(static_cast<std::size_t>(steps));
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double b = beta_start + (beta_end - beta_start) * i / (steps - 1);
    prod *= 1.0 - b;
    s.beta[i] = b;
    s.alpha_bar[i] = prod;
  }
  return s;
}

}  // namespace magd
