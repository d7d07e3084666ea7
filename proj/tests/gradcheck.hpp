#pragma once
// Central finite-difference oracle used by gradient tests. Independent of the tape:
// it only evaluates the scalar function.

#include <algorithm>
#include <cmath>
#include <functional>

#include "magd/tensor.hpp"

namespace magd::testing {

template <class T>
BasicTensor<T> finite_difference(const std::function<double(const BasicTensor<T>&)>& f, BasicTensor<T> x,
                                 double h = 1e-3) {
  BasicTensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = x[i];
    x[i] = static_cast<T>(orig + h);
    const double fp = f(x);
    x[i] = static_cast<T>(orig - h);
    const double fm = f(x);
    x[i] = orig;
    g[i] = static_cast<T>((fp - fm) / (2.0 * h));
  }
  return g;
}

struct GradCompare {
  double max_rel = 0.0;     // over entries with |g| > floor
  std::size_t checked = 0;  // entries compared
  std::size_t worst = 0;
};

// rel = |a - b| / max(|a|, |b|), evaluated where max(|a|, |b|) > floor.
template <class T>
GradCompare compare_gradients(const BasicTensor<T>& analytic, const BasicTensor<T>& numeric, double floor = 1e-6) {
  GradCompare r;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], b = numeric[i];
    const double m = std::max(std::abs(a), std::abs(b));
    if (m <= floor) continue;
    ++r.checked;
    const double rel = std::abs(a - b) / m;
    if (rel > r.max_rel) {
      r.max_rel = rel;
      r.worst = i;
    }
  }
  return r;
}

}  // namespace magd::testing
