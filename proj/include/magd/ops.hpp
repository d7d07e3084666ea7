#pragma once

#include <vector>

#include "magd/autodiff.hpp"

namespace magd::ad {

// Instantiated for float and double.

// Elementwise. Binary ops require identical shapes.
template <class T> BasicVar<T> add(BasicVar<T> a, BasicVar<T> b);
template <class T> BasicVar<T> sub(BasicVar<T> a, BasicVar<T> b);
template <class T> BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b);
template <class T> BasicVar<T> scale(BasicVar<T> x, T s);
template <class T> BasicVar<T> silu(BasicVar<T> x);

// x[r,c] + b[c] on every row.
template <class T> BasicVar<T> add_row_vector(BasicVar<T> x, BasicVar<T> b);
// x[c,...] + v[c] broadcast over all trailing positions.
template <class T> BasicVar<T> add_channel(BasicVar<T> x, BasicVar<T> v);

template <class T> BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b);
template <class T> BasicVar<T> transpose(BasicVar<T> x);
template <class T> BasicVar<T> reshape(BasicVar<T> x, Shape shape);

// Numerically stable softmax over the last dimension.
template <class T> BasicVar<T> softmax_last_dim(BasicVar<T> x);

// Same-padded cross-correlation: x[c_in,h,w], kernel[c_out,c_in,k,k] with odd k, bias[c_out].
template <class T> BasicVar<T> conv2d(BasicVar<T> x, BasicVar<T> kernel, BasicVar<T> bias);
// x[c,...]; statistics per group of c/groups channels, eps = 1e-5 under the square root.
template <class T> BasicVar<T> group_norm(BasicVar<T> x, int groups, BasicVar<T> gamma, BasicVar<T> beta);
template <class T> BasicVar<T> upsample2x(BasicVar<T> x);    // nearest
template <class T> BasicVar<T> downsample2x(BasicVar<T> x);  // 2x2 mean

template <class T> BasicVar<T> concat_channels(BasicVar<T> a, BasicVar<T> b);
template <class T> BasicVar<T> slice_cols(BasicVar<T> x, int begin, int end);
template <class T> BasicVar<T> concat_cols(const std::vector<BasicVar<T>>& parts);

// Columns with replace[c] == true are overwritten by the same columns of `values`; the
// overwritten entries are constants (no gradient flows through them).
template <class T>
BasicVar<T> replace_columns(BasicVar<T> x, const BasicTensor<T>& values, const std::vector<bool>& replace);
// x + bias where bias is a constant of the same shape.
template <class T> BasicVar<T> add_constant(BasicVar<T> x, const BasicTensor<T>& bias);

// Reductions to shape [1].
template <class T> BasicVar<T> sum(BasicVar<T> x);
template <class T> BasicVar<T> mean(BasicVar<T> x);
template <class T> BasicVar<T> weighted_sum(BasicVar<T> x, const BasicTensor<T>& weights);
template <class T> BasicVar<T> mse(BasicVar<T> a, BasicVar<T> b);

inline constexpr double kNormEps = 1e-5;

}  // namespace magd::ad
