#include "magd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "magd/errors.hpp"

namespace magd::ad {
namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
MatMap<T> as_mat(std::span<T> s, int rows, int cols) { return MatMap<T>(s.data(), rows, cols); }
template <class T>
ConstMatMap<T> as_mat(std::span<const T> s, int rows, int cols) { return ConstMatMap<T>(s.data(), rows, cols); }

template <class T>
void require_same(const BasicVar<T>& a, const BasicVar<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <class T>
void require_rank(const BasicVar<T>& x, int rank, const char* op) {
  if (x.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
  }
}

template <class T>
void accumulate(BasicTape<T>& t, int id, std::span<const T> g) {
  if (!t.requires_grad(id)) return;
  auto dst = t.grad_buffer(id);
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

template <class T>
T sigmoid(T x) { return T(1) / (T(1) + std::exp(-x)); }

// col[(ci*k + ky)*k + kx, y*w + x] = in[ci, y+ky-r, x+kx-r] (zero outside).
template <class T>
void im2col(std::span<const T> in, int c, int h, int w, int k, std::vector<T>& col) {
  const int r = k / 2;
  const int hw = h * w;
  col.assign(static_cast<std::size_t>(c) * k * k * hw, T(0.0));
  for (int ci = 0; ci < c; ++ci) {
    const T* src = in.data() + static_cast<std::size_t>(ci) * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col.data() + static_cast<std::size_t>((ci * k + ky) * k + kx) * hw;
        const int dy = ky - r, dx = kx - r;
        for (int y = std::max(0, -dy); y < std::min(h, h - dy); ++y) {
          const T* s = src + (y + dy) * w;
          T* d = dst + y * w;
          for (int x = std::max(0, -dx); x < std::min(w, w - dx); ++x) d[x] = s[x + dx];
        }
      }
    }
  }
}

template <class T>
void col2im_add(const std::vector<T>& col, int c, int h, int w, int k, std::span<T> out) {
  const int r = k / 2;
  const int hw = h * w;
  for (int ci = 0; ci < c; ++ci) {
    T* dst = out.data() + static_cast<std::size_t>(ci) * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col.data() + static_cast<std::size_t>((ci * k + ky) * k + kx) * hw;
        const int dy = ky - r, dx = kx - r;
        for (int y = std::max(0, -dy); y < std::min(h, h - dy); ++y) {
          T* d = dst + (y + dy) * w;
          const T* s = src + y * w;
          for (int x = std::max(0, -dx); x < std::min(w, w - dx); ++x) d[x + dx] += s[x];
        }
      }
    }
  }
}

}  // namespace

template <class T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b) {
  require_same(a, b, "add");
  BasicTensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](BasicTape<T>& t, int self) {
    accumulate(t, ia, t.out_grad(self));
    accumulate(t, ib, t.out_grad(self));
  });
}

template <class T>
BasicVar<T> sub(BasicVar<T> a, BasicVar<T> b) {
  require_same(a, b, "sub");
  BasicTensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](BasicTape<T>& t, int self) {
    accumulate(t, ia, t.out_grad(self));
    if (t.requires_grad(ib)) {
      auto g = t.out_grad(self);
      auto d = t.grad_buffer(ib);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
    }
  });
}

template <class T>
BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b) {
  require_same(a, b, "mul");
  BasicTensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](BasicTape<T>& t, int self) {
    auto g = t.out_grad(self);
    if (t.requires_grad(ia)) {
      auto d = t.grad_buffer(ia);
      const auto& bv = t.value(ib);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad_buffer(ib);
      const auto& av = t.value(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

template <class T>
BasicVar<T> scale(BasicVar<T> x, T s) {
  BasicTensor<T> out = x.value();
  for (T& v : out.data()) v *= s;
  const int ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, s](BasicTape<T>& t, int self) {
    auto g = t.out_grad(self);
    auto d = t.grad_buffer(ix);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * g[i];
  });
}

template <class T>
BasicVar<T> silu(BasicVar<T> x) {
  BasicTensor<T> out = x.value();
  for (T& v : out.data()) v = v * sigmoid(v);
  const int ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix](BasicTape<T>& t, int self) {
    auto g = t.out_grad(self);
    auto d = t.grad_buffer(ix);
    const auto& xv = t.value(ix);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const T s = sigmoid(xv[i]);
      d[i] += g[i] * s * (T(1.0) + xv[i] * (T(1.0) - s));
    }
  });
}

template <class T>
BasicVar<T> add_row_vector(BasicVar<T> x, BasicVar<T> b) {
  require_rank(x, 2, "add_row_vector");
  const int rows = x.value().dim(0), cols = x.value().dim(1);
  if (b.value().size() != static_cast<std::size_t>(cols)) {
    throw DimensionError("add_row_vector: " + shape_str(x.shape()) + " with bias " + shape_str(b.shape()));
  }
  BasicTensor<T> out = x.value();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(r) * cols + c] += b.value()[static_cast<std::size_t>(c)];
  const int ix = x.id(), ib = b.id();
  return x.tape()->record(std::move(out), {x, b}, [ix, ib, rows, cols](BasicTape<T>& t, int self) {
    auto g = t.out_grad(self);
    accumulate(t, ix, g);
    if (t.requires_grad(ib)) {
      auto d = t.grad_buffer(ib);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) d[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r) * cols + c];
    }
  });
}

template <class T>
BasicVar<T> add_channel(BasicVar<T> x, BasicVar<T> v) {
  const int c = x.value().dim(0);
  if (v.value().size() != static_cast<std::size_t>(c)) {
    throw DimensionError("add_channel: " + shape_str(x.shape()) + " with " + shape_str(v.shape()));
  }
  const std::size_t inner = x.value().size() / static_cast<std::size_t>(c);
  BasicTensor<T> out = x.value();
  for (int ci = 0; ci < c; ++ci)
    for (std::size_t j = 0; j < inner; ++j) out[ci * inner + j] += v.value()[static_cast<std::size_t>(ci)];
  const int ix = x.id(), iv = v.id();
  return x.tape()->record(std::move(out), {x, v}, [ix, iv, c, inner](BasicTape<T>& t, int self) {
    auto g = t.out_grad(self);
    accumulate(t, ix, g);
    if (t.requires_grad(iv)) {
      auto d = t.grad_buffer(iv);
      for (int ci = 0; ci < c; ++ci) {
        double s = 0.0;
        for (std::size_t j = 0; j < inner; ++j) s += g[ci * inner + j];
        d[static_cast<std::size_t>(ci)] += static_cast<T>(s);
      }
    }
  });
}

template <class T>
BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  if (b.value().dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  BasicTensor<T> out({m, n});
  as_mat(out.data(), m, n).noalias() = as_mat(a.value().data(), m, k) * as_mat(b.value().data(), k, n);
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib, m, k, n](BasicTape<T>& t, int self) {
    auto g = as_mat(t.out_grad(self), m, n);
    if (t.requires_grad(ia)) {
      as_mat(t.grad_buffer(ia), m, k).noalias() += g * as_mat(t.value(ib).data(), k, n).transpose();
    }
    if (t.requires_grad(ib)) {
      as_mat(t.grad_buffer(ib), k, n).noalias() += as_mat(t.value(ia).data(), m, k).transpose() * g;
    }
  });
}

template <class T>
BasicVar<T> transpose(BasicVar<T> x) {
  require_rank(x, 2, "transpose");
  const int r = x.value().dim(0), c = x.value().dim(1);
  BasicTensor<T> out({c, r});
  as_mat(out.data(), c, r) = as_mat(x.value().data(), r, c).transpose();
  const int ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, r, c](BasicTape<T>& t, int self) {
    as_mat(t.grad_buffer(ix), r, c) += as_mat(t.out_grad(self), c, r).transpose();
  });
}

template <class T>
BasicVar<T> reshape(BasicVar<T> x, Shape shape) {
  BasicTensor<T> out = x.value().reshaped(std::move(shape));
  const int ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix](BasicTape<T>& t, int self) { accumulate(t, ix, t.out_grad(self)); });
}

template <class T>
BasicVar<T> softmax_last_dim(BasicVar<T> x) {
  const int n = x.value().dim(-1);
  const std::size_t rows = x.value().size() / static_cast<std::size_t>(n);
  BasicTensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data().data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T s = T(0.0);
    for (int j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    const T inv = T(1.0) / s;
    for (int j = 0; j < n; ++j) row[j] *= inv;
  }
  const int ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, n, rows](BasicTape<T>& t, int self) {
    auto g = t.out_grad(self);
    const auto& y = t.value(self);
    auto d = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * n;
      T dot = T(0.0);
      for (int j = 0; j < n; ++j) dot += g[o + j] * y[o + j];
      for (int j = 0; j < n; ++j) d[o + j] += y[o + j] * (g[o + j] - dot);
    }
  });
}

template <class T>
BasicVar<T> conv2d(BasicVar<T> x, BasicVar<T> kernel, BasicVar<T> bias) {
  require_rank(x, 3, "conv2d");
  require_rank(kernel, 4, "conv2d");
  const int cin = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  const int cout = kernel.value().dim(0), k = kernel.value().dim(2);
  if (kernel.value().dim(1) != cin) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs kernel " + shape_str(kernel.shape()));
  }
  if (kernel.value().dim(3) != k || k % 2 == 0) {
    throw DimensionError("conv2d: kernel must be square with odd size, got " + shape_str(kernel.shape()));
  }
  if (bias.value().size() != static_cast<std::size_t>(cout)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) + " outputs");
  }
  const int hw = h * w, kk = cin * k * k;
  std::vector<T> col;
  im2col(x.value().data(), cin, h, w, k, col);
  BasicTensor<T> out({cout, h, w});
  auto y = as_mat(out.data(), cout, hw);
  y.noalias() = as_mat(kernel.value().data(), cout, kk) * ConstMatMap<T>(col.data(), kk, hw);
  for (int co = 0; co < cout; ++co) y.row(co).array() += bias.value()[static_cast<std::size_t>(co)];

  const int ix = x.id(), ik = kernel.id(), ib = bias.id();
  return x.tape()->record(
      std::move(out), {x, kernel, bias},
      [ix, ik, ib, cin, cout, h, w, k, hw, kk, col = std::move(col)](BasicTape<T>& t, int self) {
        auto g = as_mat(t.out_grad(self), cout, hw);
        if (t.requires_grad(ik)) {
          as_mat(t.grad_buffer(ik), cout, kk).noalias() += g * ConstMatMap<T>(col.data(), kk, hw).transpose();
        }
        if (t.requires_grad(ib)) {
          auto d = t.grad_buffer(ib);
          for (int co = 0; co < cout; ++co) {
            double s = 0.0;
            for (int j = 0; j < hw; ++j) s += static_cast<double>(g(co, j));
            d[static_cast<std::size_t>(co)] += static_cast<T>(s);
          }
        }
        if (t.requires_grad(ix)) {
          std::vector<T> dcol(static_cast<std::size_t>(kk) * hw);
          MatMap<T>(dcol.data(), kk, hw).noalias() = as_mat(t.value(ik).data(), cout, kk).transpose() * g;
          col2im_add(dcol, cin, h, w, k, t.grad_buffer(ix));
        }
      });
}

template <class T>
BasicVar<T> group_norm(BasicVar<T> x, int groups, BasicVar<T> gamma, BasicVar<T> beta) {
  const int c = x.value().dim(0);
  if (groups <= 0 || c % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  if (gamma.value().size() != static_cast<std::size_t>(c) || beta.value().size() != static_cast<std::size_t>(c)) {
    throw DimensionError("group_norm: affine parameters must have " + std::to_string(c) + " entries");
  }
  const std::size_t inner = x.value().size() / static_cast<std::size_t>(c);
  const int cpg = c / groups;
  const std::size_t n = inner * static_cast<std::size_t>(cpg);
  const auto& xv = x.value();
  BasicTensor<T> xhat(xv.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(groups));
  for (int g = 0; g < groups; ++g) {
    const std::size_t o = static_cast<std::size_t>(g) * n;
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += xv[o + i];
    m /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = xv[o + i] - m;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const T is = static_cast<T>(1.0 / std::sqrt(var + kNormEps));
    inv_std[static_cast<std::size_t>(g)] = is;
    for (std::size_t i = 0; i < n; ++i) xhat[o + i] = static_cast<T>(xv[o + i] - m) * is;
  }
  BasicTensor<T> out(xv.shape());
  for (int ci = 0; ci < c; ++ci) {
    const T ga = gamma.value()[static_cast<std::size_t>(ci)], be = beta.value()[static_cast<std::size_t>(ci)];
    for (std::size_t j = 0; j < inner; ++j) out[ci * inner + j] = ga * xhat[ci * inner + j] + be;
  }
  const int ix = x.id(), igm = gamma.id(), ibt = beta.id();
  return x.tape()->record(
      std::move(out), {x, gamma, beta},
      [ix, igm, ibt, c, groups, cpg, inner, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](BasicTape<T>& t, int self) {
        auto g = t.out_grad(self);
        const auto& ga = t.value(igm);
        if (t.requires_grad(igm) || t.requires_grad(ibt)) {
          for (int ci = 0; ci < c; ++ci) {
            double sg = 0.0, sgx = 0.0;
            for (std::size_t j = 0; j < inner; ++j) {
              sg += g[ci * inner + j];
              sgx += g[ci * inner + j] * xhat[ci * inner + j];
            }
            if (t.requires_grad(igm)) t.grad_buffer(igm)[static_cast<std::size_t>(ci)] += static_cast<T>(sgx);
            if (t.requires_grad(ibt)) t.grad_buffer(ibt)[static_cast<std::size_t>(ci)] += static_cast<T>(sg);
          }
        }
        if (!t.requires_grad(ix)) return;
        auto d = t.grad_buffer(ix);
        std::vector<T> dxhat(n);
        for (int gr = 0; gr < groups; ++gr) {
          const std::size_t o = static_cast<std::size_t>(gr) * n;
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            const int ci = gr * cpg + static_cast<int>(i / inner);
            dxhat[i] = g[o + i] * ga[static_cast<std::size_t>(ci)];
            m1 += dxhat[i];
            m2 += dxhat[i] * xhat[o + i];
          }
          m1 /= static_cast<double>(n);
          m2 /= static_cast<double>(n);
          const T is = inv_std[static_cast<std::size_t>(gr)];
          for (std::size_t i = 0; i < n; ++i) {
            d[o + i] += is * static_cast<T>(dxhat[i] - m1 - xhat[o + i] * m2);
          }
        }
      });
}

template <class T>
BasicVar<T> upsample2x(BasicVar<T> x) {
  require_rank(x, 3, "upsample2x");
  const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  BasicTensor<T> out({c, 2 * h, 2 * w});
  const auto& xv = x.value();
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out[(static_cast<std::size_t>(ci) * 2 * h + y) * 2 * w + xx] = xv[(static_cast<std::size_t>(ci) * h + y / 2) * w + xx / 2];
  const int ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, c, h, w](BasicTape<T>& t, int self) {
    auto g = t.out_grad(self);
    auto d = t.grad_buffer(ix);
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
          d[(static_cast<std::size_t>(ci) * h + y / 2) * w + xx / 2] += g[(static_cast<std::size_t>(ci) * 2 * h + y) * 2 * w + xx];
  });
}

template <class T>
BasicVar<T> downsample2x(BasicVar<T> x) {
  require_rank(x, 3, "downsample2x");
  const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  if (h % 2 || w % 2) throw DimensionError("downsample2x: odd spatial size " + shape_str(x.shape()));
  const int oh = h / 2, ow = w / 2;
  BasicTensor<T> out({c, oh, ow});
  const auto& xv = x.value();
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        const std::size_t b = (static_cast<std::size_t>(ci) * h + 2 * y) * w + 2 * xx;
        out[(static_cast<std::size_t>(ci) * oh + y) * ow + xx] = T(0.25) * (xv[b] + xv[b + 1] + xv[b + w] + xv[b + w + 1]);
      }
  const int ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, c, h, w, oh, ow](BasicTape<T>& t, int self) {
    auto g = t.out_grad(self);
    auto d = t.grad_buffer(ix);
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          const T q = T(0.25) * g[(static_cast<std::size_t>(ci) * oh + y) * ow + xx];
          const std::size_t b = (static_cast<std::size_t>(ci) * h + 2 * y) * w + 2 * xx;
          d[b] += q;
          d[b + 1] += q;
          d[b + w] += q;
          d[b + w + 1] += q;
        }
  });
}

template <class T>
BasicVar<T> concat_channels(BasicVar<T> a, BasicVar<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1)) {
    throw DimensionError("concat_channels: " + shape_str(sa) + " vs " + shape_str(sb));
  }
  Shape so = sa;
  so[0] += sb[0];
  std::vector<T> data(a.value().vec());
  data.insert(data.end(), b.value().vec().begin(), b.value().vec().end());
  const std::size_t na = a.value().size();
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(BasicTensor<T>(so, std::move(data)), {a, b}, [ia, ib, na](BasicTape<T>& t, int self) {
    auto g = t.out_grad(self);
    accumulate(t, ia, g.subspan(0, na));
    accumulate(t, ib, g.subspan(na));
  });
}

template <class T>
BasicVar<T> slice_cols(BasicVar<T> x, int begin, int end) {
  require_rank(x, 2, "slice_cols");
  const int rows = x.value().dim(0), cols = x.value().dim(1);
  if (begin < 0 || end > cols || begin >= end) throw UsageError("slice_cols: bad range for " + shape_str(x.shape()));
  const int wdt = end - begin;
  BasicTensor<T> out({rows, wdt});
  as_mat(out.data(), rows, wdt) = as_mat(x.value().data(), rows, cols).middleCols(begin, wdt);
  const int ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, rows, cols, begin, wdt](BasicTape<T>& t, int self) {
    as_mat(t.grad_buffer(ix), rows, cols).middleCols(begin, wdt) += as_mat(t.out_grad(self), rows, wdt);
  });
}

template <class T>
BasicVar<T> concat_cols(const std::vector<BasicVar<T>>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  if (parts.size() == 1) return parts.front();
  require_rank(parts.front(), 2, "concat_cols");
  const int rows = parts.front().value().dim(0);
  int cols = 0;
  for (const BasicVar<T>& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.value().dim(0) != rows) throw DimensionError("concat_cols: row count mismatch");
    cols += p.value().dim(1);
  }
  BasicTensor<T> out({rows, cols});
  std::vector<int> ids, widths;
  int off = 0;
  for (const BasicVar<T>& p : parts) {
    const int pw = p.value().dim(1);
    as_mat(out.data(), rows, cols).middleCols(off, pw) = as_mat(p.value().data(), rows, pw);
    off += pw;
    ids.push_back(p.id());
    widths.push_back(pw);
  }
  return parts.front().tape()->record(std::move(out), std::span<const BasicVar<T>>(parts), [ids, widths, rows, cols](BasicTape<T>& t, int self) {
    int o = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.requires_grad(ids[i])) {
        as_mat(t.grad_buffer(ids[i]), rows, widths[i]) += as_mat(t.out_grad(self), rows, cols).middleCols(o, widths[i]);
      }
      o += widths[i];
    }
  });
}

template <class T>
BasicVar<T> replace_columns(BasicVar<T> x, const BasicTensor<T>& values, const std::vector<bool>& replace) {
  require_rank(x, 2, "replace_columns");
  const int rows = x.value().dim(0), cols = x.value().dim(1);
  if (values.shape() != x.shape() || replace.size() != static_cast<std::size_t>(cols)) {
    throw DimensionError("replace_columns: " + shape_str(x.shape()) + " with values " + shape_str(values.shape()));
  }
  BasicTensor<T> out = x.value();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      if (replace[static_cast<std::size_t>(c)]) out[static_cast<std::size_t>(r) * cols + c] = values[static_cast<std::size_t>(r) * cols + c];
  const int ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, rows, cols, replace](BasicTape<T>& t, int self) {
    auto g = t.out_grad(self);
    auto d = t.grad_buffer(ix);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        if (!replace[static_cast<std::size_t>(c)]) d[static_cast<std::size_t>(r) * cols + c] += g[static_cast<std::size_t>(r) * cols + c];
  });
}

template <class T>
BasicVar<T> sum(BasicVar<T> x) {
  double s = 0.0;
  for (T v : x.value().data()) s += v;
  const int ix = x.id();
  return x.tape()->record(BasicTensor<T>::scalar(static_cast<T>(s)), {x}, [ix](BasicTape<T>& t, int self) {
    const T g = t.out_grad(self)[0];
    for (T& d : t.grad_buffer(ix)) d += g;
  });
}

template <class T>
BasicVar<T> mean(BasicVar<T> x) { return scale(sum(x), T(1.0) / static_cast<T>(x.value().size())); }

template <class T>
BasicVar<T> weighted_sum(BasicVar<T> x, const BasicTensor<T>& weights) {
  if (weights.size() != x.value().size()) {
    throw DimensionError("weighted_sum: " + shape_str(x.shape()) + " with weights " + shape_str(weights.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += static_cast<double>(x.value()[i]) * weights[i];
  const int ix = x.id();
  return x.tape()->record(BasicTensor<T>::scalar(static_cast<T>(s)), {x}, [ix, weights](BasicTape<T>& t, int self) {
    const T g = t.out_grad(self)[0];
    auto d = t.grad_buffer(ix);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * weights[i];
  });
}

template <class T>
BasicVar<T> mse(BasicVar<T> a, BasicVar<T> b) {
  BasicVar<T> d = sub(a, b);
  return mean(mul(d, d));
}

template <class T>
BasicVar<T> add_constant(BasicVar<T> x, const BasicTensor<T>& bias) {
  if (bias.shape() != x.shape()) {
    throw DimensionError("add_constant: " + shape_str(x.shape()) + " with " + shape_str(bias.shape()));
  }
  BasicTensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[i];
  const int ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix](BasicTape<T>& t, int self) { accumulate(t, ix, t.out_grad(self)); });
}

#define MAGD_INSTANTIATE_OPS(T)                                                                        \
  template BasicVar<T> add(BasicVar<T>, BasicVar<T>);                                                  \
  template BasicVar<T> sub(BasicVar<T>, BasicVar<T>);                                                  \
  template BasicVar<T> mul(BasicVar<T>, BasicVar<T>);                                                  \
  template BasicVar<T> scale(BasicVar<T>, T);                                                          \
  template BasicVar<T> silu(BasicVar<T>);                                                              \
  template BasicVar<T> add_row_vector(BasicVar<T>, BasicVar<T>);                                       \
  template BasicVar<T> add_channel(BasicVar<T>, BasicVar<T>);                                          \
  template BasicVar<T> matmul(BasicVar<T>, BasicVar<T>);                                               \
  template BasicVar<T> transpose(BasicVar<T>);                                                         \
  template BasicVar<T> reshape(BasicVar<T>, Shape);                                                    \
  template BasicVar<T> softmax_last_dim(BasicVar<T>);                                                  \
  template BasicVar<T> conv2d(BasicVar<T>, BasicVar<T>, BasicVar<T>);                                  \
  template BasicVar<T> group_norm(BasicVar<T>, int, BasicVar<T>, BasicVar<T>);                         \
  template BasicVar<T> upsample2x(BasicVar<T>);                                                        \
  template BasicVar<T> downsample2x(BasicVar<T>);                                                      \
  template BasicVar<T> concat_channels(BasicVar<T>, BasicVar<T>);                                      \
  template BasicVar<T> slice_cols(BasicVar<T>, int, int);                                              \
  template BasicVar<T> concat_cols(const std::vector<BasicVar<T>>&);                                   \
  template BasicVar<T> replace_columns(BasicVar<T>, const BasicTensor<T>&, const std::vector<bool>&);  \
  template BasicVar<T> add_constant(BasicVar<T>, const BasicTensor<T>&);                               \
  template BasicVar<T> sum(BasicVar<T>);                                                               \
  template BasicVar<T> mean(BasicVar<T>);                                                              \
  template BasicVar<T> weighted_sum(BasicVar<T>, const BasicTensor<T>&);                               \
  template BasicVar<T> mse(BasicVar<T>, BasicVar<T>);

MAGD_INSTANTIATE_OPS(float)
MAGD_INSTANTIATE_OPS(double)

}  // namespace magd::ad
