#pragma once

// Differentiable operations on Tensor. Every op validates shapes, computes
// its forward value eagerly and, when recording, registers its adjoint.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "spotkit/tensor.hpp"

namespace spotkit::tensor {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;

inline CMapM cmat(const std::vector<double>& v, std::size_t offset, std::size_t rows, std::size_t cols) {
  return CMapM(v.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MapM mmat(std::vector<double>& v, std::size_t offset, std::size_t rows, std::size_t cols) {
  return MapM(v.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::shape,
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

}  // namespace detail

/// C = A·B for A (m×k) and B (k×n).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, ErrorKind::shape,
          "matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, ErrorKind::shape,
          "matmul: inner extents differ, " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  Tensor out(Shape{m, n});
  detail::mmat(out.impl()->value, 0, m, n).noalias() =
      detail::cmat(a.impl()->value, 0, m, k) * detail::cmat(b.impl()->value, 0, k, n);
  detail::attach(out, {&a, &b}, [a, b, m, k, n](TensorImpl& o) {
    auto dc = detail::cmat(o.grad, 0, m, n);
    if (auto* ga = detail::grad_sink(a))
      detail::mmat(*ga, 0, m, k).noalias() += dc * detail::cmat(b.impl()->value, 0, k, n).transpose();
    if (auto* gb = detail::grad_sink(b))
      detail::mmat(*gb, 0, k, n).noalias() += detail::cmat(a.impl()->value, 0, m, k).transpose() * dc;
  });
  return out;
}

/// Affine map over the last axis: x[..., in] · W[in × out] + bias[out].
/// `bias` may be an undefined Tensor.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor()) {
  require(x.rank() >= 1 && weight.rank() == 2, ErrorKind::shape, "linear: bad operand ranks");
  const std::size_t in = weight.dim(0), outd = weight.dim(1);
  require(x.shape().back() == in, ErrorKind::shape,
          "linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
  if (bias.defined())
    require(bias.size() == outd, ErrorKind::shape, "linear: bias length does not match output width");
  const std::size_t rows = x.size() / in;
  Shape shape = x.shape();
  shape.back() = outd;
  Tensor out(shape);
  auto y = detail::mmat(out.impl()->value, 0, rows, outd);
  y.noalias() = detail::cmat(x.impl()->value, 0, rows, in) * detail::cmat(weight.impl()->value, 0, in, outd);
  if (bias.defined()) y.rowwise() += detail::cmat(bias.impl()->value, 0, 1, outd).row(0);
  detail::attach(out, {&x, &weight, &bias}, [x, weight, bias, rows, in, outd](TensorImpl& o) {
    auto dy = detail::cmat(o.grad, 0, rows, outd);
    if (auto* gx = detail::grad_sink(x))
      detail::mmat(*gx, 0, rows, in).noalias() += dy * detail::cmat(weight.impl()->value, 0, in, outd).transpose();
    if (auto* gw = detail::grad_sink(weight))
      detail::mmat(*gw, 0, in, outd).noalias() += detail::cmat(x.impl()->value, 0, rows, in).transpose() * dy;
    if (bias.defined())
      if (auto* gb = detail::grad_sink(bias)) detail::mmat(*gb, 0, 1, outd) += dy.colwise().sum();
  });
  return out;
}

/// Batched product over the leading axis: a[G×m×k] · b[G×k×n], or
/// a · bᵀ when `transpose_b` (b is then G×n×k).
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0), ErrorKind::shape,
          "bmm: expects matching rank-3 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  require((transpose_b ? b.dim(2) : b.dim(1)) == k, ErrorKind::shape,
          "bmm: inner extents differ, " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  Tensor out(Shape{g, m, n});
  const auto& av = a.impl()->value;
  const auto& bv = b.impl()->value;
  auto& ov = out.impl()->value;
  for (std::size_t i = 0; i < g; ++i) {
    auto am = detail::cmat(av, i * m * k, m, k);
    if (transpose_b)
      detail::mmat(ov, i * m * n, m, n).noalias() = am * detail::cmat(bv, i * n * k, n, k).transpose();
    else
      detail::mmat(ov, i * m * n, m, n).noalias() = am * detail::cmat(bv, i * k * n, k, n);
  }
  detail::attach(out, {&a, &b}, [a, b, g, m, k, n, transpose_b](TensorImpl& o) {
    const auto& av = a.impl()->value;
    const auto& bv = b.impl()->value;
    auto* ga = detail::grad_sink(a);
    auto* gb = detail::grad_sink(b);
    for (std::size_t i = 0; i < g; ++i) {
      auto dc = detail::cmat(o.grad, i * m * n, m, n);
      if (transpose_b) {
        auto bm = detail::cmat(bv, i * n * k, n, k);
        if (ga) detail::mmat(*ga, i * m * k, m, k).noalias() += dc * bm;
        if (gb) detail::mmat(*gb, i * n * k, n, k).noalias() += dc.transpose() * detail::cmat(av, i * m * k, m, k);
      } else {
        auto bm = detail::cmat(bv, i * k * n, k, n);
        if (ga) detail::mmat(*ga, i * m * k, m, k).noalias() += dc * bm.transpose();
        if (gb) detail::mmat(*gb, i * k * n, k, n).noalias() += detail::cmat(av, i * m * k, m, k).transpose() * dc;
      }
    }
  });
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto& ov = out.impl()->value;
  const auto& av = a.impl()->value;
  const auto& bv = b.impl()->value;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  detail::attach(out, {&a, &b}, [a, b](TensorImpl& o) {
    for (const Tensor* t : {&a, &b})
      if (auto* g = detail::grad_sink(*t))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto& ov = out.impl()->value;
  const auto& av = a.impl()->value;
  const auto& bv = b.impl()->value;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  detail::attach(out, {&a, &b}, [a, b](TensorImpl& o) {
    const auto& av = a.impl()->value;
    const auto& bv = b.impl()->value;
    if (auto* g = detail::grad_sink(a))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * bv[i];
    if (auto* g = detail::grad_sink(b))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * av[i];
  });
  return out;
}

inline Tensor scale(const Tensor& x, double c) {
  Tensor out(x.shape());
  auto& ov = out.impl()->value;
  const auto& xv = x.impl()->value;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = c * xv[i];
  detail::attach(out, {&x}, [x, c](TensorImpl& o) {
    auto& g = *detail::grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * o.grad[i];
  });
  return out;
}

/// Same values, new shape with equal element count.
inline Tensor reshape(const Tensor& x, Shape shape) {
  require(numel(shape) == x.size(), ErrorKind::shape,
          "reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  Tensor out(std::move(shape), x.impl()->value);
  detail::attach(out, {&x}, [x](TensorImpl& o) {
    auto& g = *detail::grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
  return out;
}

/// out.shape[i] = x.shape[axes[i]].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  require(axes.size() == r, ErrorKind::shape, "permute: axis list length does not match rank");
  std::vector<bool> seen(r, false);
  for (auto a : axes) {
    require(a < r && !seen[a], ErrorKind::shape, "permute: axes must be a permutation");
    seen[a] = true;
  }
  Shape shape(r);
  for (std::size_t i = 0; i < r; ++i) shape[i] = x.dim(axes[i]);
  const auto in_strides = detail::strides_of(x.shape());
  // source offset for each output element
  std::vector<std::size_t> src(x.size());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[axes[i]];
    src[flat] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < shape[i]) break;
      idx[i] = 0;
    }
  }
  Tensor out(shape);
  auto& ov = out.impl()->value;
  const auto& xv = x.impl()->value;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[src[i]];
  detail::attach(out, {&x}, [x, src = std::move(src)](TensorImpl& o) {
    auto& g = *detail::grad_sink(x);
    for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += o.grad[i];
  });
  return out;
}

/// Numerically stable softmax along `axis` (max subtracted per slice).
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  require(axis < x.rank(), ErrorKind::shape, "softmax: axis out of range for " + shape_str(x.shape()));
  const std::size_t n = x.dim(axis);
  const std::size_t inner = detail::strides_of(x.shape())[axis];
  const std::size_t outer = x.size() / (n * inner);
  Tensor out(x.shape());
  const auto& xv = x.impl()->value;
  auto& ov = out.impl()->value;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        ov[base + j * inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < n; ++j) ov[base + j * inner] /= sum;
    }
  detail::attach(out, {&x}, [x, n, inner, outer](TensorImpl& o) {
    auto& g = *detail::grad_sink(x);
    for (std::size_t ob = 0; ob < outer; ++ob)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = ob * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += o.grad[base + j * inner] * o.value[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t p = base + j * inner;
          g[p] += o.value[p] * (o.grad[p] - dot);
        }
      }
  });
  return out;
}

/// tanh approximation of GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
inline Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  Tensor out(x.shape());
  const auto& xv = x.impl()->value;
  auto& ov = out.impl()->value;
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const double u = xv[i];
    ov[i] = 0.5 * u * (1.0 + std::tanh(c * (u + k * u * u * u)));
  }
  detail::attach(out, {&x}, [x](TensorImpl& o) {
    auto& g = *detail::grad_sink(x);
    const auto& xv = x.impl()->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double u = xv[i];
      const double t = std::tanh(c * (u + k * u * u * u));
      const double d = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * c * (1.0 + 3.0 * k * u * u);
      g[i] += o.grad[i] * d;
    }
  });
  return out;
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  const auto& xv = x.impl()->value;
  auto& ov = out.impl()->value;
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const double u = xv[i];
    // branch keeps exp() from overflowing for large |u|
    ov[i] = u >= 0 ? 1.0 / (1.0 + std::exp(-u)) : std::exp(u) / (1.0 + std::exp(u));
  }
  detail::attach(out, {&x}, [x](TensorImpl& o) {
    auto& g = *detail::grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * o.value[i] * (1.0 - o.value[i]);
  });
  return out;
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s);
  detail::attach(out, {&x}, [x](TensorImpl& o) {
    auto& g = *detail::grad_sink(x);
    for (double& v : g) v += o.grad[0];
  });
  return out;
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Rows of table[K × D] selected by `index`; result is [index.size() × D].
inline Tensor gather_rows(const Tensor& table, std::vector<std::size_t> index) {
  require(table.rank() == 2, ErrorKind::shape, "gather_rows: table must be rank 2");
  const std::size_t k = table.dim(0), d = table.dim(1);
  for (auto i : index) require(i < k, ErrorKind::shape, "gather_rows: index out of range");
  require(!index.empty(), ErrorKind::shape, "gather_rows: empty index");
  Tensor out(Shape{index.size(), d});
  auto& ov = out.impl()->value;
  const auto& tv = table.impl()->value;
  for (std::size_t r = 0; r < index.size(); ++r)
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(index[r] * d), d, ov.begin() + static_cast<std::ptrdiff_t>(r * d));
  detail::attach(out, {&table}, [table, index = std::move(index), d](TensorImpl& o) {
    auto& g = *detail::grad_sink(table);
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) g[index[r] * d + c] += o.grad[r * d + c];
  });
  return out;
}

/// Rows normalized to unit Euclidean length.
inline Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12) {
  require(x.rank() == 2, ErrorKind::shape, "l2_normalize_rows: expects rank 2");
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor out(x.shape());
  std::vector<double> norms(n);
  const auto& xv = x.impl()->value;
  auto& ov = out.impl()->value;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += xv[i * d + c] * xv[i * d + c];
    norms[i] = std::max(std::sqrt(s), eps);
    for (std::size_t c = 0; c < d; ++c) ov[i * d + c] = xv[i * d + c] / norms[i];
  }
  detail::attach(out, {&x}, [x, n, d, norms = std::move(norms)](TensorImpl& o) {
    auto& g = *detail::grad_sink(x);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += o.grad[i * d + c] * o.value[i * d + c];
      for (std::size_t c = 0; c < d; ++c)
        g[i * d + c] += (o.grad[i * d + c] - o.value[i * d + c] * dot) / norms[i];
    }
  });
  return out;
}

enum class NormMode { train, eval };

/// Running statistics owned by a batch-norm layer.
struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormStats(std::size_t channels = 0) : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

/// Normalizes each channel (last axis) over all leading positions.
///
/// Train mode uses the biased batch variance and folds the unbiased estimate
/// into the running variance; eval mode reads the running statistics only.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                         NormMode mode) {
  const std::size_t c = x.shape().back();
  require(gamma.size() == c && beta.size() == c && stats.running_mean.size() == c, ErrorKind::shape,
          "batch_norm: parameter width does not match channels of " + shape_str(x.shape()));
  const std::size_t rows = x.size() / c;
  const auto& xv = x.impl()->value;
  const auto& gv = gamma.impl()->value;
  const auto& bv = beta.impl()->value;
  std::vector<double> mean(c, 0.0), inv_std(c, 0.0);
  if (mode == NormMode::train) {
    require(x.dim(0) >= 2 && rows >= 2, ErrorKind::shape, "batch_norm: train mode needs a batch of at least 2");
    std::vector<double> var(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) mean[j] += xv[r * c + j];
    for (auto& m : mean) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const double dv = xv[r * c + j] - mean[j];
        var[j] += dv * dv;
      }
    for (std::size_t j = 0; j < c; ++j) {
      const double biased = var[j] / static_cast<double>(rows);
      const double unbiased = var[j] / static_cast<double>(rows - 1);
      inv_std[j] = 1.0 / std::sqrt(biased + stats.eps);
      stats.running_mean[j] = (1.0 - stats.momentum) * stats.running_mean[j] + stats.momentum * mean[j];
      stats.running_var[j] = (1.0 - stats.momentum) * stats.running_var[j] + stats.momentum * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mean[j] = stats.running_mean[j];
      inv_std[j] = 1.0 / std::sqrt(stats.running_var[j] + stats.eps);
    }
  }
  Tensor out(x.shape());
  auto& ov = out.impl()->value;
  std::vector<double> xhat(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t p = r * c + j;
      xhat[p] = (xv[p] - mean[j]) * inv_std[j];
      ov[p] = gv[j] * xhat[p] + bv[j];
    }
  detail::attach(out, {&x, &gamma, &beta},
                 [x, gamma, beta, mode, rows, c, inv_std = std::move(inv_std), xhat = std::move(xhat)](TensorImpl& o) {
                   const auto& gv = gamma.impl()->value;
                   if (auto* gg = detail::grad_sink(gamma))
                     for (std::size_t p = 0; p < o.grad.size(); ++p) (*gg)[p % c] += o.grad[p] * xhat[p];
                   if (auto* gb = detail::grad_sink(beta))
                     for (std::size_t p = 0; p < o.grad.size(); ++p) (*gb)[p % c] += o.grad[p];
                   auto* gx = detail::grad_sink(x);
                   if (!gx) return;
                   if (mode == NormMode::eval) {
                     for (std::size_t p = 0; p < o.grad.size(); ++p) (*gx)[p] += o.grad[p] * gv[p % c] * inv_std[p % c];
                     return;
                   }
                   std::vector<double> mean_d(c, 0.0), mean_dx(c, 0.0);
                   for (std::size_t p = 0; p < o.grad.size(); ++p) {
                     const double dxh = o.grad[p] * gv[p % c];
                     mean_d[p % c] += dxh;
                     mean_dx[p % c] += dxh * xhat[p];
                   }
                   for (std::size_t j = 0; j < c; ++j) {
                     mean_d[j] /= static_cast<double>(rows);
                     mean_dx[j] /= static_cast<double>(rows);
                   }
                   for (std::size_t p = 0; p < o.grad.size(); ++p) {
                     const std::size_t j = p % c;
                     (*gx)[p] += inv_std[j] * (o.grad[p] * gv[j] - mean_d[j] - xhat[p] * mean_dx[j]);
                   }
                 });
  return out;
}

/// Channel-wise max over groups of positions along `axis`. Output extent
/// along `axis` is groups.size(); the adjoint routes to the lowest-index
/// argmax of each group.
inline Tensor group_max(const Tensor& x, std::size_t axis, const std::vector<std::vector<std::size_t>>& groups) {
  require(axis < x.rank(), ErrorKind::shape, "group_max: axis out of range");
  require(!groups.empty(), ErrorKind::shape, "group_max: no groups");
  const std::size_t n = x.dim(axis);
  for (const auto& grp : groups) {
    require(!grp.empty(), ErrorKind::shape, "group_max: empty pooling group");
    for (auto m : grp) require(m < n, ErrorKind::shape, "group_max: member index out of range");
  }
  const std::size_t inner = detail::strides_of(x.shape())[axis];
  const std::size_t outer = x.size() / (n * inner);
  const std::size_t ng = groups.size();
  Shape shape = x.shape();
  shape[axis] = ng;
  Tensor out(shape);
  auto& ov = out.impl()->value;
  const auto& xv = x.impl()->value;
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t gi = 0; gi < ng; ++gi)
      for (std::size_t in = 0; in < inner; ++in) {
        std::size_t best = o * n * inner + groups[gi].front() * inner + in;
        for (auto m : groups[gi]) {
          const std::size_t p = o * n * inner + m * inner + in;
          if (xv[p] > xv[best] || (xv[p] == xv[best] && p < best)) best = p;
        }
        const std::size_t q = o * ng * inner + gi * inner + in;
        ov[q] = xv[best];
        argmax[q] = best;
      }
  detail::attach(out, {&x}, [x, argmax = std::move(argmax)](TensorImpl& o) {
    auto& g = *detail::grad_sink(x);
    for (std::size_t q = 0; q < argmax.size(); ++q) g[argmax[q]] += o.grad[q];
  });
  return out;
}

/// Strided convolution along axis 1 of x[B × T × S × D] with kernel 3,
/// stride 2, zero padding 1. kernel is [3·D × D_out] (tap-major rows),
/// bias is [D_out]. Output is [B × ⌈T/2⌉ × S × D_out].
inline Tensor temporal_conv(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  require(x.rank() == 4, ErrorKind::shape, "temporal_conv: expects [B,T,S,D], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), t = x.dim(1), s = x.dim(2), d = x.dim(3);
  require(kernel.rank() == 2 && kernel.dim(0) == 3 * d, ErrorKind::shape,
          "temporal_conv: kernel " + shape_str(kernel.shape()) + " does not match width " + std::to_string(d));
  const std::size_t dout = kernel.dim(1);
  require(bias.size() == dout, ErrorKind::shape, "temporal_conv: bias width mismatch");
  const std::size_t tout = (t + 1) / 2;
  const std::size_t rows = b * tout * s;
  // im2col: each output position gathers taps t'·2−1, t'·2, t'·2+1
  std::vector<double> cols(rows * 3 * d, 0.0);
  const auto& xv = x.impl()->value;
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t to = 0; to < tout; ++to)
      for (std::size_t si = 0; si < s; ++si) {
        const std::size_t r = (bi * tout + to) * s + si;
        for (std::size_t tap = 0; tap < 3; ++tap) {
          const long ti = static_cast<long>(2 * to + tap) - 1;
          if (ti < 0 || ti >= static_cast<long>(t)) continue;
          const std::size_t src = ((bi * t + static_cast<std::size_t>(ti)) * s + si) * d;
          std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(src), d,
                      cols.begin() + static_cast<std::ptrdiff_t>(r * 3 * d + tap * d));
        }
      }
  Tensor out(Shape{b, tout, s, dout});
  auto y = detail::mmat(out.impl()->value, 0, rows, dout);
  y.noalias() = detail::cmat(cols, 0, rows, 3 * d) * detail::cmat(kernel.impl()->value, 0, 3 * d, dout);
  y.rowwise() += detail::cmat(bias.impl()->value, 0, 1, dout).row(0);
  detail::attach(out, {&x, &kernel, &bias},
                 [x, kernel, bias, cols = std::move(cols), b, t, s, d, tout, dout, rows](TensorImpl& o) {
                   auto dy = detail::cmat(o.grad, 0, rows, dout);
                   if (auto* gk = detail::grad_sink(kernel))
                     detail::mmat(*gk, 0, 3 * d, dout).noalias() += detail::cmat(cols, 0, rows, 3 * d).transpose() * dy;
                   if (auto* gb = detail::grad_sink(bias)) detail::mmat(*gb, 0, 1, dout) += dy.colwise().sum();
                   auto* gx = detail::grad_sink(x);
                   if (!gx) return;
                   std::vector<double> dcols(rows * 3 * d);
                   detail::mmat(dcols, 0, rows, 3 * d).noalias() =
                       dy * detail::cmat(kernel.impl()->value, 0, 3 * d, dout).transpose();
                   for (std::size_t bi = 0; bi < b; ++bi)
                     for (std::size_t to = 0; to < tout; ++to)
                       for (std::size_t si = 0; si < s; ++si) {
                         const std::size_t r = (bi * tout + to) * s + si;
                         for (std::size_t tap = 0; tap < 3; ++tap) {
                           const long ti = static_cast<long>(2 * to + tap) - 1;
                           if (ti < 0 || ti >= static_cast<long>(t)) continue;
                           const std::size_t dst = ((bi * t + static_cast<std::size_t>(ti)) * s + si) * d;
                           for (std::size_t c = 0; c < d; ++c) (*gx)[dst + c] += dcols[r * 3 * d + tap * d + c];
                         }
                       }
                 });
  return out;
}

}  // namespace spotkit::tensor
