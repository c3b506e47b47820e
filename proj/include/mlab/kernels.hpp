#pragma once

// Value-level kernels behind the differentiable ops in autodiff.hpp. Each
// kernel validates its operand shapes and throws ShapeError naming the op.

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "mlab/tensor.hpp"

namespace mlab::kernels {

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a,
                               const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(op, "shape " + to_string(a.shape()), b.shape());
  }
}

inline void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(op, "rank-" + std::to_string(rank) + " operand", t.shape());
  }
}

template <class F>
Tensor zip(const char* op, const Tensor& a, const Tensor& b, F f) {
  require_same_shape(op, a, b);
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(a[i]);
  return out;
}

// Channel dimension is axis 1; everything after it is "spatial".
inline std::size_t inner_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::zip("add", a, b, [](double x, double y) { return x + y; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::zip("sub", a, b, [](double x, double y) { return x - y; });
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  return detail::zip("hadamard", a, b, [](double x, double y) { return x * y; });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::map(a, [s](double x) { return x * s; });
}

inline Tensor relu(const Tensor& a) {
  return detail::map(a, [](double x) { return x > 0.0 ? x : 0.0; });
}

inline Tensor relu_mask(const Tensor& a) {
  return detail::map(a, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor reciprocal(const Tensor& a) {
  return detail::map(a, [](double x) { return 1.0 / x; });
}

/// op(A) * op(B) where op transposes when the matching flag is set.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a,
                     bool trans_b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::size_t k = trans_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw ShapeError("matmul",
                     "inner dimension " + std::to_string(k) + " on right operand",
                     b.shape());
  }
  const std::size_t lda = a.dim(1);
  const std::size_t ldb = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = trans_a ? a[p * lda + i] : a[i * lda + p];
      if (av == 0.0) continue;
      double* row = &out[i * n];
      if (!trans_b) {
        const double* brow = &b.data()[p * ldb];
        for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) row[j] += av * b[j * ldb + p];
      }
    }
  }
  return out;
}

namespace detail {

inline void require_conv_kernel(const char* op, const Tensor& w) {
  if (w.rank() != 4 || w.dim(2) != 3 || w.dim(3) != 3) {
    throw ShapeError(op, "[Co,Ci,3,3] kernel", w.shape());
  }
}

// Valid output rows h for kernel offset a: 0 <= h + a - 1 < size.
inline std::size_t lo(std::size_t a) { return a == 0 ? 1 : 0; }
inline std::size_t hi(std::size_t a, std::size_t size) {
  return a == 2 ? size - 1 : size;
}

}  // namespace detail

/// 3x3 cross-correlation, stride 1, zero padding 1. x: [N,Ci,H,W], w: [Co,Ci,3,3].
inline Tensor conv2d(const Tensor& x, const Tensor& w) {
  detail::require_rank("conv2d", x, 4);
  detail::require_conv_kernel("conv2d", w);
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("conv2d",
                     "input channels " + std::to_string(w.dim(1)) + " (NCHW)",
                     x.shape());
  }
  const std::size_t n_batch = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t co = w.dim(0);
  Tensor out = Tensor::zeros({n_batch, co, h, wd});
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t o = 0; o < co; ++o) {
      double* y = &out[(n * co + o) * h * wd];
      for (std::size_t i = 0; i < ci; ++i) {
        const double* xp = &x.data()[(n * ci + i) * h * wd];
        const double* k = &w.data()[(o * ci + i) * 9];
        for (std::size_t a = 0; a < 3; ++a) {
          for (std::size_t b = 0; b < 3; ++b) {
            const double kv = k[a * 3 + b];
            for (std::size_t r = detail::lo(a); r < detail::hi(a, h); ++r) {
              const double* xr = xp + (r + a - 1) * wd;
              double* yr = y + r * wd;
              for (std::size_t c = detail::lo(b); c < detail::hi(b, wd); ++c) {
                yr[c] += kv * xr[c + b - 1];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

/// Adjoint of conv2d with respect to its input: g [N,Co,H,W], w [Co,Ci,3,3] -> [N,Ci,H,W].
inline Tensor conv2d_input_grad(const Tensor& g, const Tensor& w) {
  detail::require_rank("conv2d_input_grad", g, 4);
  detail::require_conv_kernel("conv2d_input_grad", w);
  if (g.dim(1) != w.dim(0)) {
    throw ShapeError("conv2d_input_grad",
                     "output channels " + std::to_string(w.dim(0)), g.shape());
  }
  const std::size_t n_batch = g.dim(0), co = g.dim(1), h = g.dim(2), wd = g.dim(3);
  const std::size_t ci = w.dim(1);
  Tensor out = Tensor::zeros({n_batch, ci, h, wd});
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t o = 0; o < co; ++o) {
      const double* gp = &g.data()[(n * co + o) * h * wd];
      for (std::size_t i = 0; i < ci; ++i) {
        double* dx = &out[(n * ci + i) * h * wd];
        const double* k = &w.data()[(o * ci + i) * 9];
        for (std::size_t a = 0; a < 3; ++a) {
          for (std::size_t b = 0; b < 3; ++b) {
            const double kv = k[a * 3 + b];
            for (std::size_t r = detail::lo(a); r < detail::hi(a, h); ++r) {
              double* dr = dx + (r + a - 1) * wd;
              const double* gr = gp + r * wd;
              for (std::size_t c = detail::lo(b); c < detail::hi(b, wd); ++c) {
                dr[c + b - 1] += kv * gr[c];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

/// Adjoint of conv2d with respect to its kernel: x [N,Ci,H,W], g [N,Co,H,W] -> [Co,Ci,3,3].
inline Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g) {
  detail::require_rank("conv2d_weight_grad", x, 4);
  detail::require_rank("conv2d_weight_grad", g, 4);
  if (x.dim(0) != g.dim(0) || x.dim(2) != g.dim(2) || x.dim(3) != g.dim(3)) {
    throw ShapeError("conv2d_weight_grad",
                     "batch/spatial dims matching " + to_string(x.shape()),
                     g.shape());
  }
  const std::size_t n_batch = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t co = g.dim(1);
  Tensor out = Tensor::zeros({co, ci, 3, 3});
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t o = 0; o < co; ++o) {
      const double* gp = &g.data()[(n * co + o) * h * wd];
      for (std::size_t i = 0; i < ci; ++i) {
        const double* xp = &x.data()[(n * ci + i) * h * wd];
        double* k = &out[(o * ci + i) * 9];
        for (std::size_t a = 0; a < 3; ++a) {
          for (std::size_t b = 0; b < 3; ++b) {
            double acc = 0.0;
            for (std::size_t r = detail::lo(a); r < detail::hi(a, h); ++r) {
              const double* xr = xp + (r + a - 1) * wd;
              const double* gr = gp + r * wd;
              for (std::size_t c = detail::lo(b); c < detail::hi(b, wd); ++c) {
                acc += gr[c] * xr[c + b - 1];
              }
            }
            k[a * 3 + b] += acc;
          }
        }
      }
    }
  }
  return out;
}

/// Flat source index of each 2x2 window maximum; the lowest index wins ties.
inline std::vector<std::size_t> maxpool2x2_argmax(const Tensor& x) {
  detail::require_rank("maxpool2x2", x, 4);
  const std::size_t n_batch = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t oh = h / 2, ow = wd / 2;
  if (oh == 0 || ow == 0) {
    throw ShapeError("maxpool2x2", "spatial size >= 2x2", x.shape());
  }
  std::vector<std::size_t> idx;
  idx.reserve(n_batch * ch * oh * ow);
  for (std::size_t plane = 0; plane < n_batch * ch; ++plane) {
    const std::size_t base = plane * h * wd;
    for (std::size_t r = 0; r < oh; ++r) {
      for (std::size_t c = 0; c < ow; ++c) {
        std::size_t best = base + (2 * r) * wd + 2 * c;
        for (std::size_t dr = 0; dr < 2; ++dr) {
          for (std::size_t dc = 0; dc < 2; ++dc) {
            const std::size_t k = base + (2 * r + dr) * wd + 2 * c + dc;
            if (x[k] > x[best]) best = k;
          }
        }
        idx.push_back(best);
      }
    }
  }
  return idx;
}

inline Tensor gather(const Tensor& x, const std::vector<std::size_t>& idx,
                     const Shape& out_shape) {
  Tensor out = Tensor::zeros(out_shape);
  if (out.numel() != idx.size()) {
    throw ShapeError("gather", std::to_string(idx.size()) + " elements",
                     out_shape);
  }
  for (std::size_t j = 0; j < idx.size(); ++j) out[j] = x[idx[j]];
  return out;
}

inline Tensor scatter_add(const Tensor& g, const std::vector<std::size_t>& idx,
                          const Shape& out_shape) {
  if (g.numel() != idx.size()) {
    throw ShapeError("scatter", std::to_string(idx.size()) + " elements",
                     g.shape());
  }
  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t j = 0; j < idx.size(); ++j) out[idx[j]] += g[j];
  return out;
}

/// v [C] broadcast along axis 1 of `shape`.
inline Tensor channel_broadcast(const Tensor& v, const Shape& shape) {
  if (shape.size() < 2 || v.rank() != 1 || v.dim(0) != shape[1]) {
    throw ShapeError("channel_broadcast",
                     "[C] vector with C = axis 1 of " + to_string(shape),
                     v.shape());
  }
  Tensor out = Tensor::zeros(shape);
  const std::size_t ch = shape[1], inner = detail::inner_size(shape);
  for (std::size_t n = 0; n < shape[0]; ++n) {
    for (std::size_t c = 0; c < ch; ++c) {
      double* p = &out[(n * ch + c) * inner];
      std::fill(p, p + inner, v[c]);
    }
  }
  return out;
}

/// Sum over every axis except axis 1.
inline Tensor channel_sum(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("channel_sum", "rank >= 2", x.shape());
  const std::size_t ch = x.dim(1), inner = detail::inner_size(x.shape());
  Tensor out = Tensor::zeros({ch});
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    for (std::size_t c = 0; c < ch; ++c) {
      const double* p = &x.data()[(n * ch + c) * inner];
      double acc = 0.0;
      for (std::size_t k = 0; k < inner; ++k) acc += p[k];
      out[c] += acc;
    }
  }
  return out;
}

inline Tensor affine_norm(const Tensor& x, const Tensor& s, const Tensor& b) {
  if (x.rank() < 2) throw ShapeError("affine_norm", "rank >= 2", x.shape());
  const std::size_t ch = x.dim(1), inner = detail::inner_size(x.shape());
  if (s.shape() != Shape{ch} || b.shape() != Shape{ch}) {
    throw ShapeError("affine_norm", "scale/shift of shape [" + std::to_string(ch) + "]",
                     s.shape() != Shape{ch} ? s.shape() : b.shape());
  }
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    for (std::size_t c = 0; c < ch; ++c) {
      const std::size_t off = (n * ch + c) * inner;
      for (std::size_t k = 0; k < inner; ++k) {
        out[off + k] = x[off + k] * s[c] + b[c];
      }
    }
  }
  return out;
}

inline double sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return acc;
}

inline double dot(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("dot", a, b);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
  return acc;
}

/// Row-wise softmax of a [N,K] matrix.
inline Tensor softmax(const Tensor& z) {
  detail::require_rank("softmax", z, 2);
  const std::size_t rows = z.dim(0), k = z.dim(1);
  Tensor out = Tensor::zeros(z.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* zr = &z.data()[r * k];
    double* o = &out[r * k];
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, zr[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      o[j] = std::exp(zr[j] - m);
      total += o[j];
    }
    for (std::size_t j = 0; j < k; ++j) o[j] /= total;
  }
  return out;
}

/// Mean over rows of -log softmax(z)[label].
inline double softmax_cross_entropy(const Tensor& z,
                                    const std::vector<std::size_t>& labels) {
  detail::require_rank("softmax_cross_entropy", z, 2);
  const std::size_t rows = z.dim(0), k = z.dim(1);
  if (labels.size() != rows) {
    throw ShapeError("softmax_cross_entropy",
                     std::to_string(labels.size()) + " rows to match labels",
                     z.shape());
  }
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= k) {
      throw ShapeError("softmax_cross_entropy",
                       "label < " + std::to_string(k), z.shape());
    }
    const double* zr = &z.data()[r * k];
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, zr[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(zr[j] - m);
    loss += m + std::log(total) - zr[labels[r]];
  }
  return loss / static_cast<double>(rows);
}

inline Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t k) {
  Tensor out = Tensor::zeros({labels.size(), k});
  for (std::size_t r = 0; r < labels.size(); ++r) out[r * k + labels[r]] = 1.0;
  return out;
}

}  // namespace mlab::kernels
