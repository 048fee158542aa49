#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dispatcher/kernels.hpp"
#include "dispatcher/tensor.hpp"

// Differentiable operations on Tensor. Each op computes its value eagerly and,
// when gradients are being recorded, registers a closure holding exactly the
// values its backward rule reads.
namespace dispatcher {

namespace detail {

using SharedBuffer = std::shared_ptr<Buffer>;

// `small` must equal `big` or a suffix of it; returns how many times `small`
// repeats inside `big`.
inline std::size_t suffix_repeats(const Shape& big, const Shape& small, const char* op) {
  if (small.size() > big.size() ||
      !std::equal(small.rbegin(), small.rend(), big.rbegin())) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(small) + " onto " +
                         to_string(big));
  }
  return numel(big) / numel(small);
}

inline void require_rank_at_least(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() < rank) {
    throw DimensionError(std::string(op) + ": expected rank >= " + std::to_string(rank) +
                         ", got shape " + to_string(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

// a + b where b's shape equals a's or a trailing part of it (or vice versa).
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool swap = b.rank() > a.rank();
  const Tensor& big = swap ? b : a;
  const Tensor& small = swap ? a : b;
  const std::size_t reps = detail::suffix_repeats(big.shape(), small.shape(), "add");
  const std::size_t inner = small.size();
  Buffer out(big.data().begin(), big.data().end());
  auto s = small.data();
  for (std::size_t r = 0; r < reps; ++r) {
    double* o = out.data() + r * inner;
    for (std::size_t i = 0; i < inner; ++i) o[i] += s[i];
  }
  const std::size_t big_index = swap ? 1 : 0;
  return Tensor::from_op(big.shape(), std::move(out), "add", {&a, &b},
                         [reps, inner, big_index](std::span<const double> g,
                                                  detail::GradSpans& gin) {
                           std::span<double> gbig = gin[big_index];
                           std::span<double> gsmall = gin[1 - big_index];
                           if (!gbig.empty()) {
                             for (std::size_t i = 0; i < g.size(); ++i) gbig[i] += g[i];
                           }
                           if (!gsmall.empty()) {
                             for (std::size_t r = 0; r < reps; ++r) {
                               const double* gr = g.data() + r * inner;
                               for (std::size_t i = 0; i < inner; ++i) gsmall[i] += gr[i];
                             }
                           }
                         });
}

// Elementwise product with the same broadcasting rule as add.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  const bool swap = b.rank() > a.rank();
  const Tensor& big = swap ? b : a;
  const Tensor& small = swap ? a : b;
  const std::size_t reps = detail::suffix_repeats(big.shape(), small.shape(), "mul");
  const std::size_t inner = small.size();
  Buffer out(big.size());
  auto bd = big.data();
  auto sd = small.data();
  for (std::size_t r = 0; r < reps; ++r) {
    for (std::size_t i = 0; i < inner; ++i) out[r * inner + i] = bd[r * inner + i] * sd[i];
  }
  const std::size_t big_index = swap ? 1 : 0;
  return Tensor::from_op(
      big.shape(), std::move(out), "mul", {&a, &b},
      [reps, inner, big_index, bs = big.storage(), ss = small.storage()](
          std::span<const double> g, detail::GradSpans& gin) {
        std::span<double> gbig = gin[big_index];
        std::span<double> gsmall = gin[1 - big_index];
        for (std::size_t r = 0; r < reps; ++r) {
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t k = r * inner + i;
            if (!gbig.empty()) gbig[k] += g[k] * (*ss)[i];
            if (!gsmall.empty()) gsmall[i] += g[k] * (*bs)[k];
          }
        }
      });
}

inline Tensor scale(const Tensor& x, double factor) {
  Buffer out(x.size());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
  return Tensor::from_op(x.shape(), std::move(out), "scale", {&x},
                         [factor](std::span<const double> g, detail::GradSpans& gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * factor;
                         });
}

inline double sigmoid_value(double x) {
  // Branches keep exp() from overflowing for large |x|.
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  Buffer out(x.size());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_value(xd[i]);
  Tensor result = Tensor::from_op(x.shape(), std::move(out), "sigmoid", {&x}, nullptr);
  if (result.requires_grad()) {
    result.slot()->fn->backward = [yd = result.storage()](std::span<const double> g,
                                                         detail::GradSpans& gin) {
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * (*yd)[i] * (1.0 - (*yd)[i]);
    };
  }
  return result;
}

inline Tensor gelu(const Tensor& x) {
  Buffer out(x.size());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * std::numbers::sqrt2 / 2.0));
  }
  return Tensor::from_op(x.shape(), std::move(out), "gelu", {&x},
                         [xs = x.storage()](std::span<const double> g, detail::GradSpans& gin) {
                           constexpr double inv_sqrt_2pi = 0.3989422804014327;
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             const double v = (*xs)[i];
                             const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
                             const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                             gin[0][i] += g[i] * (cdf + v * pdf);
                           }
                         });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  return Tensor::alias(x, std::move(shape), "reshape",
                       [](std::span<const double> g, detail::GradSpans& gin) {
                         for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                       });
}

// Circular rotation toward higher positions along the sequence axis (axis -2
// of [..., N, d]): out[p] = v[(p - shift) mod N].
inline Tensor roll_right(const Tensor& v, std::size_t shift) {
  detail::require_rank_at_least(v, 2, "roll_right");
  const std::size_t n = v.extent(-2);
  const std::size_t d = v.extent(-1);
  const std::size_t batches = v.size() / (n * d);
  const std::size_t s = shift % n;
  Buffer out(v.size());
  auto vd = v.data();
  for (std::size_t b = 0; b < batches; ++b) {
    const double* src = vd.data() + b * n * d;
    double* dst = out.data() + b * n * d;
    for (std::size_t p = 0; p < n; ++p) {
      std::copy_n(src + ((p + n - s) % n) * d, d, dst + p * d);
    }
  }
  return Tensor::from_op(v.shape(), std::move(out), "roll_right", {&v},
                         [n, d, batches, s](std::span<const double> g, detail::GradSpans& gin) {
                           for (std::size_t b = 0; b < batches; ++b) {
                             for (std::size_t p = 0; p < n; ++p) {
                               const double* gp = g.data() + (b * n + p) * d;
                               double* dst = gin[0].data() + (b * n + (p + n - s) % n) * d;
                               for (std::size_t j = 0; j < d; ++j) dst[j] += gp[j];
                             }
                           }
                         });
}

// First `count` entries along axis 0 (e.g. the leading rows of a table).
inline Tensor slice_first(const Tensor& x, std::size_t count) {
  const std::size_t lead = x.extent(0);
  if (count == 0 || count > lead) {
    throw DimensionError("slice_first: cannot take " + std::to_string(count) + " of " +
                         to_string(x.shape()));
  }
  if (count == lead) return x;
  const std::size_t stride = x.size() / lead;
  Shape shape = x.shape();
  shape[0] = count;
  Buffer out(x.data().begin(), x.data().begin() + static_cast<std::ptrdiff_t>(count * stride));
  return Tensor::from_op(std::move(shape), std::move(out), "slice_first", {&x},
                         [](std::span<const double> g, detail::GradSpans& gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                         });
}

// First `count` entries of the last axis.
inline Tensor slice_last(const Tensor& x, std::size_t count) {
  const std::size_t width = x.extent(-1);
  if (count == 0 || count > width) {
    throw DimensionError("slice_last: cannot take " + std::to_string(count) + " of " +
                         to_string(x.shape()));
  }
  if (count == width) return x;
  const std::size_t rows = x.size() / width;
  Shape shape = x.shape();
  shape.back() = count;
  Buffer out(rows * count);
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xd.data() + r * width, count, out.data() + r * count);
  }
  return Tensor::from_op(std::move(shape), std::move(out), "slice_last", {&x},
                         [rows, width, count](std::span<const double> g, detail::GradSpans& gin) {
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < count; ++j) {
                               gin[0][r * width + j] += g[r * count + j];
                             }
                           }
                         });
}

// [B, N, H*dh] -> [B, H, N, dh]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (x.rank() != 3 || x.extent(-1) % heads != 0) {
    throw DimensionError("split_heads: shape " + to_string(x.shape()) + " with " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t bsz = x.extent(0), n = x.extent(1), dh = x.extent(2) / heads;
  if (heads == 1) return reshape(x, {bsz, 1, n, dh});
  Buffer out(x.size());
  auto xd = x.data();
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(xd.data() + ((b * n + p) * heads + h) * dh, dh,
                    out.data() + ((b * heads + h) * n + p) * dh);
  return Tensor::from_op({bsz, heads, n, dh}, std::move(out), "split_heads", {&x},
                         [bsz, n, heads, dh](std::span<const double> g, detail::GradSpans& gin) {
                           for (std::size_t b = 0; b < bsz; ++b)
                             for (std::size_t p = 0; p < n; ++p)
                               for (std::size_t h = 0; h < heads; ++h) {
                                 const double* src = g.data() + ((b * heads + h) * n + p) * dh;
                                 double* dst = gin[0].data() + ((b * n + p) * heads + h) * dh;
                                 for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
                               }
                         });
}

// [B, H, N, dh] -> [B, N, H*dh]
inline Tensor merge_heads(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("merge_heads: shape " + to_string(x.shape()));
  const std::size_t bsz = x.extent(0), heads = x.extent(1), n = x.extent(2), dh = x.extent(3);
  if (heads == 1) return reshape(x, {bsz, n, dh});
  Buffer out(x.size());
  auto xd = x.data();
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t p = 0; p < n; ++p)
        std::copy_n(xd.data() + ((b * heads + h) * n + p) * dh, dh,
                    out.data() + ((b * n + p) * heads + h) * dh);
  return Tensor::from_op({bsz, n, heads * dh}, std::move(out), "merge_heads", {&x},
                         [bsz, n, heads, dh](std::span<const double> g, detail::GradSpans& gin) {
                           for (std::size_t b = 0; b < bsz; ++b)
                             for (std::size_t h = 0; h < heads; ++h)
                               for (std::size_t p = 0; p < n; ++p) {
                                 const double* src = g.data() + ((b * n + p) * heads + h) * dh;
                                 double* dst = gin[0].data() + ((b * heads + h) * n + p) * dh;
                                 for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
                               }
                         });
}

// ---------------------------------------------------------------------------
// Products

// a[..., m, k] x b[..., k, n] (or b[..., n, k] when transpose_b). b is either a
// plain matrix shared across a's batch dimensions or has identical batch dims.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  detail::require_rank_at_least(a, 2, "matmul");
  detail::require_rank_at_least(b, 2, "matmul");
  const std::size_t m = a.extent(-2), k = a.extent(-1);
  const std::size_t bk = transpose_b ? b.extent(-1) : b.extent(-2);
  const std::size_t n = transpose_b ? b.extent(-2) : b.extent(-1);
  const bool shared_b = b.rank() == 2;
  const bool batch_ok =
      shared_b || (a.rank() == b.rank() &&
                   std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()));
  if (bk != k || !batch_ok) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()) + (transpose_b ? " (b transposed)" : ""));
  }
  const std::size_t batches = a.size() / (m * k);
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  shape.push_back(n);
  Buffer out(batches * m * n);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  if (shared_b) {
    kernels::gemm(batches * m, n, k, ad, false, bd, transpose_b, out.data(), false);
  } else {
    for (std::size_t i = 0; i < batches; ++i) {
      kernels::gemm(m, n, k, ad + i * m * k, false, bd + i * k * n, transpose_b,
                    out.data() + i * m * n, false);
    }
  }
  return Tensor::from_op(
      std::move(shape), std::move(out), "matmul", {&a, &b},
      [as = a.storage(), bs = b.storage(), m, n, k, batches, shared_b, transpose_b](
          std::span<const double> g, detail::GradSpans& gin) {
        const double* ad = as->data();
        const double* bd = bs->data();
        const std::size_t rows = shared_b ? batches * m : m;
        const std::size_t reps = shared_b ? 1 : batches;
        for (std::size_t i = 0; i < reps; ++i) {
          const double* gi = g.data() + i * rows * n;
          const double* ai = ad + i * rows * k;
          const double* bi = bd + i * k * n;
          if (!gin[0].empty()) {
            // dA = G * op(B)^T
            kernels::gemm(rows, k, n, gi, false, bi, !transpose_b, gin[0].data() + i * rows * k,
                          true);
          }
          if (!gin[1].empty()) {
            double* gb = gin[1].data() + i * k * n;
            if (transpose_b) {
              // dB[n x k] = G^T * A
              kernels::gemm(n, k, rows, gi, true, ai, false, gb, true);
            } else {
              // dB[k x n] = A^T * G
              kernels::gemm(k, n, rows, ai, true, gi, false, gb, true);
            }
          }
        }
      });
}

// x[..., in] * weight[in, out] + bias[out]
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.extent(-1) != weight.extent(0) || bias.rank() != 1 ||
      bias.extent(0) != weight.extent(1)) {
    throw DimensionError("linear: input " + to_string(x.shape()) + ", weight " +
                         to_string(weight.shape()) + ", bias " + to_string(bias.shape()));
  }
  const std::size_t in = weight.extent(0), outw = weight.extent(1);
  const std::size_t rows = x.size() / in;
  Shape shape = x.shape();
  shape.back() = outw;
  Buffer out(rows * outw);
  auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy(bd.begin(), bd.end(), out.begin() + r * outw);
  kernels::gemm(rows, outw, in, x.data().data(), false, weight.data().data(), false, out.data(),
                true);
  return Tensor::from_op(
      std::move(shape), std::move(out), "linear", {&x, &weight, &bias},
      [xs = x.storage(), ws = weight.storage(), rows, in, outw](std::span<const double> g,
                                                                  detail::GradSpans& gin) {
        if (!gin[0].empty()) {
          kernels::gemm(rows, in, outw, g.data(), false, ws->data(), true, gin[0].data(), true);
        }
        if (!gin[1].empty()) {
          kernels::gemm(in, outw, rows, xs->data(), true, g.data(), false, gin[1].data(), true);
        }
        if (!gin[2].empty()) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < outw; ++j) gin[2][j] += g[r * outw + j];
        }
      });
}

// ---------------------------------------------------------------------------
// Normalisation and attention helpers

inline Tensor softmax(const Tensor& x, int axis = -1) {
  const int r = static_cast<int>(x.rank());
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw DimensionError("softmax: axis out of range for " + to_string(x.shape()));
  const std::size_t len = x.shape()[static_cast<std::size_t>(ax)];
  std::size_t inner = 1;
  for (int i = ax + 1; i < r; ++i) inner *= x.shape()[static_cast<std::size_t>(i)];
  const std::size_t outer = x.size() / (len * inner);
  Buffer out(x.size());
  auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xd[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  Tensor result = Tensor::from_op(x.shape(), std::move(out), "softmax", {&x}, nullptr);
  if (result.requires_grad()) {
    result.slot()->fn->backward = [yd = result.storage(), outer, inner, len](
                                      std::span<const double> g, detail::GradSpans& gin) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * len * inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * (*yd)[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t k = base + j * inner;
            gin[0][k] += (*yd)[k] * (g[k] - dot);
          }
        }
      }
    };
  }
  return result;
}

// Sets entries strictly above the diagonal of the trailing [N, N] block to -inf.
inline Tensor causal_mask_fill(const Tensor& scores) {
  detail::require_rank_at_least(scores, 2, "causal_mask_fill");
  const std::size_t n = scores.extent(-1);
  if (scores.extent(-2) != n) {
    throw DimensionError("causal_mask_fill: trailing block not square in " + to_string(scores.shape()));
  }
  const std::size_t mats = scores.size() / (n * n);
  Buffer out(scores.data().begin(), scores.data().end());
  constexpr double neg_inf = -std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m < mats; ++m)
    for (std::size_t i = 0; i < n; ++i)
      std::fill(out.begin() + (m * n + i) * n + i + 1, out.begin() + (m * n + i + 1) * n, neg_inf);
  return Tensor::from_op(scores.shape(), std::move(out), "causal_mask_fill", {&scores},
                         [mats, n](std::span<const double> g, detail::GradSpans& gin) {
                           for (std::size_t m = 0; m < mats; ++m)
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j <= i; ++j)
                                 gin[0][(m * n + i) * n + j] += g[(m * n + i) * n + j];
                         });
}

// Normalises the last axis, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  const std::size_t d = x.extent(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: input " + to_string(x.shape()) + ", gamma " +
                         to_string(gamma.shape()) + ", beta " + to_string(beta.shape()));
  }
  const std::size_t rows = x.size() / d;
  auto xhat = std::make_shared<Buffer>(x.size());
  auto rstd = std::make_shared<Buffer>(rows);
  Buffer out(x.size());
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  return Tensor::from_op(
      x.shape(), std::move(out), "layer_norm", {&x, &gamma, &beta},
      [xhat, rstd, gs = gamma.storage(), rows, d](std::span<const double> g,
                                                 detail::GradSpans& gin) {
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * d;
          const double* hr = xhat->data() + r * d;
          if (!gin[0].empty()) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = gr[j] * (*gs)[j];
              mean_dh += dh;
              mean_dh_h += dh * hr[j];
            }
            mean_dh /= static_cast<double>(d);
            mean_dh_h /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = gr[j] * (*gs)[j];
              gin[0][r * d + j] += (*rstd)[r] * (dh - mean_dh - hr[j] * mean_dh_h);
            }
          }
          for (std::size_t j = 0; j < d; ++j) {
            if (!gin[1].empty()) gin[1][j] += gr[j] * hr[j];
            if (!gin[2].empty()) gin[2][j] += gr[j];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Token-level ops

// Rows of `table` [V, d] selected by `ids`; result has shape ids_shape + [d].
inline Tensor embedding(std::span<const std::size_t> ids, const Shape& ids_shape,
                        const Tensor& table) {
  if (table.rank() != 2 || numel(ids_shape) != ids.size()) {
    throw DimensionError("embedding: ids shape " + to_string(ids_shape) + ", table " +
                         to_string(table.shape()));
  }
  const std::size_t vocab = table.extent(0), d = table.extent(1);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw DataError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                      " is outside the vocabulary of size " + std::to_string(vocab));
    }
  }
  Shape shape = ids_shape;
  shape.push_back(d);
  Buffer out(ids.size() * d);
  auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(td.data() + ids[i] * d, d, out.data() + i * d);
  }
  return Tensor::from_op(std::move(shape), std::move(out), "embedding", {&table},
                         [idv = std::vector<std::size_t>(ids.begin(), ids.end()), d](
                             std::span<const double> g, detail::GradSpans& gin) {
                           for (std::size_t i = 0; i < idv.size(); ++i) {
                             double* dst = gin[0].data() + idv[i] * d;
                             for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
                           }
                         });
}

// Mean negative log-likelihood of `targets` under softmax(logits[..., V]).
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  const std::size_t vocab = logits.extent(-1);
  const std::size_t rows = logits.size() / vocab;
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: logits " + to_string(logits.shape()) + " but " +
                         std::to_string(targets.size()) + " targets");
  }
  auto probs = std::make_shared<Buffer>(logits.size());
  auto ld = logits.data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= vocab) {
      throw DataError("target id " + std::to_string(targets[r]) + " at position " +
                      std::to_string(r) + " is outside the vocabulary of size " +
                      std::to_string(vocab));
    }
    const double* lr = ld.data() + r * vocab;
    const double mx = *std::max_element(lr, lr + vocab);
    double sum = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      const double e = std::exp(lr[j] - mx);
      (*probs)[r * vocab + j] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < vocab; ++j) (*probs)[r * vocab + j] /= sum;
    total += std::log(sum) + mx - lr[targets[r]];
  }
  return Tensor::from_op({1}, Buffer{total / static_cast<double>(rows)}, "cross_entropy",
                         {&logits},
                         [probs, tv = std::vector<std::size_t>(targets.begin(), targets.end()),
                          rows, vocab](std::span<const double> g, detail::GradSpans& gin) {
                           const double w = g[0] / static_cast<double>(rows);
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < vocab; ++j) {
                               double p = (*probs)[r * vocab + j];
                               if (j == tv[r]) p -= 1.0;
                               gin[0][r * vocab + j] += w * p;
                             }
                           }
                         });
}

// Inverted dropout: zeroes each element with probability p and rescales the
// survivors by 1/(1-p).
inline Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError("dropout probability must lie in [0, 1]");
  if (p == 0.0) return x;
  auto keep = std::make_shared<Buffer>(x.size());
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const double factor = p < 1.0 ? 1.0 / (1.0 - p) : 0.0;
  for (double& k : *keep) k = uniform(rng) < p ? 0.0 : factor;
  Buffer out(x.size());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * (*keep)[i];
  return Tensor::from_op(x.shape(), std::move(out), "dropout", {&x},
                         [keep](std::span<const double> g, detail::GradSpans& gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * (*keep)[i];
                         });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return Tensor::from_op({1}, Buffer{total}, "sum", {&x},
                         [](std::span<const double> g, detail::GradSpans& gin) {
                           for (double& v : gin[0]) v += g[0];
                         });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

}  // namespace dispatcher
