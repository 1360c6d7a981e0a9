#include "volab/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "volab/error.hpp"
#include "volab/parallel.hpp"

namespace volab::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

void require_broadcastable(const Tensor& a, const Tensor& b, const char* op) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " are not compatible");
  }
}

void add_into(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

// Splits a shape around `axis` into (outer, length, inner) extents.
struct AxisSplit {
  std::size_t outer, length, inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename F, typename DF>
Tensor unary(const Tensor& a, F f, DF df_from_xy) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  auto saved_out = std::make_shared<std::vector<double>>(out);
  return make_op_result(a.shape(), std::move(out), {a},
                        [a, saved_out, df_from_xy](std::span<const double> g, GradSinks gin) {
                          if (gin[0].empty()) return;
                          const auto x = a.data();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            gin[0][i] += g[i] * df_from_xy(x[i], (*saved_out)[i]);
                          }
                        });
}

std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                         const char* op) {
  if (stride == 0) throw ShapeError(std::string(op) + ": stride must be positive");
  if (in + 2 * pad < k) {
    throw ShapeError(std::string(op) + ": window " + std::to_string(k) +
                     " larger than padded input " + std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_broadcastable(a, b, "add");
  const std::size_t m = b.numel();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i % m];
  return make_op_result(a.shape(), std::move(out), {a, b},
                        [m](std::span<const double> g, GradSinks gin) {
                          if (!gin[0].empty()) add_into(gin[0], g);
                          if (!gin[1].empty()) {
                            for (std::size_t i = 0; i < g.size(); ++i) gin[1][i % m] += g[i];
                          }
                        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_broadcastable(a, b, "sub");
  const std::size_t m = b.numel();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i % m];
  return make_op_result(a.shape(), std::move(out), {a, b},
                        [m](std::span<const double> g, GradSinks gin) {
                          if (!gin[0].empty()) add_into(gin[0], g);
                          if (!gin[1].empty()) {
                            for (std::size_t i = 0; i < g.size(); ++i) gin[1][i % m] -= g[i];
                          }
                        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_broadcastable(a, b, "mul");
  const std::size_t m = b.numel();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i % m];
  return make_op_result(a.shape(), std::move(out), {a, b},
                        [a, b, m](std::span<const double> g, GradSinks gin) {
                          if (!gin[0].empty()) {
                            for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * b[i % m];
                          }
                          if (!gin[1].empty()) {
                            for (std::size_t i = 0; i < g.size(); ++i) gin[1][i % m] += g[i] * a[i];
                          }
                        });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2) throw ShapeError("matmul: left operand needs rank >= 2");
  if (b.rank() == 2) {
    const std::size_t k = a.dim(a.rank() - 1);
    if (b.dim(0) != k) {
      throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    }
    const std::size_t rows = a.numel() / k;
    const std::size_t n = b.dim(1);
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<double> out(rows * n);
    MapMat(out.data(), rows, n).noalias() =
        ConstMapMat(a.data().data(), rows, k) * ConstMapMat(b.data().data(), k, n);
    return make_op_result(
        std::move(out_shape), std::move(out), {a, b},
        [a, b, rows, k, n](std::span<const double> g, GradSinks gin) {
          ConstMapMat gm(g.data(), rows, n);
          if (!gin[0].empty()) {
            MapMat(gin[0].data(), rows, k).noalias() +=
                gm * ConstMapMat(b.data().data(), k, n).transpose();
          }
          if (!gin[1].empty()) {
            MapMat(gin[1].data(), k, n).noalias() +=
                ConstMapMat(a.data().data(), rows, k).transpose() * gm;
          }
        });
  }
  if (a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1)) {
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<double> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i) {
      MapMat(out.data() + i * m * n, m, n).noalias() =
          ConstMapMat(a.data().data() + i * m * k, m, k) *
          ConstMapMat(b.data().data() + i * k * n, k, n);
    }
    return make_op_result(
        Shape{batch, m, n}, std::move(out), {a, b},
        [a, b, batch, m, k, n](std::span<const double> g, GradSinks gin) {
          for (std::size_t i = 0; i < batch; ++i) {
            ConstMapMat gm(g.data() + i * m * n, m, n);
            if (!gin[0].empty()) {
              MapMat(gin[0].data() + i * m * k, m, k).noalias() +=
                  gm * ConstMapMat(b.data().data() + i * k * n, k, n).transpose();
            }
            if (!gin[1].empty()) {
              MapMat(gin[1].data() + i * k * n, k, n).noalias() +=
                  ConstMapMat(a.data().data() + i * m * k, m, k).transpose() * gm;
            }
          }
        });
  }
  throw ShapeError("matmul: unsupported shapes " + shape_str(a.shape()) + " x " +
                   shape_str(b.shape()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return make_op_result(std::move(shape), a.values(), {a},
                        [](std::span<const double> g, GradSinks gin) {
                          if (!gin[0].empty()) add_into(gin[0], g);
                        });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  if (axes.size() != r) throw ShapeError("permute: axis count mismatch");
  std::vector<bool> seen(r, false);
  for (std::size_t ax : axes) {
    if (ax >= r || seen[ax]) throw ShapeError("permute: invalid axis list");
    seen[ax] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.dim(i);
  Shape out_shape(r);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = a.dim(axes[i]);
    src_stride[i] = in_strides[axes[i]];
  }
  // map[out_linear] = in_linear
  auto map = std::make_shared<std::vector<std::size_t>>(a.numel());
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < a.numel(); ++o) {
    (*map)[o] = src;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      src -= src_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<double> out(a.numel());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = a[(*map)[o]];
  return make_op_result(std::move(out_shape), std::move(out), {a},
                        [map](std::span<const double> g, GradSinks gin) {
                          if (gin[0].empty()) return;
                          for (std::size_t o = 0; o < g.size(); ++o) gin[0][(*map)[o]] += g[o];
                        });
}

Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1) {
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  if (axis0 >= a.rank() || axis1 >= a.rank()) throw ShapeError("transpose: axis out of range");
  std::swap(axes[axis0], axes[axis1]);
  return permute(a, axes);
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  std::vector<std::size_t> lengths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.dim(i) != first[i]) {
        throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " +
                         shape_str(p.shape()));
      }
    }
    lengths.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  const AxisSplit s = split_at(first, axis);
  Shape out_shape = first;
  out_shape[axis] = total;
  std::vector<double> out(s.outer * total * s.inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t block = lengths[k] * s.inner;
    const auto src = parts[k].data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(src.begin() + o * block, block,
                  out.begin() + o * total * s.inner + offset * s.inner);
    }
    offset += lengths[k];
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_op_result(std::move(out_shape), std::move(out), std::move(inputs),
                        [s, lengths, total](std::span<const double> g, GradSinks gin) {
                          std::size_t offset = 0;
                          for (std::size_t k = 0; k < lengths.size(); ++k) {
                            const std::size_t block = lengths[k] * s.inner;
                            if (!gin[k].empty()) {
                              for (std::size_t o = 0; o < s.outer; ++o) {
                                const double* src =
                                    g.data() + o * total * s.inner + offset * s.inner;
                                for (std::size_t i = 0; i < block; ++i) {
                                  gin[k][o * block + i] += src[i];
                                }
                              }
                            }
                            offset += lengths[k];
                          }
                        });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit s = split_at(a.shape(), axis);
  if (length == 0 || start + length > s.length) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") out of range for axis of length " +
                     std::to_string(s.length));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  const std::size_t block = length * s.inner;
  std::vector<double> out(s.outer * block);
  const auto src = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(src.begin() + (o * s.length + start) * s.inner, block, out.begin() + o * block);
  }
  return make_op_result(std::move(out_shape), std::move(out), {a},
                        [s, start, block](std::span<const double> g, GradSinks gin) {
                          if (gin[0].empty()) return;
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            double* dst = gin[0].data() + (o * s.length + start) * s.inner;
                            for (std::size_t i = 0; i < block; ++i) dst[i] += g[o * block + i];
                          }
                        });
}

Tensor take(const Tensor& a, std::span<const std::size_t> indices) {
  if (a.rank() == 0) throw ShapeError("take: scalar input");
  if (indices.empty()) throw ShapeError("take: empty index list");
  const std::size_t rows = a.dim(0);
  const std::size_t row = a.numel() / rows;
  for (std::size_t i : indices) {
    if (i >= rows) throw ShapeError("take: index " + std::to_string(i) + " out of range");
  }
  Shape out_shape = a.shape();
  out_shape[0] = indices.size();
  std::vector<double> out(indices.size() * row);
  const auto src = a.data();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(src.begin() + indices[r] * row, row, out.begin() + r * row);
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  return make_op_result(std::move(out_shape), std::move(out), {a},
                        [idx, row](std::span<const double> g, GradSinks gin) {
                          if (gin[0].empty()) return;
                          for (std::size_t r = 0; r < idx->size(); ++r) {
                            double* dst = gin[0].data() + (*idx)[r] * row;
                            for (std::size_t i = 0; i < row; ++i) dst[i] += g[r * row + i];
                          }
                        });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  const AxisSplit s = split_at(a.shape(), axis);
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.length * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.length; ++j) mx = std::max(mx, x[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.length; ++j) {
        const double e = std::exp(x[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.length; ++j) out[base + j * s.inner] /= total;
    }
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return make_op_result(a.shape(), std::move(out), {a},
                        [s, y](std::span<const double> g, GradSinks gin) {
                          if (gin[0].empty()) return;
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            for (std::size_t in = 0; in < s.inner; ++in) {
                              const std::size_t base = o * s.length * s.inner + in;
                              double dot = 0.0;
                              for (std::size_t j = 0; j < s.length; ++j) {
                                const std::size_t p = base + j * s.inner;
                                dot += g[p] * (*y)[p];
                              }
                              for (std::size_t j = 0; j < s.length; ++j) {
                                const std::size_t p = base + j * s.inner;
                                gin[0][p] += (*y)[p] * (g[p] - dot);
                              }
                            }
                          }
                        });
}

Tensor masked_softmax(const Tensor& a, const std::vector<double>& additive_mask) {
  if (additive_mask.size() != a.numel()) throw ShapeError("masked_softmax: mask size mismatch");
  if (a.rank() == 0) throw ShapeError("masked_softmax: scalar input");
  const std::size_t len = a.dim(a.rank() - 1);
  const std::size_t rows = a.numel() / len;
  std::vector<double> out(a.numel(), 0.0);
  const auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * len;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < len; ++j) {
      if (std::isfinite(additive_mask[base + j])) {
        mx = std::max(mx, x[base + j] + additive_mask[base + j]);
      }
    }
    if (!std::isfinite(mx)) throw NumericError("masked_softmax: row with every entry blocked");
    double total = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      if (!std::isfinite(additive_mask[base + j])) continue;
      const double e = std::exp(x[base + j] + additive_mask[base + j] - mx);
      out[base + j] = e;
      total += e;
    }
    for (std::size_t j = 0; j < len; ++j) out[base + j] /= total;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return make_op_result(a.shape(), std::move(out), {a},
                        [y, rows, len](std::span<const double> g, GradSinks gin) {
                          if (gin[0].empty()) return;
                          for (std::size_t r = 0; r < rows; ++r) {
                            const std::size_t base = r * len;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < len; ++j) dot += g[base + j] * (*y)[base + j];
                            for (std::size_t j = 0; j < len; ++j) {
                              gin[0][base + j] += (*y)[base + j] * (g[base + j] - dot);
                            }
                          }
                        });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.dim(x.rank() - 1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: affine size mismatch for width " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xv[r * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xv[r * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xv[r * d + j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gamma[j] + beta[j];
    }
  }
  return make_op_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [gamma, xhat, inv_std, rows, d](std::span<const double> g, GradSinks gin) {
        std::vector<double> dh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * d;
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dh[j] = g[base + j] * gamma[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * (*xhat)[base + j];
          }
          mean_dh /= static_cast<double>(d);
          mean_dh_h /= static_cast<double>(d);
          if (!gin[0].empty()) {
            for (std::size_t j = 0; j < d; ++j) {
              gin[0][base + j] +=
                  (*inv_std)[r] * (dh[j] - mean_dh - (*xhat)[base + j] * mean_dh_h);
            }
          }
          if (!gin[1].empty()) {
            for (std::size_t j = 0; j < d; ++j) gin[1][j] += g[base + j] * (*xhat)[base + j];
          }
          if (!gin[2].empty()) {
            for (std::size_t j = 0; j < d; ++j) gin[2][j] += g[base + j];
          }
        }
      });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_op_result(Shape{}, {total}, {a}, [](std::span<const double> g, GradSinks gin) {
    if (gin[0].empty()) return;
    for (double& v : gin[0]) v += g[0];
  });
}

Tensor mean(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  const double n = static_cast<double>(a.numel());
  return make_op_result(Shape{}, {total / n}, {a}, [n](std::span<const double> g, GradSinks gin) {
    if (gin[0].empty()) return;
    for (double& v : gin[0]) v += g[0] / n;
  });
}

Tensor mean_axis(const Tensor& a, std::size_t axis) {
  const AxisSplit s = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto x = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.length; ++j) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        out[o * s.inner + in] += x[(o * s.length + j) * s.inner + in];
      }
    }
  }
  const double n = static_cast<double>(s.length);
  for (double& v : out) v /= n;
  return make_op_result(std::move(out_shape), std::move(out), {a},
                        [s, n](std::span<const double> g, GradSinks gin) {
                          if (gin[0].empty()) return;
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            for (std::size_t j = 0; j < s.length; ++j) {
                              for (std::size_t in = 0; in < s.inner; ++in) {
                                gin[0][(o * s.length + j) * s.inner + in] +=
                                    g[o * s.inner + in] / n;
                              }
                            }
                          }
                        });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                  bool training, double momentum, double eps) {
  if (x.rank() < 2) throw ShapeError("batch_norm: input needs [N, C, ...]");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t spatial = x.numel() / (n * c);
  if (gamma.numel() != c || beta.numel() != c || stats.running_mean.size() != c ||
      stats.running_var.size() != c) {
    throw ShapeError("batch_norm: channel count mismatch");
  }
  const std::size_t count = n * spatial;
  std::vector<double> mu(c, 0.0), inv_std(c, 0.0);
  const auto xv = x.data();
  auto at = [&](std::size_t b, std::size_t ch, std::size_t s) { return (b * c + ch) * spatial + s; };
  if (training) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double m = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t s = 0; s < spatial; ++s) m += xv[at(b, ch, s)];
      m /= static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t s = 0; s < spatial; ++s) {
          const double d = xv[at(b, ch, s)] - m;
          v += d * d;
        }
      v /= static_cast<double>(count);
      mu[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(v + eps);
      const double unbiased = count > 1 ? v * static_cast<double>(count) / (count - 1.0) : v;
      stats.running_mean[ch] = (1.0 - momentum) * stats.running_mean[ch] + momentum * m;
      stats.running_var[ch] = (1.0 - momentum) * stats.running_var[ch] + momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = stats.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(stats.running_var[ch] + eps);
    }
  }
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t s = 0; s < spatial; ++s) {
        const std::size_t i = at(b, ch, s);
        (*xhat)[i] = (xv[i] - mu[ch]) * inv_std[ch];
        out[i] = (*xhat)[i] * gamma[ch] + beta[ch];
      }
  return make_op_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [gamma, xhat, inv_std, n, c, spatial, count, training](std::span<const double> g,
                                                             GradSinks gin) {
        auto at = [&](std::size_t b, std::size_t ch, std::size_t s) {
          return (b * c + ch) * spatial + s;
        };
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0, sum_gh = 0.0;
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t s = 0; s < spatial; ++s) {
              const std::size_t i = at(b, ch, s);
              sum_g += g[i];
              sum_gh += g[i] * (*xhat)[i];
            }
          if (!gin[1].empty()) gin[1][ch] += sum_gh;
          if (!gin[2].empty()) gin[2][ch] += sum_g;
          if (gin[0].empty()) continue;
          const double k = gamma[ch] * inv_std[ch];
          const double m = static_cast<double>(count);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t s = 0; s < spatial; ++s) {
              const std::size_t i = at(b, ch, s);
              if (training) {
                gin[0][i] += k * (g[i] - sum_g / m - (*xhat)[i] * sum_gh / m);
              } else {
                gin[0][i] += k * g[i];
              }
            }
        }
      });
}

namespace {

struct ConvGeometry {
  std::size_t n, c, d, h, w;
  std::size_t o, kd, kh, kw;
  Index3 stride, pad;
  std::size_t od, oh, ow;
  std::size_t ck() const { return c * kd * kh * kw; }
  std::size_t positions() const { return od * oh * ow; }
  std::size_t in_volume() const { return d * h * w; }
};

// cols [ck, positions] for one sample.
void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const std::size_t p = g.positions();
  std::size_t row = 0;
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t a = 0; a < g.kd; ++a)
      for (std::size_t b = 0; b < g.kh; ++b)
        for (std::size_t e = 0; e < g.kw; ++e, ++row) {
          double* dst = cols + row * p;
          std::size_t q = 0;
          for (std::size_t z = 0; z < g.od; ++z) {
            const long zi = static_cast<long>(z * g.stride[0] + a) - static_cast<long>(g.pad[0]);
            for (std::size_t y = 0; y < g.oh; ++y) {
              const long yi =
                  static_cast<long>(y * g.stride[1] + b) - static_cast<long>(g.pad[1]);
              const bool zy_ok = zi >= 0 && zi < static_cast<long>(g.d) && yi >= 0 &&
                                 yi < static_cast<long>(g.h);
              const double* src = x + (ch * g.d + (zy_ok ? zi : 0)) * g.h * g.w +
                                  (zy_ok ? yi : 0) * g.w;
              for (std::size_t xo = 0; xo < g.ow; ++xo, ++q) {
                const long xi =
                    static_cast<long>(xo * g.stride[2] + e) - static_cast<long>(g.pad[2]);
                dst[q] = (zy_ok && xi >= 0 && xi < static_cast<long>(g.w)) ? src[xi] : 0.0;
              }
            }
          }
        }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* dx) {
  const std::size_t p = g.positions();
  std::size_t row = 0;
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t a = 0; a < g.kd; ++a)
      for (std::size_t b = 0; b < g.kh; ++b)
        for (std::size_t e = 0; e < g.kw; ++e, ++row) {
          const double* src = cols + row * p;
          std::size_t q = 0;
          for (std::size_t z = 0; z < g.od; ++z) {
            const long zi = static_cast<long>(z * g.stride[0] + a) - static_cast<long>(g.pad[0]);
            for (std::size_t y = 0; y < g.oh; ++y) {
              const long yi =
                  static_cast<long>(y * g.stride[1] + b) - static_cast<long>(g.pad[1]);
              const bool zy_ok = zi >= 0 && zi < static_cast<long>(g.d) && yi >= 0 &&
                                 yi < static_cast<long>(g.h);
              if (!zy_ok) {
                q += g.ow;
                continue;
              }
              double* dst = dx + (ch * g.d + zi) * g.h * g.w + yi * g.w;
              for (std::size_t xo = 0; xo < g.ow; ++xo, ++q) {
                const long xi =
                    static_cast<long>(xo * g.stride[2] + e) - static_cast<long>(g.pad[2]);
                if (xi >= 0 && xi < static_cast<long>(g.w)) dst[xi] += src[q];
              }
            }
          }
        }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& kernel, const std::optional<Tensor>& bias,
              Index3 stride, Index3 padding) {
  if (x.rank() != 5 || kernel.rank() != 5) {
    throw ShapeError("conv3d: expected 5-D input and kernel, got " + shape_str(x.shape()) +
                     " and " + shape_str(kernel.shape()));
  }
  if (kernel.dim(1) != x.dim(1)) {
    throw ShapeError("conv3d: input has " + std::to_string(x.dim(1)) +
                     " channels, kernel expects " + std::to_string(kernel.dim(1)));
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4),
                 kernel.dim(0), kernel.dim(2), kernel.dim(3), kernel.dim(4),
                 stride, padding, 0, 0, 0};
  g.od = conv_out_dim(g.d, g.kd, stride[0], padding[0], "conv3d");
  g.oh = conv_out_dim(g.h, g.kh, stride[1], padding[1], "conv3d");
  g.ow = conv_out_dim(g.w, g.kw, stride[2], padding[2], "conv3d");
  if (bias && bias->numel() != g.o) throw ShapeError("conv3d: bias size mismatch");

  const std::size_t p = g.positions(), ck = g.ck();
  std::vector<double> out(g.n * g.o * p);
  ConstMapMat wmat(kernel.data().data(), g.o, ck);
  parallel_for(g.n, [&](std::size_t b) {
    std::vector<double> cols(ck * p);
    im2col(g, x.data().data() + b * g.c * g.in_volume(), cols.data());
    MapMat om(out.data() + b * g.o * p, g.o, p);
    om.noalias() = wmat * ConstMapMat(cols.data(), ck, p);
    if (bias) {
      for (std::size_t oc = 0; oc < g.o; ++oc) om.row(oc).array() += (*bias)[oc];
    }
  });

  std::vector<Tensor> inputs{x, kernel};
  if (bias) inputs.push_back(*bias);
  return make_op_result(
      Shape{g.n, g.o, g.od, g.oh, g.ow}, std::move(out), std::move(inputs),
      [x, kernel, g, has_bias = bias.has_value()](std::span<const double> grad, GradSinks gin) {
        const std::size_t p = g.positions(), ck = g.ck();
        ConstMapMat wmat(kernel.data().data(), g.o, ck);
        const bool need_dx = !gin[0].empty();
        const bool need_dw = !gin[1].empty();
        std::vector<std::vector<double>> dw_parts(need_dw ? g.n : 0);
        parallel_for(g.n, [&](std::size_t b) {
          ConstMapMat gm(grad.data() + b * g.o * p, g.o, p);
          std::vector<double> cols(ck * p);
          if (need_dw) {
            im2col(g, x.data().data() + b * g.c * g.in_volume(), cols.data());
            dw_parts[b].assign(g.o * ck, 0.0);
            MapMat(dw_parts[b].data(), g.o, ck).noalias() =
                gm * ConstMapMat(cols.data(), ck, p).transpose();
          }
          if (need_dx) {
            MapMat(cols.data(), ck, p).noalias() = wmat.transpose() * gm;
            col2im_add(g, cols.data(), gin[0].data() + b * g.c * g.in_volume());
          }
        });
        if (need_dw) {
          for (std::size_t b = 0; b < g.n; ++b) add_into(gin[1], dw_parts[b]);
        }
        if (has_bias && !gin[2].empty()) {
          for (std::size_t b = 0; b < g.n; ++b)
            for (std::size_t oc = 0; oc < g.o; ++oc) {
              const double* row = grad.data() + (b * g.o + oc) * p;
              double s = 0.0;
              for (std::size_t q = 0; q < p; ++q) s += row[q];
              gin[2][oc] += s;
            }
        }
      });
}

Tensor pool3d(const Tensor& x, PoolKind kind, Index3 window, Index3 stride, Index3 padding) {
  if (x.rank() != 5) throw ShapeError("pool3d: expected 5-D input, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), d = x.dim(2), h = x.dim(3), w = x.dim(4);
  const std::size_t od = conv_out_dim(d, window[0], stride[0], padding[0], "pool3d");
  const std::size_t oh = conv_out_dim(h, window[1], stride[1], padding[1], "pool3d");
  const std::size_t ow = conv_out_dim(w, window[2], stride[2], padding[2], "pool3d");
  const std::size_t out_plane = od * oh * ow, in_plane = d * h * w;
  const double wvol = static_cast<double>(window[0] * window[1] * window[2]);
  std::vector<double> out(n * c * out_plane);
  // For max: argmax input offset per output (within the channel plane).
  auto arg = std::make_shared<std::vector<std::size_t>>(kind == PoolKind::Max ? out.size() : 0);
  const auto xv = x.data();
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const double* src = xv.data() + nc * in_plane;
    std::size_t q = nc * out_plane;
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo, ++q) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_at = 0;
          bool found = false;
          double total = 0.0;
          for (std::size_t a = 0; a < window[0]; ++a) {
            const long zi = static_cast<long>(z * stride[0] + a) - static_cast<long>(padding[0]);
            if (zi < 0 || zi >= static_cast<long>(d)) continue;
            for (std::size_t b = 0; b < window[1]; ++b) {
              const long yi =
                  static_cast<long>(y * stride[1] + b) - static_cast<long>(padding[1]);
              if (yi < 0 || yi >= static_cast<long>(h)) continue;
              for (std::size_t e = 0; e < window[2]; ++e) {
                const long xi =
                    static_cast<long>(xo * stride[2] + e) - static_cast<long>(padding[2]);
                if (xi < 0 || xi >= static_cast<long>(w)) continue;
                const std::size_t off = (zi * h + yi) * w + xi;
                const double v = src[off];
                total += v;
                if (!found || v > best) {
                  best = v;
                  best_at = off;
                  found = true;
                }
              }
            }
          }
          if (kind == PoolKind::Max) {
            if (!found) throw ShapeError("pool3d: window covers only padding");
            out[q] = best;
            (*arg)[q] = best_at;
          } else {
            out[q] = total / wvol;
          }
        }
  }
  return make_op_result(
      Shape{n, c, od, oh, ow}, std::move(out), {x},
      [=](std::span<const double> g, GradSinks gin) {
        if (gin[0].empty()) return;
        for (std::size_t nc = 0; nc < n * c; ++nc) {
          double* dst = gin[0].data() + nc * in_plane;
          std::size_t q = nc * out_plane;
          for (std::size_t z = 0; z < od; ++z)
            for (std::size_t y = 0; y < oh; ++y)
              for (std::size_t xo = 0; xo < ow; ++xo, ++q) {
                if (kind == PoolKind::Max) {
                  dst[(*arg)[q]] += g[q];
                  continue;
                }
                for (std::size_t a = 0; a < window[0]; ++a) {
                  const long zi =
                      static_cast<long>(z * stride[0] + a) - static_cast<long>(padding[0]);
                  if (zi < 0 || zi >= static_cast<long>(d)) continue;
                  for (std::size_t b = 0; b < window[1]; ++b) {
                    const long yi =
                        static_cast<long>(y * stride[1] + b) - static_cast<long>(padding[1]);
                    if (yi < 0 || yi >= static_cast<long>(h)) continue;
                    for (std::size_t e = 0; e < window[2]; ++e) {
                      const long xi =
                          static_cast<long>(xo * stride[2] + e) - static_cast<long>(padding[2]);
                      if (xi < 0 || xi >= static_cast<long>(w)) continue;
                      dst[(zi * h + yi) * w + xi] += g[q] / wvol;
                    }
                  }
                }
              }
        }
      });
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw Error("dropout: p must be in [0, 1)");
  if (p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = keep(rng) ? s : 0.0;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

}  // namespace volab::ops
