#pragma once

// Test-only helpers: random inputs and brute-force reference computations.
// Nothing here calls into the code under test beyond constructing tensors.

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "volab/tensor.hpp"

namespace volab::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0, bool requires_grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = u(rng);
  return Tensor(shape, std::move(data), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Direct nested-loop 3-D convolution (cross-correlation), zero padding.
inline std::vector<double> naive_conv3d(const Tensor& x, const Tensor& k, std::size_t s0,
                                        std::size_t s1, std::size_t s2, std::size_t p0,
                                        std::size_t p1, std::size_t p2) {
  const long N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const long O = k.dim(0), KD = k.dim(2), KH = k.dim(3), KW = k.dim(4);
  const long OD = (D + 2 * p0 - KD) / s0 + 1, OH = (H + 2 * p1 - KH) / s1 + 1,
             OW = (W + 2 * p2 - KW) / s2 + 1;
  std::vector<double> out(N * O * OD * OH * OW, 0.0);
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < O; ++o)
      for (long z = 0; z < OD; ++z)
        for (long y = 0; y < OH; ++y)
          for (long xo = 0; xo < OW; ++xo) {
            double acc = 0.0;
            for (long c = 0; c < C; ++c)
              for (long a = 0; a < KD; ++a)
                for (long b = 0; b < KH; ++b)
                  for (long e = 0; e < KW; ++e) {
                    const long zi = z * s0 + a - p0, yi = y * s1 + b - p1, xi = xo * s2 + e - p2;
                    if (zi < 0 || zi >= D || yi < 0 || yi >= H || xi < 0 || xi >= W) continue;
                    acc += x[(((n * C + c) * D + zi) * H + yi) * W + xi] *
                           k[(((o * C + c) * KD + a) * KH + b) * KW + e];
                  }
            out[(((n * O + o) * OD + z) * OH + y) * OW + xo] = acc;
          }
  return out;
}

// Direct window reduction without padding.
inline std::vector<double> naive_pool3d(const Tensor& x, bool is_max, long w0, long w1, long w2,
                                        long s0, long s1, long s2) {
  const long N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const long OD = (D - w0) / s0 + 1, OH = (H - w1) / s1 + 1, OW = (W - w2) / s2 + 1;
  std::vector<double> out;
  for (long nc = 0; nc < N * C; ++nc)
    for (long z = 0; z < OD; ++z)
      for (long y = 0; y < OH; ++y)
        for (long xo = 0; xo < OW; ++xo) {
          double acc = is_max ? -std::numeric_limits<double>::infinity() : 0.0;
          for (long a = 0; a < w0; ++a)
            for (long b = 0; b < w1; ++b)
              for (long e = 0; e < w2; ++e) {
                const double v = x[((nc * D + z * s0 + a) * H + y * s1 + b) * W + xo * s2 + e];
                acc = is_max ? std::max(acc, v) : acc + v;
              }
          out.push_back(is_max ? acc : acc / static_cast<double>(w0 * w1 * w2));
        }
  return out;
}

}  // namespace volab::testing

namespace volab::testing {

// Direct pre-norm transformer block on one sample: x [L][D] flattened,
// neighbors(q) lists keys visible to query q, bias(q, k, h) is added to the
// scaled score. Weight matrices are row-major [in][out].
struct NaiveBlock {
  std::vector<double> ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

inline std::vector<double> naive_layer_norm(const std::vector<double>& x, std::size_t D,
                                            const std::vector<double>& g, const std::vector<double>& b) {
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < x.size() / D; ++r) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < D; ++i) m += x[r * D + i];
    m /= D;
    for (std::size_t i = 0; i < D; ++i) v += (x[r * D + i] - m) * (x[r * D + i] - m);
    v /= D;
    for (std::size_t i = 0; i < D; ++i) out[r * D + i] = (x[r * D + i] - m) / std::sqrt(v + 1e-5) * g[i] + b[i];
  }
  return out;
}

inline std::vector<double> naive_affine(const std::vector<double>& x, std::size_t in, std::size_t out,
                                        const std::vector<double>& w, const std::vector<double>& b) {
  const std::size_t rows = x.size() / in;
  std::vector<double> y(rows * out);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = b.empty() ? 0.0 : b[o];
      for (std::size_t i = 0; i < in; ++i) acc += x[r * in + i] * w[i * out + o];
      y[r * out + o] = acc;
    }
  return y;
}

template <class Neighbors, class Bias>
std::vector<double> naive_block(const std::vector<double>& x, std::size_t L, std::size_t D, std::size_t H,
                                const NaiveBlock& w, Neighbors neighbors, Bias bias) {
  const std::size_t dh = D / H;
  const auto h = naive_layer_norm(x, D, w.ln1_g, w.ln1_b);
  const auto qkv = naive_affine(h, D, 3 * D, w.qkv_w, w.qkv_b);
  std::vector<double> ctx(L * D, 0.0);
  for (std::size_t hh = 0; hh < H; ++hh)
    for (std::size_t q = 0; q < L; ++q) {
      const std::vector<std::size_t> keys = neighbors(q);
      std::vector<double> s(keys.size());
      double mx = -1e300;
      for (std::size_t j = 0; j < keys.size(); ++j) {
        double dot = 0;
        for (std::size_t d = 0; d < dh; ++d) dot += qkv[q * 3 * D + hh * dh + d] * qkv[keys[j] * 3 * D + D + hh * dh + d];
        s[j] = dot / std::sqrt(double(dh)) + bias(q, keys[j], hh);
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (double& v : s) z += (v = std::exp(v - mx));
      for (std::size_t j = 0; j < keys.size(); ++j)
        for (std::size_t d = 0; d < dh; ++d)
          ctx[q * D + hh * dh + d] += s[j] / z * qkv[keys[j] * 3 * D + 2 * D + hh * dh + d];
    }
  const auto proj = naive_affine(ctx, D, D, w.proj_w, w.proj_b);
  std::vector<double> x1(L * D);
  for (std::size_t i = 0; i < L * D; ++i) x1[i] = x[i] + proj[i];
  const auto h2 = naive_layer_norm(x1, D, w.ln2_g, w.ln2_b);
  auto f = naive_affine(h2, D, w.fc1_b.size(), w.fc1_w, w.fc1_b);
  for (double& v : f) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  const auto f2 = naive_affine(f, w.fc1_b.size(), D, w.fc2_w, w.fc2_b);
  for (std::size_t i = 0; i < L * D; ++i) x1[i] += f2[i];
  return x1;
}

}  // namespace volab::testing
