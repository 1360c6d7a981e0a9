#pragma once

// Brute-force references shared by the unit tests and the acceptance run.

#include <algorithm>
#include <functional>
#include <limits>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "support.hpp"
#include "volab/model.hpp"
#include "volab/nn.hpp"
#include "volab/ops.hpp"
#include "volab/phantom.hpp"
#include "volab/rng.hpp"
#include "volab/training.hpp"

namespace volab::testing {

using nn::Index3;

struct RandomBlock {
  nn::BlockWeights w;
  NaiveBlock naive;
  std::vector<double> rel;  // [table, heads]
};

inline RandomBlock random_block(std::size_t D, std::size_t ratio, std::mt19937_64& rng,
                                std::size_t rel_table = 0, std::size_t heads = 1) {
  RandomBlock b;
  auto t = [&](Shape s, double lo = -0.5, double hi = 0.5) { return random_tensor(s, rng, lo, hi); };
  b.w = {t({D}, 0.5, 1.5), t({D}), t({D, 3 * D}), t({3 * D}), t({D, D}), t({D}),
         t({D}, 0.5, 1.5), t({D}), t({D, ratio * D}), t({ratio * D}), t({ratio * D, D}), t({D}),
         std::nullopt};
  const auto& w = b.w;
  b.naive = {w.ln1_g.values(), w.ln1_b.values(), w.qkv_w.values(), w.qkv_b.values(),
             w.proj_w.values(), w.proj_b.values(), w.ln2_g.values(), w.ln2_b.values(),
             w.fc1_w.values(), w.fc1_b.values(), w.fc2_w.values(), w.fc2_b.values()};
  if (rel_table) {
    b.w.rel_bias = t({rel_table, heads});
    b.rel = b.w.rel_bias->values();
  }
  return b;
}

inline Index3 coord(std::size_t t, Index3 g) { return {t / (g[1] * g[2]), (t / g[2]) % g[1], t % g[2]}; }

// Neighborhoods of shifted windows taken directly in the unshifted layout:
// windows start at offset shift and are truncated at the grid edges.
inline std::vector<std::size_t> shifted_neighbors(std::size_t q, Index3 grid, Index3 w, Index3 s) {
  const Index3 cq = coord(q, grid);
  std::vector<std::size_t> out;
  const std::size_t L = grid[0] * grid[1] * grid[2];
  for (std::size_t k = 0; k < L; ++k) {
    const Index3 ck = coord(k, grid);
    bool same = true;
    for (int a = 0; a < 3; ++a) same = same && (cq[a] + w[a] - s[a]) / w[a] == (ck[a] + w[a] - s[a]) / w[a];
    if (same) out.push_back(k);
  }
  return out;
}

inline double shifted_window_case(Index3 grid, Index3 window, Index3 shift, std::size_t heads, std::size_t D,
                           std::mt19937_64& rng) {
  PrecisionScope f64(Precision::Float64);
  const std::size_t L = grid[0] * grid[1] * grid[2];
  const Tensor x = random_tensor({2, L, D}, rng);
  const RandomBlock b = random_block(D, 2, rng, nn::relative_position_table_size(window), heads);
  const nn::WindowPlan plan = nn::window_partition_shift(grid, window, shift);
  nn::AttentionOptions o;
  o.heads = heads;
  o.plan = &plan;
  const Tensor y = nn::attention_block(x, b.w, o).tokens;
  double worst = 0.0;
  for (std::size_t n = 0; n < 2; ++n) {
    std::vector<double> xs(x.values().begin() + n * L * D, x.values().begin() + (n + 1) * L * D);
    const auto ref = naive_block(
        xs, L, D, heads, b.naive, [&](std::size_t q) { return shifted_neighbors(q, grid, window, shift); },
        [&](std::size_t q, std::size_t k, std::size_t h) {
          const Index3 a = coord(q, grid), c = coord(k, grid);
          const long d0 = long(a[0]) - long(c[0]) + long(window[0]) - 1;
          const long d1 = long(a[1]) - long(c[1]) + long(window[1]) - 1;
          const long d2 = long(a[2]) - long(c[2]) + long(window[2]) - 1;
          const long idx = (d0 * (2 * long(window[1]) - 1) + d1) * (2 * long(window[2]) - 1) + d2;
          return b.rel[idx * heads + h];
        });
    for (std::size_t i = 0; i < L * D; ++i) worst = std::max(worst, std::abs(ref[i] - y[n * L * D + i]));
  }
  return worst;
}


// Gradient check through a whole model; parameters and input are leaves.
inline double model_grad_check(Model& m, const Tensor& x, bool training) {
  std::vector<std::string> names;
  std::vector<Tensor> inputs{x};
  for (const auto& [name, t] : m.parameters()) {
    names.push_back(name);
    inputs.push_back(t);
  }
  const NamedTensors saved = m.parameters();
  GradCheckOptions opt;
  // Small step: ReLU and max-pool kinks sit within 1e-5 of some activations.
  opt.eps = 1e-6;
  opt.abs_floor = 1e-6;
  opt.max_coords = 6;
  opt.seed = 1;
  const std::size_t N = x.dim(0);
  std::vector<double> tv(N);
  for (std::size_t i = 0; i < N; ++i) tv[i] = (i + 1.0) / (N + 1.0);
  const Tensor target({N}, tv);
  const double err = grad_check(
      [&](const std::vector<Tensor>& in) {
        for (std::size_t i = 0; i < names.size(); ++i) m.parameters()[names[i]] = in[i + 1];
        ForwardOptions o;
        o.training = training;
        const Tensor pred = m.forward(in[0], o).prediction;
        const Tensor d = ops::sub(pred, target);
        return ops::mean(ops::mul(d, d));
      },
      inputs, opt);
  m.parameters() = saved;
  return err;
}


inline double pair_count_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double hits = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1.0;
        hits += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return hits / pairs;
}

// Full sort of every query row; ties go to the lower token index.
inline std::vector<double> brute_topk_distances(const AttentionRecord& r, std::size_t k) {
  std::vector<double> out;
  const std::size_t off = r.has_cls;
  for (std::size_t h = 0; h < r.heads; ++h)
    for (std::size_t q = off; q < r.tokens; ++q) {
      std::vector<std::pair<double, std::size_t>> all;
      for (std::size_t j = off; j < r.tokens; ++j)
        if (j != q) all.push_back({-r.at(h, q, j), j});
      std::sort(all.begin(), all.end());
      for (std::size_t i = 0; i < std::min(k, all.size()); ++i) {
        const auto& a = r.centroids[q - off];
        const auto& b = r.centroids[all[i].second - off];
        out.push_back(std::hypot(a[0] - b[0], a[1] - b[1], a[2] - b[2]));
      }
    }
  return out;
}

// Finite-difference check of every differentiable primitive on random
// shapes; `report(name, max relative error)` per call.
inline void primitive_grad_sweep(std::mt19937_64& rng, int trials,
                                 const std::function<void(const std::string&, double)>& report) {
  GradCheckOptions opt;
  auto check = [&](const std::string& name, const std::function<Tensor(const std::vector<Tensor>&)>& f,
                   std::vector<Tensor> in) { report(name, grad_check(f, in, opt)); };
  std::uniform_int_distribution<int> dim(1, 4);
  for (int trial = 0; trial < trials; ++trial) {
    const std::size_t a = dim(rng), b = dim(rng), c = dim(rng) + 1;
    PrecisionScope f64(Precision::Float64);
    Tensor x = random_tensor({a, b, c}, rng);
    Tensor y = random_tensor({a, b, c}, rng);
    Tensor tail = random_tensor({b, c}, rng);
    Tensor w = random_tensor({c, 3}, rng);
    Tensor weights = random_tensor({a, b, c}, rng);
    auto dot = [weights](const Tensor& t) { return ops::sum(ops::mul(t, weights)); };
    auto dot_any = [&rng](const Tensor& t) {
      std::mt19937_64 local(t.numel());
      Tensor r = random_tensor(t.shape(), local);
      return ops::sum(ops::mul(t, r));
    };
    check("add", [&](auto& in) { return dot(ops::add(in[0], in[1])); }, {x, y});
    check("add_broadcast", [&](auto& in) { return dot(ops::add(in[0], in[1])); }, {x, tail});
    check("sub_broadcast", [&](auto& in) { return dot(ops::sub(in[0], in[1])); }, {x, tail});
    check("mul", [&](auto& in) { return dot(ops::mul(in[0], in[1])); }, {x, y});
    check("mul_broadcast", [&](auto& in) { return dot(ops::mul(in[0], in[1])); }, {x, tail});
    check("matmul", [&](auto& in) { return dot_any(ops::matmul(in[0], in[1])); }, {x, w});
    check("batched_matmul", [&](auto& in) {
      return dot_any(ops::matmul(in[0], ops::transpose(in[1], 1, 2)));
    }, {x, y});
    check("softmax_last", [&](auto& in) { return dot(ops::softmax(in[0], 2)); }, {x});
    check("softmax_first", [&](auto& in) { return dot(ops::softmax(in[0], 0)); }, {x});
    check("layer_norm", [&](auto& in) {
      return dot(ops::layer_norm(in[0], in[1], in[2]));
    }, {ops::scale(x, 3.0), random_tensor({c}, rng), random_tensor({c}, rng)});
    check("gelu", [&](auto& in) { return dot(ops::gelu(in[0])); }, {x});
    check("relu", [&](auto& in) { return dot(ops::relu(in[0])); }, {x});
    check("sigmoid", [&](auto& in) { return dot(ops::sigmoid(in[0])); }, {x});
    check("tanh", [&](auto& in) { return dot(ops::tanh(in[0])); }, {x});
    check("reshape", [&](auto& in) { return dot_any(ops::reshape(in[0], {a * b * c})); }, {x});
    check("permute", [&](auto& in) { return dot_any(ops::permute(in[0], {2, 0, 1})); }, {x});
    check("concat", [&](auto& in) {
      std::vector<Tensor> parts{in[0], in[1]};
      return dot_any(ops::concat(parts, 1));
    }, {x, y});
    check("slice", [&](auto& in) { return dot_any(ops::slice(in[0], 2, 1, c - 1)); }, {x});
    check("take", [&](auto& in) {
      std::vector<std::size_t> idx{a - 1, 0, a - 1};
      return dot_any(ops::take(in[0], idx));
    }, {x});
    check("mean", [&](auto& in) { return ops::mean(ops::mul(in[0], in[0])); }, {x});
    check("mean_axis", [&](auto& in) { return dot_any(ops::mean_axis(in[0], 1)); }, {x});
    std::vector<double> mask(a * b * c, 0.0);
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (i % c == 1) mask[i] = -std::numeric_limits<double>::infinity();
    }
    check("masked_softmax", [&](auto& in) { return dot(ops::masked_softmax(in[0], mask)); }, {x});

    Tensor vol = random_tensor({2, 2, a + 2, b + 2, c + 1}, rng);
    Tensor ker = random_tensor({3, 2, 2, 3, 2}, rng);
    Tensor bias = random_tensor({3}, rng);
    check("conv3d", [&](auto& in) {
      return dot_any(ops::conv3d(in[0], in[1], in[2], {1, 2, 1}, {1, 1, 0}));
    }, {vol, ker, bias});
    check("max_pool3d", [&](auto& in) {
      return dot_any(ops::pool3d(in[0], ops::PoolKind::Max, {2, 2, 2}, {1, 1, 1}));
    }, {vol});
    check("avg_pool3d", [&](auto& in) {
      return dot_any(ops::pool3d(in[0], ops::PoolKind::Avg, {2, 2, 1}, {2, 1, 1}, {1, 0, 0}));
    }, {vol});
    for (bool training : {true, false}) {
      ops::BatchNormStats stats(2);
      stats.running_mean = {0.3, -0.2};
      stats.running_var = {1.5, 0.7};
      check(training ? "batch_norm_train" : "batch_norm_eval", [&](auto& in) {
        ops::BatchNormStats local = stats;
        return dot_any(ops::batch_norm(in[0], in[1], in[2], local, training));
      }, {vol, random_tensor({2}, rng), random_tensor({2}, rng)});
    }
  }
}

struct Cohort {
  std::vector<CohortRecord> records;
  std::vector<Example> examples;
};

// Two eyes per patient; alternating healthy / strong anomaly patients.
inline Cohort small_cohort(std::size_t n, std::uint64_t seed) {
  Cohort c;
  for (std::size_t i = 0; i < n; ++i) {
    PhantomSpec s;
    s.seed = derive_seed(seed, i);
    s.anomaly_amplitude = (i / 2) % 2 == 0 ? 0.0 : 1.2;
    Phantom p = generate_phantom(s);
    c.records.push_back({"P" + std::to_string(i / 2), i % 2 ? "OS" : "OD", "", p.p_kc, {}, {}});
    c.examples.push_back({i, std::move(p.volume), p.p_kc});
  }
  return c;
}

}  // namespace volab::testing
