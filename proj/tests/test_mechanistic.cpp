#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "volab/error.hpp"
#include "volab/mechanistic.hpp"
#include "volab/nn.hpp"

using namespace volab;
using namespace volab::testing;
using nn::Index3;

namespace {

ActivationDump dump(const std::string& id, const Eigen::MatrixXd& m) {
  ActivationDump d{id, static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()), {}};
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) d.data.push_back(static_cast<float>(m(i, j)));
  return d;
}

// Direct feature-space form of the centred alignment, in double.
double cka_direct(Eigen::MatrixXd x, Eigen::MatrixXd y) {
  x.rowwise() -= x.colwise().mean();
  y.rowwise() -= y.colwise().mean();
  const double xy = (x.transpose() * y).squaredNorm();
  return xy / ((x.transpose() * x).norm() * (y.transpose() * y).norm());
}

Eigen::MatrixXd gaussian(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Eigen::MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

// Swin reachability straight from the attention masks: each token carries
// the set of patch-embedding tokens it can see.
std::array<std::size_t, 3> swin_reach_extent(const ModelConfig& c, std::size_t stages) {
  const auto st = swin_stages(c);
  Index3 g0{};
  for (int a = 0; a < 3; ++a) g0[a] = (c.input_shape[a] + c.patch[a] - 1) / c.patch[a];
  const std::size_t L0 = g0[0] * g0[1] * g0[2];
  std::vector<std::vector<char>> reach(L0, std::vector<char>(L0, 0));
  for (std::size_t t = 0; t < L0; ++t) reach[t][t] = 1;
  Index3 g = g0;
  for (std::size_t s = 0; s < stages; ++s) {
    if (s > 0) {
      const Index3 ng = st[s].grid;
      std::vector<std::vector<char>> next(ng[0] * ng[1] * ng[2], std::vector<char>(L0, 0));
      for (std::size_t t = 0; t < reach.size(); ++t) {
        const Index3 ct = coord(t, g);
        Index3 p{};
        for (int a = 0; a < 3; ++a) p[a] = g[a] > 1 ? ct[a] / 2 : ct[a];
        auto& dst = next[(p[0] * ng[1] + p[1]) * ng[2] + p[2]];
        for (std::size_t k = 0; k < L0; ++k) dst[k] |= reach[t][k];
      }
      reach.swap(next);
      g = ng;
    }
    const Index3 w = st[s].window;
    Index3 shift{};
    for (int a = 0; a < 3; ++a) shift[a] = g[a] > w[a] ? w[a] / 2 : 0;
    for (std::size_t b = 0; b < c.stage_depths[s]; ++b) {
      const auto plan = nn::window_partition_shift(g, w, b % 2 ? shift : Index3{0, 0, 0}, c.pad_policy);
      const std::size_t T = plan.window_tokens;
      auto next = reach;
      for (std::size_t win = 0; win < plan.num_windows; ++win)
        for (std::size_t q = 0; q < T; ++q) {
          const std::size_t tq = plan.slot_token[win * T + q];
          if (tq == nn::WindowPlan::kPad) continue;
          for (std::size_t k = 0; k < T; ++k) {
            const std::size_t tk = plan.slot_token[win * T + k];
            if (tk == nn::WindowPlan::kPad || std::isinf(plan.mask[(win * T + q) * T + k])) continue;
            for (std::size_t v = 0; v < L0; ++v) next[tq][v] |= reach[tk][v];
          }
        }
      reach.swap(next);
    }
  }
  std::array<std::size_t, 3> ext{};
  for (const auto& r : reach)
    for (int a = 0; a < 3; ++a) {
      std::size_t lo = SIZE_MAX, hi = 0;
      for (std::size_t v = 0; v < L0; ++v)
        if (r[v]) {
          const std::size_t pc = coord(v, g0)[a];
          lo = std::min(lo, pc * c.patch[a]);
          hi = std::max(hi, std::min(c.input_shape[a] - 1, pc * c.patch[a] + c.patch[a] - 1));
        }
      ext[a] = std::max(ext[a], hi - lo + 1);
    }
  return ext;
}

}  // namespace

TEST_CASE("erf from a gradient: threshold, mask, radius") {
  const Dims3 dims{4, 5, 6};
  const std::size_t n = 120;
  // Uniform gradient: everything is in the mask; radius is the half-diagonal.
  const ErfMap u = erf_from_gradient(std::vector<double>(n, 0.3), dims);
  CHECK(u.erf_size == n);
  CHECK(u.erf_radius == doctest::Approx(0.5 * std::sqrt(9.0 + 16.0 + 25.0)));
  CHECK(u.centroid[0] == doctest::Approx(1.5));
  CHECK(u.centroid[1] == doctest::Approx(2.0));
  CHECK(u.centroid[2] == doctest::Approx(2.5));

  // One weight 1.0, the rest 0.001: the mask is that voxel alone.
  std::vector<double> g(n, 0.001);
  g[37] = -1.0;
  const ErfMap one = erf_from_gradient(g, dims);
  CHECK(one.erf_size == 1);
  CHECK(one.mask[37] == 1);
  CHECK(one.erf_radius == 0.0);
  // Strict threshold: exactly 1% of the peak stays out.
  g.assign(n, 0.0);
  g[0] = 1.0;
  g[1] = 0.01;
  g[2] = 0.0100001;
  CHECK(erf_from_gradient(g, dims).erf_size == 2);
  CHECK_THROWS_AS(erf_from_gradient(std::vector<double>(n, 0.0), dims), NumericError);
  CHECK_THROWS_AS(erf_from_gradient(std::vector<double>(5, 1.0), dims), ShapeError);

  // Monotone in the threshold; radius translation-equivariant.
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  std::vector<double> r(n);
  for (double& v : r) v = std::pow(ud(rng), 6);
  std::size_t prev = n + 1;
  for (double th : {0.0, 0.01, 0.05, 0.2, 0.5, 0.9}) {
    const ErfMap m = erf_from_gradient(r, dims, th);
    CHECK(m.erf_size <= prev);
    prev = m.erf_size;
  }
  std::vector<double> blob(n, 0.0), moved(n, 0.0);
  for (std::size_t z = 0; z < 2; ++z)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 2; ++x) {
        const double w = 1.0 + z + 0.5 * y + 0.25 * x;
        blob[(z * 5 + y) * 6 + x] = w;
        moved[((z + 2) * 5 + y + 1) * 6 + x + 3] = w;
      }
  const ErfMap a = erf_from_gradient(blob, dims), b = erf_from_gradient(moved, dims);
  CHECK(a.erf_radius == doctest::Approx(b.erf_radius).epsilon(1e-12));
  CHECK(b.centroid[0] - a.centroid[0] == doctest::Approx(2.0));
  CHECK(b.centroid[2] - a.centroid[2] == doctest::Approx(3.0));
}

TEST_CASE("erf gradients match finite differences on a small CNN") {
  PrecisionScope f64(Precision::Float64);
  ModelConfig c = preset_config(Family::Cnn, 3, Scale::Desk);
  c.input_shape = {8, 8, 8};
  c.widths = {4, 4, 4, 4};
  const auto m = build_model(c, 3);
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({1, 1, 8, 8, 8}, rng);
  for (const std::string tap : {"output", "stage2"}) {
    const ErfMap e = erf_map(*m, x, tap);
    auto f = [&](const Tensor& in) {
      ForwardOptions o;
      o.keep_stages = true;
      const auto r = m->forward(in, o);
      if (tap == "output") return r.prediction[0];
      const Tensor& v = r.stages[1].value;
      const std::size_t d = v.dim(2), h = v.dim(3), w = v.dim(4);
      double s = 0.0;
      for (std::size_t ch = 0; ch < v.dim(1); ++ch) s += v[((ch * d + d / 2) * h + h / 2) * w + w / 2];
      return s;
    };
    double worst = 0.0;
    for (std::size_t i = 0; i < 512; i += 7) {
      std::vector<double> p = x.values(), q = x.values();
      p[i] += 1e-6;
      q[i] -= 1e-6;
      const double num = std::abs((f(Tensor(x.shape(), p)) - f(Tensor(x.shape(), q))) / 2e-6);
      const double ana = e.gradient[i];
      worst = std::max(worst, std::abs(num - ana) / std::max({num, ana, 1e-6}));
    }
    INFO(tap);
    CHECK(worst < 1e-3);
  }
  CHECK_THROWS_AS(erf_map(*m, x, "stage9"), DataError);
  CHECK_THROWS_AS(erf_map(*m, random_tensor({2, 1, 8, 8, 8}, rng), "output"), ShapeError);
}

TEST_CASE("erf of a stage tap stays inside the theoretical field") {
  std::mt19937_64 rng(6);
  for (Family f : {Family::Cnn, Family::Swin, Family::HybridLstm}) {
    const ModelConfig c = preset_config(f, 3, Scale::Desk);
    const auto m = build_model(c, 2);
    const Tensor x = random_tensor({1, 1, 32, 32, 32}, rng);
    const std::string tap = f == Family::Swin ? "stage1" : "stage2";
    const ErfMap e = erf_map(*m, x, tap);
    const auto ext = theoretical_rf_extent(c, tap);
    for (std::size_t a = 0; a < 3; ++a) {
      std::size_t lo = 1000, hi = 0;
      for (std::size_t i = 0; i < e.mask.size(); ++i) {
        if (e.gradient[i] == 0.0) continue;
        const std::size_t v = a == 0 ? i / 1024 : a == 1 ? (i / 32) % 32 : i % 32;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      INFO(family_name(f), " axis ", a);
      CHECK(hi - lo + 1 <= ext[a]);
    }
  }
}

TEST_CASE("theoretical receptive fields") {
  ModelConfig c = preset_config(Family::Cnn, 3, Scale::Desk);
  c.input_shape = {64, 64, 64};
  c.stem_kernel = 3;
  c.stem_stride = 1;
  c.stem_pool = false;
  // Stem 3 -> one basic block of two 3x3 convs at stride 1 -> 7.
  c.strides = {1, 2, 2, 2};
  CHECK(theoretical_rf_extent(c, "stage1") == std::array<std::size_t, 3>{7, 7, 7});
  CHECK(theoretical_rf(c, "stage1") == 3.0);
  // Stride 2 in stage 2 doubles the jump of its second conv: 7 + 2 + 4 = 13.
  CHECK(theoretical_rf_extent(c, "stage2")[1] == 13);
  // Stride-2 stem (k 3): 3, then jumps of 2 -> 3 + 4 + 4 = 11.
  c.stem_stride = 2;
  CHECK(theoretical_rf_extent(c, "stage1")[2] == 11);
  // Clamped to the input.
  c.input_shape = {8, 8, 8};
  CHECK(theoretical_rf_extent(c, "stage4") == std::array<std::size_t, 3>{8, 8, 8});
  // Planar models never grow along depth.
  ModelConfig h = preset_config(Family::HybridLstm, 3, Scale::Desk);
  CHECK(theoretical_rf_extent(h, "stage4")[0] == 1);
  CHECK(theoretical_rf_extent(h, "aggregator")[0] == 32);

  // ViT: the full span from block 1; desk ViT block1 beats desk CNN stage 4.
  const ModelConfig v = preset_config(Family::Vit, 3, Scale::Desk);
  CHECK(theoretical_rf(v, "block1") == doctest::Approx(0.5 * std::sqrt(3.0 * 31 * 31)));
  CHECK(theoretical_rf(v, "block1") >= theoretical_rf(preset_config(Family::Cnn, 3, Scale::Desk), "stage4"));
  CHECK_THROWS_AS(theoretical_rf(v, "stage1"), DataError);
  CHECK(table4_stages(preset_config(Family::Vit, 3, Scale::Paper)) ==
        std::vector<std::string>{"block3", "block6", "block9", "block12"});
  CHECK(table4_stages(v) == std::vector<std::string>{"block1", "block2", "block3", "block4"});
}

TEST_CASE("swin receptive field matches mask reachability") {
  // Desk Swin: 4^3 windows, shift 2, merges between stages.
  const ModelConfig desk = preset_config(Family::Swin, 3, Scale::Desk);
  for (const char* s : {"patch_embed", "stage1", "stage2", "stage3", "stage4"}) {
    const std::size_t k = std::string(s) == "patch_embed" ? 0 : static_cast<std::size_t>(s[5] - '0');
    INFO(s);
    CHECK(theoretical_rf_extent(desk, s) == swin_reach_extent(desk, k));
  }
  CHECK(theoretical_rf_extent(desk, "patch_embed")[0] == 4);
  // Two blocks with shift 2 on an 8-token axis: a token sees up to 2 windows.
  CHECK(theoretical_rf_extent(desk, "stage1")[1] == 32);
  // Assorted shapes, windows and padding.
  std::mt19937_64 rng(4);
  for (int t = 0; t < 12; ++t) {
    ModelConfig c = desk;
    c.pad_policy = nn::PadPolicy::Pad;
    c.patch = {1 + rng() % 3, 1 + rng() % 3, 1 + rng() % 3};
    c.window = {2 + rng() % 3, 2 + rng() % 3, 2 + rng() % 2};
    c.input_shape = {6 + rng() % 14, 6 + rng() % 14, 6 + rng() % 10};
    c.stage_depths = {1 + rng() % 3, 1 + rng() % 2, 2, 1};
    for (std::size_t k = 0; k <= 3; ++k) {
      const std::string s = k == 0 ? "patch_embed" : "stage" + std::to_string(k);
      INFO(t, " ", s);
      CHECK(theoretical_rf_extent(c, s) == swin_reach_extent(c, k));
    }
  }
}

TEST_CASE("attention distances against a brute-force top-k") {
  AttentionRecord two;
  two.heads = 1;
  two.tokens = 2;
  two.weights = {0.2, 0.8, 0.9, 0.1};
  two.centroids = {{0, 0, 0}, {0, 3, 0}};
  CHECK(attention_distances(two) == std::vector<double>{3.0, 3.0});

  AttentionRecord lone;
  lone.heads = 1;
  lone.tokens = 2;
  lone.has_cls = true;
  lone.weights = {0.5, 0.5, 0.5, 0.5};
  lone.centroids = {{1, 1, 1}};
  CHECK(attention_distances(lone).empty());
  CHECK(attention_distances(lone, 5, true) == std::vector<double>{0.0});

  // Identity attention with self included: all zero.
  AttentionRecord id;
  id.heads = 2;
  id.tokens = 4;
  id.weights.assign(32, 0.0);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t q = 0; q < 4; ++q) id.weights[(h * 4 + q) * 4 + q] = 1.0;
  id.centroids = {{0, 0, 0}, {0, 0, 4}, {0, 4, 0}, {4, 0, 0}};
  for (double d : attention_distances(id, 1, true)) CHECK(d == 0.0);

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 60; ++trial) {
    AttentionRecord r;
    r.heads = 1 + trial % 3;
    r.has_cls = trial % 2;
    const std::size_t P = 6;
    r.tokens = P + r.has_cls;
    for (std::size_t i = 0; i < P; ++i) r.centroids.push_back({u(rng) * 10, u(rng) * 10, u(rng) * 10});
    r.weights.resize(r.heads * r.tokens * r.tokens);
    for (double& w : r.weights) w = std::floor(u(rng) * 4) / 4;  // ties
    const std::size_t k = 1 + trial % 7;
    const auto got = attention_distances(r, k);
    const auto expect = brute_topk_distances(r, k);
    REQUIRE(got.size() == expect.size());
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - expect[i]));
  }
  CHECK(worst < 1e-12);
  AttentionRecord broken = two;
  broken.centroids.pop_back();
  CHECK_THROWS_AS(attention_distances(broken), DataError);
}

TEST_CASE("distance summaries") {
  const DistanceStats s = summarize_distances({3.0, 25.0, 1.0, 30.0});
  CHECK(s.count == 4);
  CHECK(s.mean == 14.75);
  CHECK(s.median == 14.0);
  CHECK(s.max == 30.0);
  CHECK(s.pct_gt20 == 0.5);
  const double ss = 11.75 * 11.75 + 10.25 * 10.25 + 13.75 * 13.75 + 15.25 * 15.25;
  CHECK(s.sd == doctest::Approx(std::sqrt(ss / 3.0)));
  CHECK(summarize_distances({20.0}).pct_gt20 == 0.0);
  CHECK_THROWS_AS(summarize_distances({}), DataError);
  const std::vector<Table5Row> rows{{"vit", 3, "Healthy", s}};
  CHECK(table5_csv(rows).rfind("model,dim,bin,mean,sd,median,pct_gt20,max\nvit,3,Healthy,14.75,", 0) == 0);
}

TEST_CASE("cka properties") {
  std::mt19937_64 rng(10);
  const Eigen::MatrixXd x = gaussian(30, 12, rng);
  CHECK(std::abs(cka_pair(dump("x", x), dump("x", x)) - 1.0) < 1e-10);
  // Orthogonal transform and isotropic scaling.
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(12, 12, rng));
  const Eigen::MatrixXd q = qr.householderQ();
  const ActivationDump dx = dump("x", x);
  // Invariances hold to 1e-8 in double; the float dump path to float accuracy.
  CHECK(std::abs(linear_cka(x, x) - 1.0) < 1e-10);
  CHECK(std::abs(linear_cka(x, x * q) - 1.0) < 1e-8);
  CHECK(std::abs(linear_cka(x, -3.5 * x) - 1.0) < 1e-8);
  CHECK(std::abs(linear_cka(x, 1e-3 * x * q) - 1.0) < 1e-8);
  CHECK(std::abs(cka_direct(x, x * q) - 1.0) < 1e-10);
  CHECK(std::abs(cka_pair(dx, dump("xq", x * q)) - 1.0) < 1e-6);
  CHECK(std::abs(cka_pair(dx, dump("cx", 7.0 * x)) - 1.0) < 1e-6);
  // Gram and feature forms agree; invertible maps of full-rank X give 1.
  for (int t = 0; t < 20; ++t) {
    const Eigen::MatrixXd a = gaussian(25, 8, rng), b = gaussian(25, 5, rng);
    CHECK(cka_pair(dump("a", a), dump("b", b)) ==
          doctest::Approx(cka_direct(a.cast<float>().cast<double>(), b.cast<float>().cast<double>())).epsilon(1e-9));
    CHECK(linear_cka(a, b) == doctest::Approx(cka_direct(a, b)).epsilon(1e-12));
    const double v = cka_pair(dump("a", a), dump("b", b));
    CHECK((v >= 0.0 && v <= 1.0));
  }
  // Independent-feature null at N = 200, D = 50: the 99th percentile of 1000
  // null draws bounds a fresh draw, and that percentile is small.
  std::vector<double> null;
  for (int t = 0; t < 1000; ++t) null.push_back(cka_pair(dump("a", gaussian(200, 50, rng)), dump("b", gaussian(200, 50, rng))));
  std::sort(null.begin(), null.end());
  const double p99 = null[989];
  CHECK(p99 < 0.25);
  int above = 0;
  for (int t = 0; t < 20; ++t) above += cka_pair(dump("a", gaussian(200, 50, rng)), dump("b", gaussian(200, 50, rng))) > p99;
  CHECK(above <= 2);
  CHECK_THROWS_AS(cka_pair(dx, dump("z", gaussian(29, 12, rng))), DataError);
  CHECK_THROWS_AS(cka_pair(dx, dump("c", Eigen::MatrixXd::Ones(30, 4))), DataError);
}

TEST_CASE("cka matrices, fold averaging, dumps") {
  std::mt19937_64 rng(12);
  std::vector<std::vector<ActivationDump>> folds(2);
  for (auto& f : folds)
    for (const char* id : {"a", "b", "c"}) f.push_back(dump(id, gaussian(10, 4, rng)));
  std::vector<CkaMatrix> ms;
  for (const auto& f : folds) {
    const CkaMatrix m = cka_matrix(f, f);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(std::abs(m.at(i, i) - 1.0) < 1e-6);
      for (std::size_t j = 0; j < 3; ++j) CHECK(m.at(i, j) == m.at(j, i));
    }
    ms.push_back(m);
  }
  const CkaMatrix avg = average_cka(ms);
  for (std::size_t i = 0; i < 9; ++i) CHECK(avg.values[i] == doctest::Approx((ms[0].values[i] + ms[1].values[i]) / 2));
  CHECK(cka_csv(avg).rfind("row,a,b,c\na,1", 0) == 0);
  CkaMatrix other = ms[1];
  other.rows[0] = "z";
  const CkaMatrix mixed[2] = {ms[0], other};
  CHECK_THROWS_AS(average_cka(mixed), DataError);

  const auto path = std::filesystem::temp_directory_path() / "volab_test.admp";
  write_dumps(path, "cnn-fold0", folds[0]);
  std::string id;
  const auto back = read_dumps(path, &id);
  CHECK(id == "cnn-fold0");
  REQUIRE(back.size() == 3);
  CHECK(back[1].layer == "b");
  CHECK(back[1].data == folds[0][1].data);
  std::filesystem::remove(path);

  // Activations from a model: one dump per stage, N rows.
  const auto m = build_model(preset_config(Family::Vit, 3, Scale::Desk), 1);
  std::vector<Tensor> xs;
  for (int i = 0; i < 3; ++i) xs.push_back(random_tensor({1, 1, 32, 32, 32}, rng));
  const auto acts = collect_activations(*m, xs, "vit/");
  REQUIRE(acts.size() == 4);
  CHECK(acts[0].layer == "vit/block1");
  CHECK(acts[0].n == 3);
  CHECK(acts[0].d == 129 * 32);
  const CkaMatrix intra = cka_matrix(acts, acts);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(intra.at(i, i) - 1.0) < 1e-6);
}
