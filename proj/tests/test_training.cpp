#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "volab/error.hpp"
#include "volab/phantom.hpp"
#include "volab/training.hpp"

using namespace volab;
using namespace volab::testing;

namespace {

TrainConfig quiet_config() {
  TrainConfig c = desk_train_config();
  c.augment = false;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("mse loss and its gradient") {
  CHECK(mse_loss(Tensor({3}, {0.1, 0.5, 0.9}), Tensor({3}, {0.1, 0.5, 0.9})).item() == 0.0);
  CHECK(mse_loss(Tensor({2}, {0.0, 1.0}), Tensor({2}, {1.0, 0.0})).item() == 1.0);
  CHECK_THROWS_AS(mse_loss(Tensor({2}, {0.0, 1.0}), Tensor({3}, {1.0, 0.0, 0.0})), ShapeError);
  CHECK_THROWS_AS(mse_loss(Tensor({0}, std::vector<double>{}), Tensor({0}, std::vector<double>{})), ShapeError);

  std::mt19937_64 rng(1);
  const Tensor pred = random_tensor({7}, rng), target = random_tensor({7}, rng);
  // Analytic 2(p - t)/N against the tape.
  PrecisionScope f64(Precision::Float64);
  const Tensor leaf = pred.as_leaf();
  Tape tape;
  Tensor loss;
  {
    Tape::Scope s(tape);
    loss = mse_loss(leaf, target);
  }
  const Tensor g = backward(tape, loss).of(leaf);
  for (std::size_t i = 0; i < 7; ++i) CHECK(g[i] == doctest::Approx(2.0 * (pred[i] - target[i]) / 7.0).epsilon(1e-12));
  CHECK(grad_check([&](const Tensor& p) { return mse_loss(p, target); }, pred) < 1e-7);
}

TEST_CASE("adamw update rule") {
  PrecisionScope f64(Precision::Float64);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  {
    NamedTensors p{{"w", Tensor({3}, {1.0, -2.0, 3.0}, true)}};
    AdamState st;
    adamw_step(p, {{"w", Tensor::zeros({3})}}, st, 0.1, cfg);
    CHECK(p.at("w").values() == std::vector<double>{1.0, -2.0, 3.0});
  }
  {
    // First step: m_hat / sqrt(v_hat) = g / |g| = 1.
    TrainConfig c = cfg;
    c.adam_eps = 1e-300;
    NamedTensors p{{"w", Tensor({1}, {1.0}, true)}};
    AdamState st;
    adamw_step(p, {{"w", Tensor({1}, {1.0})}}, st, 0.1, c);
    CHECK(p.at("w").item() == doctest::Approx(0.9).epsilon(1e-14));
  }
  {
    // Decoupled decay alone: w <- w (1 - lr wd).
    TrainConfig c = cfg;
    c.weight_decay = 0.1;
    NamedTensors p{{"w", Tensor({1}, {2.0}, true)}};
    AdamState st;
    adamw_step(p, {}, st, 0.1, c);
    CHECK(p.at("w").item() == doctest::Approx(2.0 * 0.99).epsilon(1e-14));
  }
  {
    // Identical parameters with identical gradients stay identical, and a
    // multi-step run matches a scalar reimplementation.
    TrainConfig c = cfg;
    c.weight_decay = 0.05;
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n;
    NamedTensors p{{"a", Tensor({1}, {0.7}, true)}, {"b", Tensor({1}, {0.7}, true)}};
    AdamState st;
    double w = 0.7, m = 0.0, v = 0.0;
    for (int t = 1; t <= 20; ++t) {
      const double g = n(rng), lr = 0.01 * t;
      adamw_step(p, {{"a", Tensor({1}, {g})}, {"b", Tensor({1}, {g})}}, st, lr, c);
      w -= lr * 0.05 * w;
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      w -= lr * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    }
    CHECK(p.at("a").item() == p.at("b").item());
    CHECK(p.at("a").item() == doctest::Approx(w).epsilon(1e-12));
  }
  NamedTensors p{{"w", Tensor({1}, {1.0}, true)}};
  AdamState st;
  CHECK_THROWS_AS(adamw_step(p, {{"w", Tensor({2}, {1.0, 1.0})}}, st, 0.1, cfg), ShapeError);
  CHECK_THROWS_AS(adamw_step(p, {{"v", Tensor({1}, {1.0})}}, st, 0.1, cfg), DataError);
}

TEST_CASE("cosine learning-rate schedule") {
  CHECK(cosine_lr(0, 100, 1e-3, 1e-5) == doctest::Approx(1e-3));
  CHECK(cosine_lr(100, 100, 1e-3, 1e-5) == doctest::Approx(1e-5));
  CHECK(cosine_lr(50, 100, 1e-3, 1e-5) == doctest::Approx((1e-3 + 1e-5) / 2));
  double prev = 1.0;
  for (std::size_t s = 0; s <= 100; ++s) {
    const double lr = cosine_lr(s, 100, 1e-3, 1e-5);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK_THROWS_AS(cosine_lr(0, 0, 1e-3, 1e-5), DataError);
  CHECK_THROWS_AS(cosine_lr(101, 100, 1e-3, 1e-5), DataError);
  // Warmup: linear ramp, then the cosine restarts from lr_max.
  CHECK(warmup_cosine_lr(0, 4, 104, 1e-3, 1e-5) == doctest::Approx(2.5e-4));
  CHECK(warmup_cosine_lr(3, 4, 104, 1e-3, 1e-5) == doctest::Approx(1e-3));
  CHECK(warmup_cosine_lr(4, 4, 104, 1e-3, 1e-5) == doctest::Approx(1e-3));
  CHECK(warmup_cosine_lr(54, 4, 104, 1e-3, 1e-5) == doctest::Approx((1e-3 + 1e-5) / 2));
  for (std::size_t s = 0; s <= 100; ++s) CHECK(warmup_cosine_lr(s, 0, 100, 1e-3, 1e-5) == cosine_lr(s, 100, 1e-3, 1e-5));
  CHECK_THROWS_AS(warmup_cosine_lr(0, 10, 10, 1e-3, 1e-5), DataError);
}

TEST_CASE("early stopping traces") {
  const EarlyStopConfig rule{0.001, 3};
  const std::vector<double> stall{0.50, 0.4995, 0.4991, 0.4989, 0.3, 0.2};
  CHECK(early_stop_epoch(stall, rule) == 4);
  const std::vector<double> improving{0.5, 0.4, 0.3, 0.2, 0.1, 0.05};
  CHECK(early_stop_epoch(improving, rule) == 6);
  // The counter resets after a real improvement.
  const std::vector<double> reset{1.0, 0.9, 0.8995, 0.8993, 0.7, 0.6999, 0.6998, 0.6997, 0.1};
  CHECK(early_stop_epoch(reset, rule) == 8);
  // A worse epoch is not an improvement either; best-so-far stays at 0.4.
  const std::vector<double> worse{0.4, 0.6, 0.399, 0.3995};
  CHECK(early_stop_epoch(worse, rule) == 4);
  // Never before patience + 1 epochs, whatever the trace.
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> h(10);
    for (double& v : h) v = u(rng);
    const std::size_t pat = 1 + t % 4;
    CHECK(early_stop_epoch(h, {0.001, pat}) >= std::min<std::size_t>(pat + 1, h.size()));
  }
  EarlyStopping es(rule);
  for (double v : stall) es.update(v);
  CHECK(es.best_epoch() == 6);
  CHECK_THROWS_AS(es.update(std::nan("")), NumericError);
}

TEST_CASE("train config JSON and validation") {
  TrainConfig c = desk_train_config();
  c.seed = 99;
  c.early_stop.patience = 5;
  const TrainConfig r = train_config_from_json(train_config_to_json(c));
  CHECK(train_config_to_json(r) == train_config_to_json(c));
  const TrainConfig paper;
  CHECK(paper.beta1 == 0.9);
  CHECK(paper.beta2 == 0.999);
  CHECK(paper.physical_batch * paper.accumulation_steps == 128);
  CHECK(paper.early_stop.min_delta == 0.001);
  CHECK(paper.early_stop.patience == 3);
  auto j = train_config_to_json(c);
  j["early_stop"]["patience"] = 0;
  CHECK_THROWS_AS(train_config_from_json(j), DataError);
  j = train_config_to_json(c);
  j["lr_max"] = -1.0;
  CHECK_THROWS_AS(train_config_from_json(j), DataError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json::parse(R"({"betas": [0.9]})")), DataError);
}

TEST_CASE("gradient accumulation matches the large batch") {
  PrecisionScope f64(Precision::Float64);
  const Cohort c = small_cohort(16, 5);
  const std::span<const Example> train(c.examples.data(), 16);
  ModelConfig mc = preset_config(Family::Vit, 3, Scale::Desk);
  TrainConfig big = quiet_config();
  big.max_epochs = 2;
  big.lr_min = big.lr_max;
  big.physical_batch = 8;
  big.accumulation_steps = 1;
  TrainConfig small = big;
  small.physical_batch = 2;
  small.accumulation_steps = 4;
  auto a = build_model(mc, 1), b = build_model(mc, 1);
  train_fold(*a, train, train.subspan(0, 4), big);
  train_fold(*b, train, train.subspan(0, 4), small);
  double worst = 0.0;
  for (const auto& [name, t] : a->parameters())
    worst = std::max(worst, max_abs_diff(t.data(), b->parameters().at(name).data()));
  CHECK(worst < 1e-5);
  // Uneven tail micro-batch: 16 = 3 + 3 + 2 per step of 8 with batch 3.
  TrainConfig odd = big;
  odd.physical_batch = 3;
  odd.accumulation_steps = 3;
  odd.max_epochs = 1;
  big.max_epochs = 1;
  // 3 x 3 = 9 per step: steps cover samples [0, 9) and [9, 16), unlike 8 + 8.
  auto d = build_model(mc, 1), e = build_model(mc, 1);
  TrainConfig nine = big;
  nine.physical_batch = 9;
  train_fold(*d, train, train.subspan(0, 4), odd);
  train_fold(*e, train, train.subspan(0, 4), nine);
  worst = 0.0;
  for (const auto& [name, t] : d->parameters())
    worst = std::max(worst, max_abs_diff(t.data(), e->parameters().at(name).data()));
  CHECK(worst < 1e-5);
}

TEST_CASE("checkpoint is the argmin of validation MSE and the model holds it") {
  const Cohort c = small_cohort(12, 8);
  const std::span<const Example> all(c.examples);
  TrainConfig cfg = quiet_config();
  cfg.max_epochs = 5;
  cfg.early_stop.patience = 10;
  auto m = build_model(preset_config(Family::Cnn, 3, Scale::Desk), 2);
  std::size_t calls = 0;
  const FoldResult r = train_fold(*m, all.subspan(0, 8), all.subspan(8), cfg, [&](const EpochRecord&) { ++calls; });
  REQUIRE(r.history.size() == 5);
  CHECK(calls == 5);
  CHECK_FALSE(r.stopped_early);
  const auto best = std::min_element(r.history.begin(), r.history.end(),
                                     [](const auto& x, const auto& y) { return x.val_mse < y.val_mse; });
  CHECK(r.best.epoch == best->epoch);
  CHECK(r.best.val_mse == best->val_mse);
  for (const auto& [name, t] : m->state()) CHECK(t.values() == r.best.state.at(name).values());
  // The restored model reproduces the recorded validation MSE.
  const auto vp = predict(*m, all.subspan(8));
  double mse = 0.0;
  for (std::size_t i = 0; i < vp.size(); ++i) mse += std::pow(vp[i] - c.examples[8 + i].target, 2) / vp.size();
  CHECK(mse == doctest::Approx(r.best.val_mse).epsilon(1e-12));

  // Checkpoint files round-trip to the same predictions.
  const auto dir = std::filesystem::temp_directory_path() / "volab_test_ckpt";
  std::filesystem::create_directories(dir);
  save_model_checkpoint(dir / "fold0.vlck", m->config(), r.best);
  Checkpoint meta;
  const auto loaded = load_model_checkpoint(dir / "fold0.vlck", &meta);
  CHECK(meta.epoch == r.best.epoch);
  CHECK(predict(*loaded, all.subspan(8)) == vp);
  write_history_csv(dir / "history.csv", r.history);
  CHECK(read_lines(dir / "history.csv").size() == 6);
  CHECK(read_lines(dir / "history.csv")[0] == "epoch,train_mse,val_mse,lr");
  std::filesystem::remove_all(dir);
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  Cohort c = small_cohort(4, 1);
  c.examples[1].target = std::nan("");
  auto m = build_model(preset_config(Family::Cnn, 3, Scale::Desk), 2);
  const std::span<const Example> all(c.examples);
  try {
    train_fold(*m, all, all, quiet_config());
    FAIL("expected a NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
  }
}

TEST_CASE("training loss decreases on a separable phantom set for every family") {
  const Cohort c = small_cohort(20, 12);
  const std::span<const Example> all(c.examples);
  for (Family f : {Family::Cnn, Family::HybridLstm, Family::HybridTransformer, Family::Vit, Family::Swin}) {
    ModelConfig mc = preset_config(f, 3, Scale::Desk);
    mc.agg_dropout = 0.0;
    TrainConfig cfg = quiet_config();
    cfg.physical_batch = 20;
    cfg.accumulation_steps = 1;
    cfg.max_epochs = 6;
    cfg.lr_max = cfg.lr_min = 1e-4;
    cfg.early_stop.patience = 100;
    auto m = build_model(mc, 7);
    const FoldResult r = train_fold(*m, all, all.subspan(0, 4), cfg);
    INFO(family_name(f));
    for (std::size_t e = 2; e < r.history.size(); ++e) CHECK(r.history[e].train_mse < r.history[e - 1].train_mse);
  }
}

TEST_CASE("cross validation partitions records and is deterministic") {
  const Cohort c = small_cohort(20, 3);
  TrainConfig cfg = desk_train_config();
  cfg.max_epochs = 1;
  cfg.seed = 11;
  const ModelConfig mc = preset_config(Family::Cnn, 3, Scale::Desk);
  std::vector<FoldRun> runs;
  const CvResult r = cross_validate(c.records, c.examples, mc, cfg, {}, [&](const FoldRun& run, const Model&) {
    runs.push_back(run);
  });
  REQUIRE(r.predictions.size() == 20);
  for (std::size_t i = 0; i < 20; ++i) CHECK(r.predictions[i].record == i);
  for (const auto& run : runs) {
    std::set<std::string> tr, va, te;
    for (auto i : run.train) tr.insert(c.records[i].patient_id);
    for (auto i : run.val) va.insert(c.records[i].patient_id);
    for (auto i : run.test) te.insert(c.records[i].patient_id);
    for (const auto& p : te) CHECK((tr.count(p) == 0 && va.count(p) == 0));
    for (const auto& p : va) CHECK(tr.count(p) == 0);
    CHECK(run.train.size() + run.val.size() + run.test.size() == 20);
    CHECK_FALSE(run.val.empty());
  }
  const CvResult again = cross_validate(c.records, c.examples, mc, cfg);
  for (std::size_t i = 0; i < 20; ++i) CHECK(again.predictions[i].pred == r.predictions[i].pred);

  CvOptions one;
  one.only_fold = 2;
  const CvResult single = cross_validate(c.records, c.examples, mc, cfg, one);
  REQUIRE(single.folds.size() == 1);
  CHECK(single.folds[0].fold == 2);
  for (const auto& p : single.predictions) CHECK(p.pred == r.predictions[p.record].pred);

  const auto path = std::filesystem::temp_directory_path() / "volab_test_preds.csv";
  write_predictions_csv(path, r.predictions);
  const auto back = read_predictions_csv(path);
  REQUIRE(back.size() == 20);
  for (std::size_t i = 0; i < 20; ++i) CHECK(back[i].pred == r.predictions[i].pred);
  std::filesystem::remove(path);
}
