#include "volab/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "volab/error.hpp"
#include "volab/ops.hpp"
#include "volab/parallel.hpp"
#include "volab/rng.hpp"

namespace volab {

void TrainConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw DataError(std::string("train config: ") + what);
  };
  need(lr_max > 0.0 && std::isfinite(lr_max), "lr_max must be positive");
  need(lr_min >= 0.0 && lr_min <= lr_max, "lr_min must be in [0, lr_max]");
  need(weight_decay >= 0.0 && std::isfinite(weight_decay), "weight_decay must be >= 0");
  need(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must be in [0, 1)");
  need(adam_eps > 0.0, "adam_eps must be positive");
  need(physical_batch >= 1 && accumulation_steps >= 1 && max_epochs >= 1,
       "batch, accumulation and epochs must be positive");
  need(warmup_epochs < max_epochs, "warmup_epochs must be below max_epochs");
  need(early_stop.min_delta >= 0.0, "min_delta must be >= 0");
  need(early_stop.patience >= 1, "patience must be >= 1");
  need(val_fraction > 0.0 && val_fraction < 1.0, "val_fraction must be in (0, 1)");
  augmentation.validate();
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("train config: expected an object");
  TrainConfig c;
  try {
    c.lr_max = j.value("lr_max", c.lr_max);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("betas")) {
      const auto b = j.at("betas").get<std::vector<double>>();
      if (b.size() != 2) throw DataError("train config: betas needs two values");
      c.beta1 = b[0];
      c.beta2 = b[1];
    }
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.physical_batch = j.value("physical_batch", c.physical_batch);
    c.accumulation_steps = j.value("accumulation_steps", c.accumulation_steps);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    if (j.contains("early_stop")) {
      const auto& e = j.at("early_stop");
      c.early_stop.min_delta = e.value("min_delta", c.early_stop.min_delta);
      c.early_stop.patience = e.value("patience", c.early_stop.patience);
    }
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.augment = j.value("augment", c.augment);
    if (j.contains("augmentation")) c.augmentation = augment_config_from_json(j.at("augmentation"));
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"lr_max", c.lr_max},
          {"lr_min", c.lr_min},
          {"weight_decay", c.weight_decay},
          {"betas", {c.beta1, c.beta2}},
          {"adam_eps", c.adam_eps},
          {"physical_batch", c.physical_batch},
          {"accumulation_steps", c.accumulation_steps},
          {"max_epochs", c.max_epochs},
          {"warmup_epochs", c.warmup_epochs},
          {"early_stop", {{"min_delta", c.early_stop.min_delta}, {"patience", c.early_stop.patience}}},
          {"val_fraction", c.val_fraction},
          {"augment", c.augment},
          {"augmentation", augment_config_to_json(c.augmentation)},
          {"seed", c.seed}};
}

TrainConfig desk_train_config() {
  TrainConfig c;
  c.physical_batch = 8;
  c.accumulation_steps = 2;
  c.max_epochs = 12;
  c.lr_max = 2e-3;
  c.lr_min = 1e-5;
  c.weight_decay = 0.01;
  c.augmentation.max_rotation_degrees = 10.0;
  c.augmentation.elastic_enabled = false;
  return c;
}

TrainConfig desk_train_config(Family family) {
  TrainConfig c = desk_train_config();
  if (family == Family::Swin) {
    c.lr_max = 1e-3;
    c.warmup_epochs = 2;
  }
  return c;
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape() || pred.rank() != 1)
    throw ShapeError("mse_loss: pred and target must be equal-length vectors");
  if (pred.numel() == 0) throw ShapeError("mse_loss: empty input");
  const Tensor d = ops::sub(pred, target);
  return ops::mean(ops::mul(d, d));
}

void adamw_step(NamedTensors& params, const NamedTensors& grads, AdamState& state, double lr,
                const TrainConfig& cfg) {
  for (const auto& [name, g] : grads) {
    const auto it = params.find(name);
    if (it == params.end()) throw DataError("adamw: gradient for unknown parameter " + name);
    if (g.shape() != it->second.shape()) throw ShapeError("adamw: gradient shape mismatch for " + name);
    for (double v : g.data())
      if (!std::isfinite(v)) throw NumericError("adamw: non-finite gradient for " + name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : params) {
    const std::size_t n = p.numel();
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
    }
    const auto git = grads.find(name);
    std::vector<double> w = p.values();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = git == grads.end() ? 0.0 : git->second[i];
      w[i] -= lr * cfg.weight_decay * w[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
    }
    p = Tensor(p.shape(), std::move(w), true);
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min) {
  if (total_steps == 0) throw DataError("cosine_lr: total_steps must be positive");
  if (step > total_steps) throw DataError("cosine_lr: step beyond total_steps");
  const double r = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * r));
}

double warmup_cosine_lr(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double lr_max,
                        double lr_min) {
  if (warmup_steps >= total_steps) throw DataError("warmup_cosine_lr: warmup must be shorter than the run");
  if (step < warmup_steps) return lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  return cosine_lr(step - warmup_steps, total_steps - warmup_steps, lr_max, lr_min);
}

EarlyStopping::EarlyStopping(EarlyStopConfig cfg)
    : cfg_(cfg), best_(std::numeric_limits<double>::infinity()) {}

bool EarlyStopping::update(double val_mse) {
  if (!std::isfinite(val_mse)) throw NumericError("early stopping: non-finite validation MSE");
  ++epochs_;
  if (epochs_ == 1 || val_mse <= best_ - cfg_.min_delta) {
    stale_ = 0;
  } else {
    ++stale_;
  }
  if (val_mse < best_) {
    best_ = val_mse;
    best_epoch_ = epochs_;
  }
  return stale_ >= cfg_.patience;
}

std::size_t early_stop_epoch(std::span<const double> val_history, EarlyStopConfig cfg) {
  EarlyStopping es(cfg);
  for (double v : val_history)
    if (es.update(v)) return es.epochs();
  return val_history.size();
}

std::vector<Example> load_examples(std::span<const CohortRecord> records,
                                   const std::filesystem::path& root) {
  std::vector<Example> out(records.size());
  parallel_for(records.size(), [&](std::size_t i) {
    const std::filesystem::path p = records[i].volume_path;
    out[i] = {i, read_volume(p.is_absolute() ? p : root / p), records[i].p_kc};
  });
  return out;
}

Tensor model_input(const Volume& v, const ModelConfig& cfg) {
  const Dims3& s = cfg.input_shape;
  Volume x = v;
  if (cfg.input_dims == 2) {
    const Image img = extract_bscan(v, slice_index_for_angle(90.0, v.dims()[0]), s[1], s[2]);
    x = Volume({1, s[1], s[2]}, {1.0, v.spacing()[1], v.spacing()[2]}, img.data);
  } else if (cfg.is_hybrid() && v.dims() != s) {
    std::vector<float> data;
    data.reserve(s[0] * s[1] * s[2]);
    for (std::size_t k = 0; k < s[0]; ++k) {
      const Image img = extract_bscan(v, k * v.dims()[0] / s[0], s[1], s[2]);
      data.insert(data.end(), img.data.begin(), img.data.end());
    }
    x = Volume(s, v.spacing(), std::move(data));
  } else if (v.dims() != s) {
    x = crop_or_pad(v, s);
  }
  return volume_tensor(zscore_normalize(x));
}

namespace {

Tensor batch_input(std::span<const Example> data, std::span<const std::size_t> idx,
                   const ModelConfig& mcfg, const TrainConfig* aug, std::uint64_t aug_seed) {
  std::vector<Tensor> parts(idx.size());
  parallel_for(idx.size(), [&](std::size_t i) {
    const Example& e = data[idx[i]];
    if (aug != nullptr && aug->augment) {
      Rng rng(derive_seed(aug_seed, e.record));
      parts[i] = model_input(augment(e.volume, aug->augmentation, rng), mcfg);
    } else {
      parts[i] = model_input(e.volume, mcfg);
    }
  });
  return stack_batch(parts);
}

Tensor batch_target(std::span<const Example> data, std::span<const std::size_t> idx) {
  std::vector<double> t;
  for (std::size_t i : idx) t.push_back(data[i].target);
  const std::size_t n = t.size();
  return Tensor({n}, std::move(t));
}

double mse(std::span<const double> a, std::span<const Example> e) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - e[i].target) * (a[i] - e[i].target);
  return s / static_cast<double>(a.size());
}

}  // namespace

std::vector<double> predict(const Model& model, std::span<const Example> examples, std::size_t batch) {
  if (batch == 0) throw DataError("predict: batch must be positive");
  std::vector<double> out(examples.size());
  const std::size_t nb = (examples.size() + batch - 1) / batch;
  parallel_for(nb, [&](std::size_t b) {
    const std::size_t lo = b * batch, hi = std::min(examples.size(), lo + batch);
    std::vector<std::size_t> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    const Tensor p = model.forward(batch_input(examples, idx, model.config(), nullptr, 0)).prediction;
    for (std::size_t i = lo; i < hi; ++i) out[i] = p[i - lo];
  });
  return out;
}

FoldResult train_fold(Model& model, std::span<const Example> train, std::span<const Example> val,
                      const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (train.empty() || val.empty()) throw DataError("train_fold: empty train or validation set");
  const std::size_t micro = cfg.physical_batch;
  const std::size_t micro_per_epoch = (train.size() + micro - 1) / micro;
  const std::size_t steps_per_epoch = (micro_per_epoch + cfg.accumulation_steps - 1) / cfg.accumulation_steps;
  const std::size_t total_steps = steps_per_epoch * cfg.max_epochs;
  const std::size_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;
  auto lr_at = [&](std::size_t st) { return warmup_cosine_lr(st, warmup_steps, total_steps, cfg.lr_max, cfg.lr_min); };

  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
  AdamState adam;
  EarlyStopping stopper(cfg.early_stop);
  FoldResult result;
  result.best.val_mse = std::numeric_limits<double>::infinity();
  std::size_t step = 0;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const std::uint64_t aug_seed = derive_seed(derive_seed(cfg.seed, "augment"), epoch);
    double train_sse = 0.0;
    double lr = lr_at(step);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) try {
      const std::size_t first = s * cfg.accumulation_steps * micro;
      const std::size_t last = std::min(train.size(), first + cfg.accumulation_steps * micro);
      const double effective = static_cast<double>(last - first);
      std::map<std::string, std::vector<double>> acc;
      for (std::size_t lo = first; lo < last; lo += micro) {
        const std::size_t hi = std::min(last, lo + micro);
        const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
        const Tensor x = batch_input(train, idx, model.config(), &cfg, aug_seed);
        const Tensor y = batch_target(train, idx);
        Tape tape;
        Tensor loss;
        {
          Tape::Scope scope(tape);
          ForwardOptions o;
          o.training = true;
          o.rng = &dropout_rng;
          loss = mse_loss(model.forward(x, o).prediction, y);
        }
        const double w = static_cast<double>(hi - lo) / effective;
        train_sse += loss.item() * static_cast<double>(hi - lo);
        const Gradients g = backward(tape, loss);
        for (const auto& [name, p] : model.parameters()) {
          const Tensor gp = g.of(p);
          auto& a = acc[name];
          if (a.empty()) a.assign(gp.numel(), 0.0);
          for (std::size_t i = 0; i < a.size(); ++i) a[i] += w * gp[i];
        }
      }
      NamedTensors grads;
      for (auto& [name, a] : acc) grads.emplace(name, Tensor(model.parameters().at(name).shape(), std::move(a)));
      lr = lr_at(step);
      adamw_step(model.parameters(), grads, adam, lr, cfg);
      ++step;
    } catch (const NumericError& e) {
      throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                         ": " + e.what());
    }

    std::vector<double> vp;
    try {
      vp = predict(model, val, micro);
    } catch (const NumericError& e) {
      throw NumericError("training diverged at epoch " + std::to_string(epoch) + " (validation): " + e.what());
    }
    const EpochRecord rec{epoch, train_sse / static_cast<double>(train.size()), mse(vp, val), lr};
    if (!std::isfinite(rec.val_mse)) throw NumericError("training diverged: non-finite validation MSE");
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (rec.val_mse < result.best.val_mse) result.best = {model.state(), epoch, rec.val_mse};
    if (epoch > cfg.warmup_epochs && stopper.update(rec.val_mse)) {
      result.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  model.load_state(result.best.state);
  return result;
}

CvResult cross_validate(std::span<const CohortRecord> records, std::span<const Example> examples,
                        const ModelConfig& model_cfg, const TrainConfig& cfg, const CvOptions& options,
                        const FoldCallback& on_fold, const EpochCallback& on_epoch) {
  if (records.size() != examples.size()) throw DataError("cross_validate: records and examples differ in length");
  if (options.only_fold && *options.only_fold >= options.n_folds)
    throw DataError("cross_validate: fold index out of range");
  cfg.validate();
  const auto fold_of = stratified_patient_split(records, options.n_bins, options.n_folds, cfg.seed);
  const std::size_t inner_folds =
      std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(1.0 / cfg.val_fraction)));

  CvResult out;
  for (std::size_t f = 0; f < options.n_folds; ++f) {
    if (options.only_fold && *options.only_fold != f) continue;
    FoldRun run;
    run.fold = f;
    std::vector<CohortRecord> rest;
    std::vector<std::size_t> rest_idx;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (fold_of[i] == f) {
        run.test.push_back(i);
      } else {
        rest.push_back(records[i]);
        rest_idx.push_back(i);
      }
    }
    const auto inner = stratified_patient_split(rest, options.n_bins, inner_folds, derive_seed(cfg.seed, f));
    for (std::size_t k = 0; k < rest.size(); ++k) (inner[k] == 0 ? run.val : run.train).push_back(rest_idx[k]);

    auto gather = [&](const std::vector<std::size_t>& idx) {
      std::vector<Example> v;
      v.reserve(idx.size());
      for (std::size_t i : idx) v.push_back(examples[i]);
      return v;
    };
    const auto tr = gather(run.train), va = gather(run.val), te = gather(run.test);
    TrainConfig fcfg = cfg;
    fcfg.seed = derive_seed(cfg.seed, "fold" + std::to_string(f));
    auto model = build_model(model_cfg, derive_seed(fcfg.seed, "init"));
    run.result = train_fold(*model, tr, va, fcfg, on_epoch);
    const auto preds = predict(*model, te, cfg.physical_batch);
    for (std::size_t k = 0; k < te.size(); ++k)
      out.predictions.push_back({te[k].record, f, te[k].target, preds[k]});
    if (on_fold) on_fold(run, *model);
    out.folds.push_back(std::move(run));
  }
  std::sort(out.predictions.begin(), out.predictions.end(),
            [](const Prediction& a, const Prediction& b) { return a.record < b.record; });
  return out;
}

void write_history_csv(const std::filesystem::path& path, std::span<const EpochRecord> history) {
  std::string s = "epoch,train_mse,val_mse,lr\n";
  for (const auto& r : history)
    s += std::to_string(r.epoch) + "," + format_double(r.train_mse) + "," + format_double(r.val_mse) + "," +
         format_double(r.lr) + "\n";
  write_text(path, s);
}

void write_predictions_csv(const std::filesystem::path& path, std::span<const Prediction> preds) {
  std::string s = "record,fold,target,pred\n";
  for (const auto& p : preds)
    s += std::to_string(p.record) + "," + std::to_string(p.fold) + "," + format_double(p.target) + "," +
         format_double(p.pred) + "\n";
  write_text(path, s);
}

std::vector<Prediction> read_predictions_csv(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty() || lines[0] != "record,fold,target,pred")
    throw DataError("predictions: bad header in " + path.string());
  std::vector<Prediction> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = split_csv_line(lines[i]);
    if (f.size() != 4) throw DataError("predictions: bad row " + std::to_string(i) + " in " + path.string());
    try {
      out.push_back({std::stoul(f[0]), std::stoul(f[1]), parse_double(f[2]), parse_double(f[3])});
    } catch (const std::logic_error&) {
      throw DataError("predictions: bad row " + std::to_string(i) + " in " + path.string());
    }
  }
  return out;
}

void save_model_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const Checkpoint& ckpt) {
  save_checkpoint(path, ckpt.state);
  const nlohmann::json meta{{"epoch", ckpt.epoch}, {"val_mse", ckpt.val_mse}, {"model", model_config_to_json(cfg)}};
  write_text(path.string() + ".json", meta.dump(2) + "\n");
}

std::unique_ptr<Model> load_model_checkpoint(const std::filesystem::path& path, Checkpoint* meta) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path.string() + ".json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint sidecar " + path.string() + ".json: " + e.what());
  }
  if (!j.contains("model")) throw DataError("checkpoint sidecar lacks a model config");
  auto model = build_model(model_config_from_json(j.at("model")), 0);
  NamedTensors state = load_checkpoint(path);
  model->load_state(state);
  if (meta != nullptr) {
    meta->state = std::move(state);
    meta->epoch = j.value("epoch", std::size_t{0});
    meta->val_mse = j.value("val_mse", 0.0);
  }
  return model;
}

}  // namespace volab
