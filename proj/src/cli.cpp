#include "volab/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "volab/error.hpp"
#include "volab/evaluation.hpp"
#include "volab/io.hpp"
#include "volab/mechanistic.hpp"
#include "volab/parallel.hpp"
#include "volab/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace volab {
namespace {

// Argument combinations the parser cannot catch on its own.
class UsageError : public Error {
 public:
  using Error::Error;
};

Dims3 parse_shape(const std::string& s) {
  const auto parts = split_csv_line(s);
  if (parts.size() != 3) throw UsageError("--shape expects D,H,W");
  Dims3 d{};
  for (std::size_t i = 0; i < 3; ++i) {
    const double v = parse_double(parts[i]);
    if (v < 1 || v != std::floor(v)) throw UsageError("--shape entries must be positive integers");
    d[i] = static_cast<std::size_t>(v);
  }
  return d;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  for (auto& p : split_csv_line(s))
    if (!p.empty()) out.push_back(p);
  return out;
}

GmmModel load_gmm(const fs::path& p) {
  try {
    return gmm_from_json(json::parse(read_text(p)));
  } catch (const json::exception& e) {
    throw DataError("gmm file " + p.string() + ": " + e.what());
  }
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path q(p);
  return q.is_absolute() ? q : (base / q).lexically_normal();
}

PhantomDatasetSpec phantom_from_json(const json& j, std::uint64_t master, const fs::path& base) {
  PhantomDatasetSpec s;
  s.n = j.value("n", s.n);
  if (j.contains("shape")) {
    const auto v = j.at("shape").get<std::vector<std::size_t>>();
    if (v.size() != 3) throw DataError("dataset.phantom.shape needs three entries");
    s.shape = {v[0], v[1], v[2]};
  }
  if (j.contains("amplitude")) {
    const auto a = j.at("amplitude").get<std::vector<double>>();
    if (a.size() != 2) throw DataError("dataset.phantom.amplitude needs [min, max]");
    s.amplitude_min = a[0];
    s.amplitude_max = a[1];
  }
  s.anomaly_sparsity = j.value("sparsity", s.anomaly_sparsity);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  if (j.contains("gmm")) {
    const auto& g = j.at("gmm");
    s.label_gmm = g.is_string() ? load_gmm(resolve(base, g.get<std::string>())) : gmm_from_json(g);
  }
  s.seed = j.contains("seed") ? j.at("seed").get<std::uint64_t>() : derive_seed(master, "data");
  return s;
}

json phantom_to_json(const PhantomDatasetSpec& s) {
  return {{"n", s.n},
          {"shape", {s.shape[0], s.shape[1], s.shape[2]}},
          {"amplitude", {s.amplitude_min, s.amplitude_max}},
          {"sparsity", s.anomaly_sparsity},
          {"noise_sigma", s.noise_sigma},
          {"gmm", gmm_to_json(s.label_gmm)},
          {"seed", s.seed}};
}

void ensure_dataset(const DatasetBlock& d) {
  if (fs::exists(d.dir / "manifest.csv")) return;
  if (!d.phantom) throw DataError("dataset not found: " + (d.dir / "manifest.csv").string());
  write_phantom_dataset(*d.phantom, d.dir);
}

std::string fold_dir(std::size_t f) { return "fold" + std::to_string(f); }

// ---------------------------------------------------------------- phantom

struct PhantomArgs {
  std::size_t n = 200;
  std::string shape = "32,32,32";
  std::uint64_t seed = 0;
  std::string gmm;
  std::string out;
  double amp_min = 0.0, amp_max = 1.2, sparsity = 0.2, noise = 0.05;
};

int cmd_phantom(const PhantomArgs& a, std::ostream& out) {
  PhantomDatasetSpec s;
  s.n = a.n;
  s.shape = parse_shape(a.shape);
  s.seed = a.seed;
  s.amplitude_min = a.amp_min;
  s.amplitude_max = a.amp_max;
  s.anomaly_sparsity = a.sparsity;
  s.noise_sigma = a.noise;
  if (!a.gmm.empty()) s.label_gmm = load_gmm(a.gmm);
  const auto recs = write_phantom_dataset(s, a.out);
  std::array<std::size_t, 3> bins{};
  for (const auto& r : recs) ++bins[static_cast<std::size_t>(risk_bin(r.p_kc))];
  out << "wrote " << recs.size() << " volumes to " << a.out << " (healthy " << bins[0] << ", subclinical "
      << bins[1] << ", keratoconus " << bins[2] << ")\n";
  return 0;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::string config;
  std::optional<std::size_t> fold;
  bool all_folds = false;
  std::string out;
  std::size_t parallel_folds = 1;
  bool verbose = false;
};

void write_split(const fs::path& p, const FoldRun& run) {
  const json j{{"fold", run.fold}, {"train", run.train}, {"val", run.val}, {"test", run.test}};
  write_text(p, j.dump() + "\n");
}

// Rebuilds OUT/predictions.csv from whatever folds are present.
void pool_predictions(const fs::path& dir, std::size_t n_folds) {
  std::vector<Prediction> all;
  for (std::size_t f = 0; f < n_folds; ++f) {
    const fs::path p = dir / fold_dir(f) / "predictions.csv";
    if (!fs::exists(p)) continue;
    const auto part = read_predictions_csv(p);
    all.insert(all.end(), part.begin(), part.end());
  }
  std::sort(all.begin(), all.end(), [](const Prediction& a, const Prediction& b) { return a.record < b.record; });
  write_predictions_csv(dir / "predictions.csv", all);
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  if (a.fold.has_value() == a.all_folds) throw UsageError("train: pass exactly one of --fold or --all-folds");
  ExperimentConfig cfg = load_experiment(a.config);
  if (!a.out.empty()) cfg.output = a.out;
  if (a.fold && *a.fold >= cfg.cv.n_folds) throw UsageError("train: --fold out of range");
  ensure_dataset(cfg.dataset);
  const auto records = read_manifest(cfg.dataset.dir / "manifest.csv");
  const auto examples = load_examples(records, cfg.dataset.dir);

  fs::create_directories(cfg.output);
  write_text(cfg.output / "config.json", experiment_to_json(cfg).dump(2) + "\n");
  const auto probe = build_model(cfg.model, 0);
  const json run{{"name", cfg.name},
                 {"family", family_name(cfg.model.family)},
                 {"dim", cfg.model.input_dims},
                 {"params", probe->parameter_count()},
                 {"seed", cfg.seed}};
  write_text(cfg.output / "run.json", run.dump(2) + "\n");

  std::vector<std::size_t> folds;
  if (a.fold) {
    folds.push_back(*a.fold);
  } else {
    for (std::size_t f = 0; f < cfg.cv.n_folds; ++f) folds.push_back(f);
  }
  std::mutex log;
  auto one = [&](std::size_t f) {
    CvOptions o = cfg.cv;
    o.only_fold = f;
    const fs::path dir = cfg.output / fold_dir(f);
    fs::create_directories(dir);
    EpochCallback on_epoch;
    if (a.verbose)
      on_epoch = [&, f](const EpochRecord& r) {
        std::lock_guard<std::mutex> g(log);
        out << "fold " << f << " epoch " << r.epoch << " train " << format_double(r.train_mse) << " val "
            << format_double(r.val_mse) << "\n";
      };
    const CvResult res = cross_validate(
        records, examples, cfg.model, cfg.train, o,
        [&](const FoldRun& run, const Model&) {
          save_model_checkpoint(dir / "model.vlck", cfg.model, run.result.best);
          write_history_csv(dir / "history.csv", run.result.history);
          write_split(dir / "split.json", run);
          std::lock_guard<std::mutex> g(log);
          out << "fold " << f << ": best epoch " << run.result.best.epoch << " of " << run.result.history.size()
              << ", val_mse " << format_double(run.result.best.val_mse) << "\n";
        },
        on_epoch);
    write_predictions_csv(dir / "predictions.csv", res.predictions);
  };
  if (a.parallel_folds > 1 && folds.size() > 1) {
    const std::size_t before = max_threads();
    set_max_threads(a.parallel_folds);
    try {
      parallel_for(folds.size(), [&](std::size_t i) { one(folds[i]); });
    } catch (...) {
      set_max_threads(before);
      throw;
    }
    set_max_threads(before);
  } else {
    for (std::size_t f : folds) one(f);
  }
  pool_predictions(cfg.output, cfg.cv.n_folds);
  out << "predictions: " << (cfg.output / "predictions.csv").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- analyze

struct AnalyzeArgs {
  std::vector<std::string> checkpoints;
  std::string instrument;
  std::string stages;
  std::optional<std::size_t> k;
  std::optional<std::size_t> inputs;
  std::string data;
  std::string out;
};

struct LoadedCheckpoint {
  std::unique_ptr<Model> model;
  std::string id;  // run name / fold directory
  std::string run_name;
  fs::path fold_dir, run_dir;
  std::optional<ExperimentConfig> run_cfg;
};

LoadedCheckpoint load_for_analysis(const fs::path& path) {
  LoadedCheckpoint c;
  c.model = load_model_checkpoint(path);
  c.fold_dir = fs::absolute(path).parent_path();
  c.run_dir = c.fold_dir.parent_path();
  c.run_name = family_name(c.model->config().family);
  if (fs::exists(c.run_dir / "run.json")) c.run_name = read_json(c.run_dir / "run.json").value("name", c.run_name);
  if (fs::exists(c.run_dir / "config.json")) c.run_cfg = load_experiment(c.run_dir / "config.json");
  c.id = c.run_name + "/" + c.fold_dir.filename().string();
  return c;
}

int cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
  static const std::set<std::string> kInstruments{"erf", "attn", "cka"};
  if (!kInstruments.count(a.instrument)) throw UsageError("analyze: --instrument must be erf, attn or cka");
  if (a.instrument != "cka" && a.checkpoints.size() != 1)
    throw UsageError("analyze: " + a.instrument + " takes exactly one --checkpoint");
  std::vector<LoadedCheckpoint> ckpts;
  for (const auto& p : a.checkpoints) ckpts.push_back(load_for_analysis(p));
  const LoadedCheckpoint& first = ckpts.front();
  const ModelConfig& mc = first.model->config();
  if (a.instrument == "attn" && !mc.has_attention()) throw UsageError("model has no attention layers");

  const AnalysisBlock defaults = first.run_cfg ? first.run_cfg->analysis : AnalysisBlock{};
  const std::size_t k = a.k.value_or(defaults.k);
  const std::size_t max_inputs = a.inputs.value_or(defaults.inputs);
  std::vector<std::string> stages = a.stages.empty() ? defaults.stages : split_list(a.stages);

  fs::path data_dir;
  if (!a.data.empty()) {
    data_dir = a.data;
  } else if (first.run_cfg) {
    data_dir = first.run_cfg->dataset.dir;
  } else {
    throw UsageError("analyze: no run config next to the checkpoint; pass --data");
  }
  const auto records = read_manifest(data_dir / "manifest.csv");
  std::vector<std::size_t> chosen;
  if (fs::exists(first.fold_dir / "split.json")) {
    chosen = read_json(first.fold_dir / "split.json").at("test").get<std::vector<std::size_t>>();
  } else {
    chosen.resize(records.size());
    std::iota(chosen.begin(), chosen.end(), 0);
  }
  if (max_inputs > 0 && chosen.size() > max_inputs) chosen.resize(max_inputs);
  if (chosen.empty()) throw DataError("analyze: no inputs");
  std::vector<CohortRecord> picked;
  for (std::size_t i : chosen) {
    if (i >= records.size()) throw DataError("analyze: split refers to a record outside the manifest");
    picked.push_back(records[i]);
  }
  const auto examples = load_examples(picked, data_dir);

  const fs::path out_dir = a.out.empty() ? first.fold_dir / "analysis" : fs::path(a.out);
  fs::create_directories(out_dir);
  auto inputs_for = [&](const ModelConfig& c) {
    std::vector<Tensor> xs;
    for (const auto& e : examples) xs.push_back(model_input(e.volume, c));
    return xs;
  };

  if (a.instrument == "erf") {
    const auto xs = inputs_for(mc);
    const auto defaults4 = table4_stages(mc);
    if (stages.empty()) stages = defaults4;
    std::string detail = "model,dim,stage,theoretical_rf,mean_radius,mean_size,inputs\n";
    for (const auto& s : stages) {
      double radius = 0.0, size = 0.0;
      std::size_t used = 0;
      for (const auto& x : xs) {
        try {
          const ErfMap m = erf_map(*first.model, x, s);
          radius += m.erf_radius;
          size += static_cast<double>(m.erf_size);
          ++used;
        } catch (const NumericError&) {
        }
      }
      if (used == 0) throw NumericError("erf: every input has a vanishing gradient at " + s);
      detail += first.run_name + "," + std::to_string(mc.input_dims) + "," + s + "," +
                format_double(theoretical_rf(mc, s)) + "," + format_double(radius / used) + "," +
                format_double(size / used) + "," + std::to_string(used) + "\n";
    }
    write_text(out_dir / "erf_stages.csv", detail);
    const Table4Row row = erf_table_row(*first.model, xs, first.run_name);
    write_text(out_dir / "table4.csv", table4_csv({&row, 1}));
    out << "erf: " << xs.size() << " inputs -> " << (out_dir / "table4.csv").string() << "\n";
  } else if (a.instrument == "attn") {
    const auto xs = inputs_for(mc);
    std::array<std::vector<double>, 3> per_bin;
    std::vector<AttentionRecord> first_records;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      ForwardOptions o;
      o.record_attention = true;
      auto r = first.model->forward(xs[i], o);
      auto& bin = per_bin[static_cast<std::size_t>(risk_bin(examples[i].target))];
      for (const auto& rec : r.attention) {
        if (!stages.empty() && std::none_of(stages.begin(), stages.end(), [&](const std::string& s) {
              return rec.layer.rfind(s, 0) == 0;
            }))
          continue;
        const auto d = attention_distances(rec, k);
        bin.insert(bin.end(), d.begin(), d.end());
      }
      if (i == 0) first_records = std::move(r.attention);
    }
    std::vector<Table5Row> rows;
    for (RiskBin b : kRiskBins) {
      const auto& d = per_bin[static_cast<std::size_t>(b)];
      if (d.empty()) continue;
      rows.push_back({first.run_name, mc.input_dims, std::string(risk_bin_name(b)), summarize_distances(d)});
    }
    if (rows.empty()) throw DataError("attn: no attention distances recorded");
    write_text(out_dir / "table5.csv", table5_csv(rows));
    write_text(out_dir / "centroids.csv", centroid_csv(first_records));
    out << "attn: " << rows.size() << " risk bins -> " << (out_dir / "table5.csv").string() << "\n";
  } else {
    std::vector<ActivationDump> all;
    for (const auto& c : ckpts) {
      auto acts = collect_activations(*c.model, inputs_for(c.model->config()), c.id + ":");
      if (!stages.empty())
        std::erase_if(acts, [&](const ActivationDump& d) {
          const std::string layer = d.layer.substr(c.id.size() + 1);
          return std::find(stages.begin(), stages.end(), layer) == stages.end();
        });
      if (acts.empty()) throw DataError("cka: no matching stages in " + c.id);
      std::string file = c.id;
      std::replace(file.begin(), file.end(), '/', '_');
      write_dumps(out_dir / (file + ".admp"), c.id, acts);
      all.insert(all.end(), acts.begin(), acts.end());
    }
    const CkaMatrix m = cka_matrix(all, all);
    write_text(out_dir / "cka.csv", cka_csv(m));
    out << "cka: " << all.size() << " layers -> " << (out_dir / "cka.csv").string() << "\n";
  }
  return 0;
}

// ----------------------------------------------------------------- report

struct ReportArgs {
  std::string runs;
  std::string format = "csv";
  bool ci = false;
  std::size_t n_boot = 10000;
  double level = 0.95;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
  const fs::path root(a.runs);
  if (!fs::is_directory(root)) throw DataError("report: not a directory: " + a.runs);
  std::vector<fs::path> runs;
  if (fs::exists(root / "predictions.csv")) {
    runs.push_back(root);
  } else {
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory() && fs::exists(e.path() / "predictions.csv")) runs.push_back(e.path());
    std::sort(runs.begin(), runs.end());
  }
  if (runs.empty()) throw DataError("report: no runs with predictions.csv under " + a.runs);

  std::optional<BootstrapOptions> boot;
  if (a.ci) boot = BootstrapOptions{a.n_boot, a.level, derive_seed(a.seed, "bootstrap")};
  std::vector<ModelReport> rows;
  for (const auto& dir : runs) {
    const auto preds = read_predictions_csv(dir / "predictions.csv");
    if (preds.empty()) throw DataError("report: empty predictions in " + dir.string());
    std::vector<double> p, t;
    for (const auto& x : preds) {
      p.push_back(x.pred);
      t.push_back(x.target);
    }
    ModelReport r;
    r.model = dir.filename().string();
    if (fs::exists(dir / "run.json")) {
      const json run = read_json(dir / "run.json");
      r.model = run.value("name", r.model);
      r.dim = run.value("dim", r.dim);
      r.params = run.value("params", r.params);
    }
    r.metrics = evaluate_predictions(p, t, boot);
    rows.push_back(std::move(r));
  }
  const fs::path out_dir = a.out.empty() ? root : fs::path(a.out);
  fs::create_directories(out_dir);
  if (a.format == "json") {
    write_text(out_dir / "report.json", report_to_json(rows).dump(2) + "\n");
  } else {
    write_text(out_dir / "table2.csv", table2_csv(rows));
    write_text(out_dir / "table3.csv", table3_csv(rows));
    write_text(out_dir / "reliability.csv", reliability_csv(rows));
    if (a.ci) write_text(out_dir / "table2_ci.csv", table2_ci_csv(rows));
  }
  out << "report: " << rows.size() << " runs -> " << out_dir.string() << "\n";
  return 0;
}

}  // namespace

ExperimentConfig experiment_from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw DataError("experiment config: expected an object");
  ExperimentConfig c;
  try {
    if (!j.contains("seed")) throw DataError("experiment config: seed is required");
    c.seed = j.at("seed").get<std::uint64_t>();
    if (!j.contains("dataset") || !j.at("dataset").contains("dir"))
      throw DataError("experiment config: dataset.dir is required");
    const json& d = j.at("dataset");
    c.dataset.dir = resolve(base_dir, d.at("dir").get<std::string>());
    if (d.contains("phantom")) c.dataset.phantom = phantom_from_json(d.at("phantom"), c.seed, base_dir);
    if (!j.contains("model")) throw DataError("experiment config: model block is required");
    c.model = model_config_from_json(j.at("model"));
    c.name = j.value("name", family_name(c.model.family) + "-" + std::to_string(c.model.input_dims) + "d");

    json train = j.value("train", json::object());
    const std::string preset = train.value("preset", std::string("paper"));
    if (preset != "paper" && preset != "desk") throw DataError("train.preset must be desk or paper");
    train.erase("preset");
    json merged = train_config_to_json(preset == "desk" ? desk_train_config(c.model.family) : TrainConfig{});
    merged.merge_patch(train);
    merged["seed"] = c.seed;
    c.train = train_config_from_json(merged);

    if (j.contains("cv")) {
      c.cv.n_folds = j.at("cv").value("n_folds", c.cv.n_folds);
      c.cv.n_bins = j.at("cv").value("n_bins", c.cv.n_bins);
    }
    if (c.cv.n_folds < 2) throw DataError("cv.n_folds must be at least 2");
    if (j.contains("analysis")) {
      const json& an = j.at("analysis");
      c.analysis.instruments = an.value("instruments", c.analysis.instruments);
      for (const auto& s : c.analysis.instruments)
        if (s != "erf" && s != "attn" && s != "cka") throw DataError("analysis: unknown instrument " + s);
      c.analysis.stages = an.value("stages", c.analysis.stages);
      c.analysis.k = an.value("k", c.analysis.k);
      c.analysis.inputs = an.value("inputs", c.analysis.inputs);
      if (c.analysis.k == 0) throw DataError("analysis.k must be positive");
    }
    c.output = resolve(base_dir, j.value("output", std::string("runs/") + c.name));
  } catch (const json::exception& e) {
    throw DataError(std::string("experiment config: ") + e.what());
  }
  return c;
}

json experiment_to_json(const ExperimentConfig& c) {
  json dataset{{"dir", c.dataset.dir.generic_string()}};
  if (c.dataset.phantom) dataset["phantom"] = phantom_to_json(*c.dataset.phantom);
  json train = train_config_to_json(c.train);
  train.erase("seed");
  return {{"name", c.name},
          {"seed", c.seed},
          {"dataset", dataset},
          {"model", model_config_to_json(c.model)},
          {"train", train},
          {"cv", {{"n_folds", c.cv.n_folds}, {"n_bins", c.cv.n_bins}}},
          {"analysis",
           {{"instruments", c.analysis.instruments},
            {"stages", c.analysis.stages},
            {"k", c.analysis.k},
            {"inputs", c.analysis.inputs}}},
          {"output", c.output.generic_string()}};
}

ExperimentConfig load_experiment(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("config not found: " + path.string());
  return experiment_from_json(read_json(path), fs::absolute(path).parent_path());
}

const std::string& cli_schemas() {
  static const std::string s = R"(Files
  phantom   OUT/manifest.csv, OUT/volumes/NNNN.volb, OUT/phantom_index.csv
  train     OUT/config.json, OUT/run.json, OUT/predictions.csv,
            OUT/foldK/{model.vlck, model.vlck.json, history.csv, split.json, predictions.csv}
  analyze   erf: table4.csv, erf_stages.csv; attn: table5.csv, centroids.csv;
            cka: cka.csv, one .admp dump per checkpoint
  report    csv: table2.csv, table3.csv, reliability.csv [, table2_ci.csv]; json: report.json

CSV headers
  manifest.csv       patient_id,eye_id,volume_path,p_kc,age,sex
  phantom_index.csv  patient_id,eye_id,amplitude,x0,x1,p_kc
  history.csv        epoch,train_mse,val_mse,lr
  predictions.csv    record,fold,target,pred
  table2.csv         model,dim,params,mse,mae,r2,pearson,brier,auroc
  table2_ci.csv      model,dim,metric,lo,hi
  table3.csv         model,dim,healthy_sens,healthy_spec,subclinical_sens,subclinical_spec,
                     keratoconus_sens,keratoconus_spec,balanced_accuracy
  reliability.csv    model,bin,mean_pred,frac_pos,count
  table4.csv         model,dim,stage1,stage2,stage3,stage4,et_ratio
  erf_stages.csv     model,dim,stage,theoretical_rf,mean_radius,mean_size,inputs
  table5.csv         model,dim,bin,mean,sd,median,pct_gt20,max
  centroids.csv      layer,sample,token,z,y,x
  cka.csv            row,<layer>...

Binary formats
  .volb   "VOLB", u8 version, 3 x u32 dims, 3 x f32 spacing (mm), f32 voxels slice-major
  .vlck   "VLCK", u32 count, then name, rank, dims and f32 values per tensor
  .admp   "ADMP", model id, then per layer: name, n, d and n x d f32 values

Experiment config (JSON)
  {"name": str, "seed": int (required),
   "dataset": {"dir": path, "phantom": {"n", "shape", "amplitude": [lo, hi], "sparsity",
               "noise_sigma", "gmm", "seed"}},
   "model": {"family": "cnn|hybrid_lstm|hybrid_transformer|vit|swin", "input_dims": 2|3,
             "preset": "desk|paper", ...overrides},
   "train": {"preset": "desk|paper", ...overrides},
   "cv": {"n_folds", "n_bins"},
   "analysis": {"instruments", "stages", "k", "inputs"},
   "output": path}
  Paths are relative to the config file. The seed feeds the data, init, augment and
  shuffle streams independently.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
VOLAB_THREADS caps worker threads.
)";
  return s;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"volab: volumetric model benchmark on synthetic phantoms"};
  app.footer("\n" + cli_schemas());
  app.require_subcommand(1);

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom", "Generate a phantom dataset");
  phantom->add_option("--n", pa.n, "Number of volumes (two eyes per patient)")->check(CLI::PositiveNumber);
  phantom->add_option("--shape", pa.shape, "Volume shape D,H,W")->capture_default_str();
  phantom->add_option("--seed", pa.seed, "Master seed")->required();
  phantom->add_option("--gmm", pa.gmm, "Label mixture JSON (default: healthy at 0, KC at (3,3))")
      ->check(CLI::ExistingFile);
  phantom->add_option("--out", pa.out, "Output directory")->required();
  phantom->add_option("--amplitude-min", pa.amp_min, "Lowest anomaly amplitude")->capture_default_str();
  phantom->add_option("--amplitude-max", pa.amp_max, "Highest anomaly amplitude")->capture_default_str();
  phantom->add_option("--sparsity", pa.sparsity, "Fraction of voxels carrying the anomaly")->capture_default_str();
  phantom->add_option("--noise", pa.noise, "Gaussian noise sigma")->capture_default_str();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Cross-validated training from an experiment config");
  train->add_option("--config", ta.config, "Experiment config JSON")->required();
  std::size_t fold = 0;
  auto* fold_opt = train->add_option("--fold", fold, "Train a single fold");
  auto* all_opt = train->add_flag("--all-folds", ta.all_folds, "Train every fold");
  fold_opt->excludes(all_opt);
  train->add_option("--out", ta.out, "Override the config's output directory");
  train->add_option("--parallel-folds", ta.parallel_folds, "Folds trained concurrently")
      ->check(CLI::PositiveNumber);
  train->add_flag("--verbose", ta.verbose, "Log every epoch");

  AnalyzeArgs aa;
  auto* analyze = app.add_subcommand("analyze", "Mechanistic analysis of trained checkpoints");
  analyze->add_option("--checkpoint", aa.checkpoints, "model.vlck (repeat for cka)")->required();
  analyze->add_option("--instrument", aa.instrument, "erf | attn | cka")->required();
  analyze->add_option("--stages", aa.stages, "Comma-separated stage names");
  std::size_t k = 0, n_inputs = 0;
  auto* k_opt = analyze->add_option("--k", k, "Top-k attended tokens")->check(CLI::PositiveNumber);
  auto* inputs_opt = analyze->add_option("--inputs", n_inputs, "Cap on analysed test records (0: all)");
  analyze->add_option("--data", aa.data, "Dataset directory (default: from the run config)");
  analyze->add_option("--out", aa.out, "Output directory (default: <fold>/analysis)");

  ReportArgs ra;
  auto* report = app.add_subcommand("report", "Aggregate pooled predictions into metric tables");
  report->add_option("--runs", ra.runs, "Run directory or a directory of runs")->required();
  report->add_option("--format", ra.format, "csv | json")->check(CLI::IsMember({"csv", "json"}));
  report->add_flag("--ci", ra.ci, "Add bootstrap confidence intervals");
  report->add_option("--n-boot", ra.n_boot, "Bootstrap resamples")->check(CLI::PositiveNumber)->capture_default_str();
  report->add_option("--level", ra.level, "Interval level")->check(CLI::Range(0.5, 0.999))->capture_default_str();
  report->add_option("--seed", ra.seed, "Bootstrap master seed")->capture_default_str();
  report->add_option("--out", ra.out, "Output directory (default: --runs)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  }
  try {
    if (*phantom) return cmd_phantom(pa, out);
    if (*train) {
      if (*fold_opt) ta.fold = fold;
      return cmd_train(ta, out);
    }
    if (*analyze) {
      if (*k_opt) aa.k = k;
      if (*inputs_opt) aa.inputs = n_inputs;
      return cmd_analyze(aa, out);
    }
    return cmd_report(ra, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"volab"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace volab
