#include "volab/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "volab/error.hpp"
#include "volab/io.hpp"
#include "volab/labels.hpp"
#include "volab/parallel.hpp"
#include "volab/rng.hpp"

namespace volab {

namespace {

void check_pair(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw DataError(std::string(what) + ": length mismatch");
  if (a == 0) throw DataError(std::string(what) + ": empty input");
}

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

RegressionMetrics regression_metrics(std::span<const double> pred, std::span<const double> target) {
  check_pair(pred.size(), target.size(), "regression_metrics");
  const double n = static_cast<double>(pred.size());
  const double mp = mean_of(pred), mt = mean_of(target);
  double se = 0.0, ae = 0.0, sst = 0.0, spp = 0.0, spt = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    se += d * d;
    ae += std::abs(d);
    sst += (target[i] - mt) * (target[i] - mt);
    spp += (pred[i] - mp) * (pred[i] - mp);
    spt += (pred[i] - mp) * (target[i] - mt);
  }
  if (sst <= 0.0) throw DataError("regression_metrics: constant target");
  RegressionMetrics m{se / n, ae / n, 1.0 - se / sst, std::nullopt};
  if (spp > 0.0) m.pearson = spt / std::sqrt(spp * sst);
  return m;
}

std::vector<int> binary_labels(std::span<const double> target) {
  std::vector<int> out;
  out.reserve(target.size());
  for (double t : target) out.push_back(t > 0.5 ? 1 : 0);
  return out;
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_pair(scores.size(), labels.size(), "auroc");
  // Rank-sum with midranks for ties.
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j - 1) + 1.0;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]] != 0 && labels[idx[k]] != 1) throw DataError("auroc: labels must be 0 or 1");
      if (labels[idx[k]] == 1) {
        pos_rank_sum += mid;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DataError("auroc: both classes must be present");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

Calibration brier_and_reliability(std::span<const double> pred, std::span<const int> labels, std::size_t n_bins) {
  check_pair(pred.size(), labels.size(), "brier");
  if (n_bins == 0) throw DataError("brier: need at least one bin");
  Calibration c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!(pred[i] >= 0.0 && pred[i] <= 1.0)) throw DataError("brier: predictions must lie in [0, 1]");
    c.brier += (pred[i] - labels[i]) * (pred[i] - labels[i]);
  }
  c.brier /= static_cast<double>(pred.size());

  std::vector<std::size_t> idx(pred.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return pred[a] < pred[b]; });
  const std::size_t bins = std::min(n_bins, pred.size());
  const std::size_t base = pred.size() / bins, extra = pred.size() % bins;
  std::size_t cursor = 0;
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t count = base + (b < extra ? 1 : 0);
    ReliabilityBin r;
    r.count = count;
    for (std::size_t k = 0; k < count; ++k, ++cursor) {
      r.mean_pred += pred[idx[cursor]];
      r.frac_pos += labels[idx[cursor]];
    }
    r.mean_pred /= static_cast<double>(count);
    r.frac_pos /= static_cast<double>(count);
    c.bins.push_back(r);
  }
  return c;
}

StratifiedReport stratified_sens_spec(std::span<const double> pred, std::span<const double> target) {
  check_pair(pred.size(), target.size(), "stratified_sens_spec");
  StratifiedReport r;
  double sens_sum = 0.0;
  bool all = true;
  for (std::size_t b = 0; b < 3; ++b) {
    const RiskBin bin = kRiskBins[b];
    std::size_t tp = 0, pos = 0, tn = 0, neg = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool is_true = risk_bin(target[i]) == bin, is_pred = risk_bin(pred[i]) == bin;
      if (is_true) {
        ++pos;
        tp += is_pred;
      } else {
        ++neg;
        tn += !is_pred;
      }
    }
    if (pos > 0) r.bins[b].sensitivity = static_cast<double>(tp) / static_cast<double>(pos);
    if (neg > 0) r.bins[b].specificity = static_cast<double>(tn) / static_cast<double>(neg);
    if (r.bins[b].sensitivity) {
      sens_sum += *r.bins[b].sensitivity;
    } else {
      all = false;
    }
  }
  if (all) r.balanced_accuracy = sens_sum / 3.0;
  return r;
}

std::pair<double, double> bootstrap_ci(const MetricFn& metric, std::span<const double> pred,
                                       std::span<const double> target, std::size_t n, double level,
                                       std::uint64_t seed) {
  check_pair(pred.size(), target.size(), "bootstrap_ci");
  if (n < 100) throw DataError("bootstrap_ci: need at least 100 resamples");
  if (!(level > 0.0 && level < 1.0)) throw DataError("bootstrap_ci: level must be in (0, 1)");
  const std::size_t m = pred.size();
  std::vector<double> values(n);
  std::vector<std::size_t> redraws(n, 0);
  const std::size_t budget = 10 * n;
  // Each resample owns its stream; the redraw budget is checked afterwards so
  // the result does not depend on scheduling.
  parallel_for(n, [&](std::size_t i) {
    Rng rng(derive_seed(seed, i));
    std::uniform_int_distribution<std::size_t> pick(0, m - 1);
    std::vector<double> p(m), t(m);
    for (;;) {
      for (std::size_t k = 0; k < m; ++k) {
        const std::size_t j = pick(rng);
        p[k] = pred[j];
        t[k] = target[j];
      }
      std::optional<double> v;
      try {
        v = metric(p, t);
      } catch (const DataError&) {
      }
      if (v && std::isfinite(*v)) {
        values[i] = *v;
        return;
      }
      if (++redraws[i] > budget) return;
    }
  });
  if (std::accumulate(redraws.begin(), redraws.end(), std::size_t{0}) > budget)
    throw DataError("bootstrap_ci: metric undefined on too many resamples");
  std::sort(values.begin(), values.end());
  auto quantile = [&](double q) {
    const double h = q * static_cast<double>(n - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(n - 1, lo + 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  const double a = (1.0 - level) / 2.0;
  return {quantile(a), quantile(1.0 - a)};
}

const std::vector<std::string>& table2_metrics() {
  static const std::vector<std::string> names{"mse", "mae", "r2", "pearson", "brier", "auroc"};
  return names;
}

MetricFn table2_metric(const std::string& name) {
  using R = std::optional<double>;
  using S = std::span<const double>;
  if (name == "mse") return [](S p, S t) -> R { return regression_metrics(p, t).mse; };
  if (name == "mae") return [](S p, S t) -> R { return regression_metrics(p, t).mae; };
  if (name == "r2") return [](S p, S t) -> R { return regression_metrics(p, t).r2; };
  if (name == "pearson") return [](S p, S t) -> R { return regression_metrics(p, t).pearson; };
  if (name == "brier")
    return [](S p, S t) -> R { return brier_and_reliability(p, binary_labels(t)).brier; };
  if (name == "auroc") return [](S p, S t) -> R { return auroc(p, binary_labels(t)); };
  throw DataError("unknown metric " + name);
}

MetricsReport evaluate_predictions(std::span<const double> pred, std::span<const double> target,
                                   const std::optional<BootstrapOptions>& bootstrap) {
  MetricsReport r;
  r.regression = regression_metrics(pred, target);
  const auto labels = binary_labels(target);
  const Calibration cal = brier_and_reliability(pred, labels);
  r.brier = cal.brier;
  r.reliability = cal.bins;
  r.auroc = auroc(pred, labels);
  r.stratified = stratified_sens_spec(pred, target);
  if (bootstrap) {
    for (const auto& name : table2_metrics())
      r.ci[name] = bootstrap_ci(table2_metric(name), pred, target, bootstrap->n, bootstrap->level,
                                derive_seed(bootstrap->seed, name));
  }
  return r;
}

namespace {

std::string head(const ModelReport& r) { return r.model + "," + std::to_string(r.dim); }

std::string cell(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

std::optional<double> metric_value(const MetricsReport& m, const std::string& name) {
  if (name == "mse") return m.regression.mse;
  if (name == "mae") return m.regression.mae;
  if (name == "r2") return m.regression.r2;
  if (name == "pearson") return m.regression.pearson;
  if (name == "brier") return m.brier;
  return m.auroc;
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

}  // namespace

std::string table2_csv(std::span<const ModelReport> rows) {
  std::string s = "model,dim,params,mse,mae,r2,pearson,brier,auroc\n";
  for (const auto& r : rows) {
    s += head(r) + "," + std::to_string(r.params);
    for (const auto& name : table2_metrics()) s += "," + cell(metric_value(r.metrics, name));
    s += "\n";
  }
  return s;
}

std::string table2_ci_csv(std::span<const ModelReport> rows) {
  std::string s = "model,dim,metric,lo,hi\n";
  for (const auto& r : rows)
    for (const auto& name : table2_metrics()) {
      const auto it = r.metrics.ci.find(name);
      if (it == r.metrics.ci.end()) continue;
      s += head(r) + "," + name + "," + format_double(it->second.first) + "," + format_double(it->second.second) + "\n";
    }
  return s;
}

std::string table3_csv(std::span<const ModelReport> rows) {
  std::string s =
      "model,dim,healthy_sens,healthy_spec,subclinical_sens,subclinical_spec,keratoconus_sens,"
      "keratoconus_spec,balanced_accuracy\n";
  for (const auto& r : rows) {
    s += head(r);
    for (const auto& b : r.metrics.stratified.bins) s += "," + cell(b.sensitivity) + "," + cell(b.specificity);
    s += "," + cell(r.metrics.stratified.balanced_accuracy) + "\n";
  }
  return s;
}

std::string reliability_csv(std::span<const ModelReport> rows) {
  std::string s = "model,bin,mean_pred,frac_pos,count\n";
  for (const auto& r : rows)
    for (std::size_t b = 0; b < r.metrics.reliability.size(); ++b) {
      const auto& x = r.metrics.reliability[b];
      s += r.model + "," + std::to_string(b) + "," + format_double(x.mean_pred) + "," + format_double(x.frac_pos) +
           "," + std::to_string(x.count) + "\n";
    }
  return s;
}

nlohmann::json report_to_json(std::span<const ModelReport> rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j{{"model", r.model}, {"dim", r.dim}, {"params", r.params}};
    for (const auto& name : table2_metrics()) j[name] = opt_json(metric_value(r.metrics, name));
    nlohmann::json strat = nlohmann::json::object();
    for (std::size_t b = 0; b < 3; ++b) {
      const std::string bn(risk_bin_name(kRiskBins[b]));
      const auto& x = r.metrics.stratified.bins[b];
      strat[bn] = {{"sensitivity", opt_json(x.sensitivity)}, {"specificity", opt_json(x.specificity)}};
    }
    j["stratified"] = strat;
    j["balanced_accuracy"] = opt_json(r.metrics.stratified.balanced_accuracy);
    nlohmann::json rel = nlohmann::json::array();
    for (const auto& x : r.metrics.reliability)
      rel.push_back({{"mean_pred", x.mean_pred}, {"frac_pos", x.frac_pos}, {"count", x.count}});
    j["reliability"] = rel;
    nlohmann::json ci = nlohmann::json::object();
    for (const auto& [name, b] : r.metrics.ci) ci[name] = {b.first, b.second};
    j["ci"] = ci;
    out.push_back(j);
  }
  return out;
}

std::vector<ModelReport> report_from_json(const nlohmann::json& j) {
  auto opt = [](const nlohmann::json& v) -> std::optional<double> {
    if (v.is_null()) return std::nullopt;
    return v.get<double>();
  };
  std::vector<ModelReport> rows;
  try {
    for (const auto& x : j) {
      ModelReport r;
      r.model = x.at("model").get<std::string>();
      r.dim = x.at("dim").get<int>();
      r.params = x.at("params").get<std::size_t>();
      auto& m = r.metrics;
      m.regression = {x.at("mse").get<double>(), x.at("mae").get<double>(), x.at("r2").get<double>(),
                      opt(x.at("pearson"))};
      m.brier = x.at("brier").get<double>();
      m.auroc = x.at("auroc").get<double>();
      for (std::size_t b = 0; b < 3; ++b) {
        const auto& s = x.at("stratified").at(std::string(risk_bin_name(kRiskBins[b])));
        m.stratified.bins[b] = {opt(s.at("sensitivity")), opt(s.at("specificity"))};
      }
      m.stratified.balanced_accuracy = opt(x.at("balanced_accuracy"));
      for (const auto& rb : x.at("reliability"))
        m.reliability.push_back({rb.at("mean_pred").get<double>(), rb.at("frac_pos").get<double>(),
                                 rb.at("count").get<std::size_t>()});
      for (const auto& [name, b] : x.at("ci").items()) m.ci[name] = {b.at(0).get<double>(), b.at(1).get<double>()};
      rows.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("report json: ") + e.what());
  }
  return rows;
}

}  // namespace volab
