#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace volab {

struct RegressionMetrics {
  double mse = 0.0;
  double mae = 0.0;
  double r2 = 0.0;
  std::optional<double> pearson;  // absent for a constant prediction
};

// Throws DataError on length mismatch, empty input, or a constant target
// (r2 undefined).
RegressionMetrics regression_metrics(std::span<const double> pred, std::span<const double> target);

// 1 where p_kc > 0.5.
std::vector<int> binary_labels(std::span<const double> target);

// Mann-Whitney form, ties count one half. Throws DataError unless both
// classes are present.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct ReliabilityBin {
  double mean_pred = 0.0;
  double frac_pos = 0.0;
  std::size_t count = 0;
};

struct Calibration {
  double brier = 0.0;
  std::vector<ReliabilityBin> bins;  // equal-frequency, ascending prediction
};

// Bins are consecutive runs of the prediction-sorted sample (ties by input
// order); the first N mod bins bins take one extra sample.
Calibration brier_and_reliability(std::span<const double> pred, std::span<const int> labels,
                                  std::size_t n_bins = 10);

struct BinRates {
  std::optional<double> sensitivity;
  std::optional<double> specificity;
};

struct StratifiedReport {
  std::array<BinRates, 3> bins;                // Healthy, Subclinical, Keratoconus
  std::optional<double> balanced_accuracy;     // absent if any sensitivity is
};

// One-vs-rest bin membership: true bin from the target, predicted bin from
// the prediction, both via risk_bin.
StratifiedReport stratified_sens_spec(std::span<const double> pred, std::span<const double> target);

// Metric over (pred, target); nullopt when undefined on a resample.
using MetricFn = std::function<std::optional<double>(std::span<const double>, std::span<const double>)>;

// Percentile interval over sample-level resamples with replacement. Resample
// i draws from its own stream derive_seed(seed, i); undefined resamples are
// redrawn from the same stream, at most 10n redraws in total.
std::pair<double, double> bootstrap_ci(const MetricFn& metric, std::span<const double> pred,
                                       std::span<const double> target, std::size_t n = 10000,
                                       double level = 0.95, std::uint64_t seed = 0);

struct MetricsReport {
  RegressionMetrics regression;
  double brier = 0.0;
  double auroc = 0.0;
  std::vector<ReliabilityBin> reliability;
  StratifiedReport stratified;
  std::map<std::string, std::pair<double, double>> ci;  // by column name
};

struct BootstrapOptions {
  std::size_t n = 10000;
  double level = 0.95;
  std::uint64_t seed = 0;
};

MetricsReport evaluate_predictions(std::span<const double> pred, std::span<const double> target,
                                   const std::optional<BootstrapOptions>& bootstrap = std::nullopt);

// Table-2 metric columns in order: mse, mae, r2, pearson, brier, auroc.
const std::vector<std::string>& table2_metrics();
MetricFn table2_metric(const std::string& name);

struct ModelReport {
  std::string model;
  int dim = 3;
  std::size_t params = 0;
  MetricsReport metrics;
};

// model,dim,params,mse,mae,r2,pearson,brier,auroc
std::string table2_csv(std::span<const ModelReport> rows);
// model,dim,metric,lo,hi
std::string table2_ci_csv(std::span<const ModelReport> rows);
// model,dim,healthy_sens,healthy_spec,...,balanced_accuracy; absent cells empty
std::string table3_csv(std::span<const ModelReport> rows);
// model,bin,mean_pred,frac_pos,count
std::string reliability_csv(std::span<const ModelReport> rows);

nlohmann::json report_to_json(std::span<const ModelReport> rows);
std::vector<ModelReport> report_from_json(const nlohmann::json& j);

}  // namespace volab
