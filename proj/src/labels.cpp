#include "volab/labels.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>

#include "volab/error.hpp"
#include "volab/io.hpp"
#include "volab/rng.hpp"

namespace volab {
namespace {

Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& rows) {
  const std::size_t n = rows.size();
  Eigen::MatrixXd m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    if (rows[i].size() != n) throw DataError("gmm: covariance is not square");
    for (std::size_t j = 0; j < n; ++j) m(i, j) = rows[i][j];
  }
  return m;
}

// log N(x | mu, sigma) via Cholesky.
double log_density(std::span<const double> x, const std::vector<double>& mu,
                   const std::vector<std::vector<double>>& sigma) {
  const std::size_t k = mu.size();
  const Eigen::MatrixXd s = to_matrix(sigma);
  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success) throw DataError("gmm: covariance is not positive definite");
  Eigen::VectorXd diff(k);
  for (std::size_t i = 0; i < k; ++i) diff(i) = x[i] - mu[i];
  const Eigen::VectorXd z = llt.matrixL().solve(diff);
  double log_det = 0.0;
  for (std::size_t i = 0; i < k; ++i) log_det += 2.0 * std::log(llt.matrixL()(i, i));
  return -0.5 * (static_cast<double>(k) * std::log(2.0 * std::numbers::pi) + log_det +
                 z.squaredNorm());
}

double logistic(double r) {
  if (r >= 0.0) return 1.0 / (1.0 + std::exp(-r));
  const double e = std::exp(r);
  return e / (1.0 + e);
}

}  // namespace

void GmmModel::validate() const {
  if (!(pi[0] >= 0.0 && pi[1] >= 0.0) || std::abs(pi[0] + pi[1] - 1.0) > 1e-12) {
    throw DataError("gmm: priors must be nonnegative and sum to 1");
  }
  const std::size_t k = mu[0].size();
  if (k == 0 || mu[1].size() != k) throw DataError("gmm: mean vectors must share a positive dimension");
  for (int c = 0; c < 2; ++c) {
    if (sigma[c].size() != k) throw DataError("gmm: covariance dimension mismatch");
    const Eigen::MatrixXd s = to_matrix(sigma[c]);
    if (!s.isApprox(s.transpose(), 1e-12)) throw DataError("gmm: covariance is not symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(s);
    if (llt.info() != Eigen::Success) throw DataError("gmm: covariance is not positive definite");
  }
}

GmmModel gmm_from_json(const nlohmann::json& j) {
  GmmModel m;
  try {
    const auto pi = j.at("pi").get<std::vector<double>>();
    const auto mu = j.at("mu").get<std::vector<std::vector<double>>>();
    const auto sigma = j.at("sigma").get<std::vector<std::vector<std::vector<double>>>>();
    if (pi.size() != 2 || mu.size() != 2 || sigma.size() != 2) {
      throw DataError("gmm: expected exactly two components");
    }
    m.pi = {pi[0], pi[1]};
    m.mu = {mu[0], mu[1]};
    m.sigma = {sigma[0], sigma[1]};
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("gmm json: ") + e.what());
  }
  m.validate();
  return m;
}

nlohmann::json gmm_to_json(const GmmModel& model) {
  return {{"pi", {model.pi[0], model.pi[1]}},
          {"mu", {model.mu[0], model.mu[1]}},
          {"sigma", {model.sigma[0], model.sigma[1]}}};
}

GmmModel default_gmm() {
  GmmModel m;
  m.pi = {0.5, 0.5};
  m.mu = {std::vector<double>{0.0, 0.0}, std::vector<double>{3.0, 3.0}};
  m.sigma = {std::vector<std::vector<double>>{{1.0, 0.0}, {0.0, 1.0}},
             std::vector<std::vector<double>>{{1.0, 0.0}, {0.0, 1.0}}};
  return m;
}

double gmm_component_posterior(std::span<const double> x, const GmmModel& model, int component) {
  if (component != 0 && component != 1) throw Error("gmm: component must be 0 or 1");
  if (x.size() != model.dim()) {
    throw DataError("gmm: index vector has dimension " + std::to_string(x.size()) +
                    ", model expects " + std::to_string(model.dim()));
  }
  if (model.pi[1] == 0.0) return component == 0 ? 1.0 : 0.0;
  if (model.pi[0] == 0.0) return component == 0 ? 0.0 : 1.0;
  const double l0 = std::log(model.pi[0]) + log_density(x, model.mu[0], model.sigma[0]);
  const double l1 = std::log(model.pi[1]) + log_density(x, model.mu[1], model.sigma[1]);
  // The smaller posterior is evaluated directly and the other is its
  // complement, so the pair sums to one exactly.
  const double r = l1 - l0;
  if (r >= 0.0) {
    const double p0 = logistic(-r);
    return component == 0 ? p0 : 1.0 - p0;
  }
  const double p1 = logistic(r);
  return component == 1 ? p1 : 1.0 - p1;
}

double gmm_posterior(std::span<const double> x, const GmmModel& model) {
  return gmm_component_posterior(x, model, 1);
}

RiskBin risk_bin(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw DataError("risk_bin: probability outside [0, 1]");
  if (p <= 0.25) return RiskBin::Healthy;
  if (p >= 0.75) return RiskBin::Keratoconus;
  return RiskBin::Subclinical;
}

std::string_view risk_bin_name(RiskBin bin) {
  switch (bin) {
    case RiskBin::Healthy:
      return "healthy";
    case RiskBin::Subclinical:
      return "subclinical";
    case RiskBin::Keratoconus:
      return "keratoconus";
  }
  return "unknown";
}

std::vector<std::size_t> stratified_patient_split(std::span<const CohortRecord> records,
                                                  std::size_t n_bins, std::size_t n_folds,
                                                  std::uint64_t seed) {
  if (n_folds < 2) throw DataError("split: need at least 2 folds");
  if (n_bins < 1) throw DataError("split: need at least 1 bin");
  std::map<std::string, std::vector<std::size_t>> by_patient;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].patient_id.empty()) throw DataError("split: record without patient_id");
    by_patient[records[i].patient_id].push_back(i);
  }
  if (by_patient.size() < n_folds) {
    throw DataError("split: " + std::to_string(by_patient.size()) + " patients for " +
                    std::to_string(n_folds) + " folds");
  }

  std::vector<std::vector<std::string>> bins(n_bins);
  for (const auto& [pid, idx] : by_patient) {
    double mean = 0.0;
    for (std::size_t i : idx) mean += records[i].p_kc;
    mean /= static_cast<double>(idx.size());
    const auto b = std::min(n_bins - 1, static_cast<std::size_t>(mean * static_cast<double>(n_bins)));
    bins[b].push_back(pid);
  }

  Rng rng(derive_seed(seed, "split"));
  std::vector<std::size_t> fold_patients(n_folds, 0);
  std::vector<std::size_t> fold_of(records.size(), 0);
  for (auto& members : bins) {
    if (members.empty()) continue;
    std::shuffle(members.begin(), members.end(), rng);
    const std::size_t base = members.size() / n_folds;
    std::size_t extra = members.size() % n_folds;
    std::vector<std::size_t> quota(n_folds, base);
    // Remainders go to the folds that currently hold the fewest patients.
    std::vector<std::size_t> order(n_folds);
    for (std::size_t f = 0; f < n_folds; ++f) order[f] = f;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return fold_patients[a] < fold_patients[b];
    });
    for (std::size_t k = 0; k < extra; ++k) ++quota[order[k]];
    std::size_t cursor = 0;
    for (std::size_t f = 0; f < n_folds; ++f) {
      for (std::size_t q = 0; q < quota[f]; ++q, ++cursor) {
        for (std::size_t i : by_patient[members[cursor]]) fold_of[i] = f;
      }
      fold_patients[f] += quota[f];
    }
  }
  return fold_of;
}

std::vector<CohortRecord> read_manifest(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty() || lines[0] != "patient_id,eye_id,volume_path,p_kc,age,sex") {
    throw DataError("manifest " + path.string() + ": missing or unexpected header");
  }
  std::vector<CohortRecord> out;
  for (std::size_t n = 1; n < lines.size(); ++n) {
    const auto f = split_csv_line(lines[n]);
    if (f.size() != 6) {
      throw DataError("manifest line " + std::to_string(n + 1) + ": expected 6 fields");
    }
    CohortRecord r;
    r.patient_id = f[0];
    r.eye_id = f[1];
    r.volume_path = f[2];
    r.p_kc = parse_double(f[3]);
    if (!(r.p_kc >= 0.0 && r.p_kc <= 1.0)) {
      throw DataError("manifest line " + std::to_string(n + 1) + ": p_kc outside [0, 1]");
    }
    if (!f[4].empty()) r.age = parse_double(f[4]);
    if (f[5] == "M") r.sex = Sex::Male;
    else if (f[5] == "F") r.sex = Sex::Female;
    else if (!f[5].empty()) throw DataError("manifest line " + std::to_string(n + 1) + ": sex must be M or F");
    out.push_back(std::move(r));
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, std::span<const CohortRecord> records) {
  std::ostringstream os;
  os << "patient_id,eye_id,volume_path,p_kc,age,sex\n";
  for (const auto& r : records) {
    os << r.patient_id << ',' << r.eye_id << ',' << r.volume_path << ',' << format_double(r.p_kc)
       << ',' << (r.age ? format_double(*r.age) : "") << ','
       << (r.sex ? (*r.sex == Sex::Male ? "M" : "F") : "") << '\n';
  }
  write_text(path, os.str());
}

}  // namespace volab
