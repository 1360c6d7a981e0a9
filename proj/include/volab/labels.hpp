#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace volab {

// Two-component Gaussian mixture: component 0 is Healthy, component 1 is KC.
struct GmmModel {
  std::array<double, 2> pi{0.5, 0.5};
  std::array<std::vector<double>, 2> mu;
  std::array<std::vector<std::vector<double>>, 2> sigma;

  std::size_t dim() const { return mu[0].size(); }
  // Throws DataError unless priors sum to one and both covariances are SPD.
  void validate() const;
};

GmmModel gmm_from_json(const nlohmann::json& j);
nlohmann::json gmm_to_json(const GmmModel& model);
// Healthy at the origin, KC at (3, 3), unit covariances, equal priors.
GmmModel default_gmm();

// Posterior of `component` (0 or 1) evaluated in log space.
double gmm_component_posterior(std::span<const double> x, const GmmModel& model, int component);
// Posterior probability of KC (component 1).
double gmm_posterior(std::span<const double> x, const GmmModel& model);

enum class RiskBin { Healthy, Subclinical, Keratoconus };

// Healthy iff p <= 0.25, Keratoconus iff p >= 0.75, Subclinical otherwise.
RiskBin risk_bin(double p);
std::string_view risk_bin_name(RiskBin bin);
inline constexpr std::array<RiskBin, 3> kRiskBins{RiskBin::Healthy, RiskBin::Subclinical,
                                                  RiskBin::Keratoconus};

enum class Sex { Male, Female };

struct CohortRecord {
  std::string patient_id;
  std::string eye_id;
  std::string volume_path;
  double p_kc = 0.0;
  std::optional<double> age;
  std::optional<Sex> sex;
};

// Fold index per record. Whole patients are assigned greedily per p_kc bin of
// the patient mean with largest-remainder allocation across folds.
std::vector<std::size_t> stratified_patient_split(std::span<const CohortRecord> records,
                                                  std::size_t n_bins, std::size_t n_folds,
                                                  std::uint64_t seed);

// CSV with header patient_id,eye_id,volume_path,p_kc,age,sex.
std::vector<CohortRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, std::span<const CohortRecord> records);

}  // namespace volab
