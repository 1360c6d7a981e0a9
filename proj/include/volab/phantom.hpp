#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "volab/labels.hpp"
#include "volab/volume.hpp"

namespace volab {

struct PhantomSpec {
  Dims3 shape{32, 32, 32};
  double anomaly_amplitude = 1.0;
  double anomaly_sparsity = 0.2;  // fraction of voxels carrying signal
  double noise_sigma = 0.05;
  GmmModel label_gmm = default_gmm();
  std::uint64_t seed = 0;
  // Mean perturbation energy that places x exactly on the KC mean.
  double reference_energy = 0.2;

  void validate() const;
};

struct Phantom {
  Volume volume;
  std::vector<double> index_vector;  // (energy term, spread term)
  double p_kc = 0.0;
};

// Smooth corneal sheet + amplitude-scaled bumps on a sparse random support +
// Gaussian noise. The perturbation is normalized so its mean energy over the
// volume is exactly amplitude^2 * (support fraction); x moves from the
// Healthy mean towards the KC mean in proportion to that energy, with the
// second coordinate scaled by the support's spatial spread.
Phantom generate_phantom(const PhantomSpec& spec);

struct PhantomDatasetSpec {
  std::size_t n = 200;
  Dims3 shape{32, 32, 32};
  double amplitude_min = 0.0;
  double amplitude_max = 1.2;
  double anomaly_sparsity = 0.2;
  double noise_sigma = 0.05;
  GmmModel label_gmm = default_gmm();
  std::uint64_t seed = 0;
};

// Writes volumes/NNNN.volb, manifest.csv (paths relative to `out_dir`) and
// phantom_index.csv (record, amplitude, x). Two eyes per patient.
std::vector<CohortRecord> write_phantom_dataset(const PhantomDatasetSpec& spec,
                                                const std::filesystem::path& out_dir);

}  // namespace volab
