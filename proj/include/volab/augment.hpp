#pragma once

#include <array>
#include <vector>

#include "json.hpp"
#include "volab/rng.hpp"
#include "volab/volume.hpp"

namespace volab {

struct ElasticConfig {
  double grid_spacing = 10.0;   // voxels between control points
  double smooth_sigma = 10.0;   // voxels
  double magnitude_alpha = 1.0; // voxels
};

struct AugmentConfig {
  double flip_prob = 0.5;
  double max_rotation_degrees = 15.0;
  ElasticConfig elastic;
  bool flip_enabled = true;
  bool rotation_enabled = true;
  bool elastic_enabled = true;

  void validate() const;
};

AugmentConfig augment_config_from_json(const nlohmann::json& j);
nlohmann::json augment_config_to_json(const AugmentConfig& cfg);

// Reverses one axis (0 slices, 1 height, 2 width).
Volume flip(const Volume& v, int axis);

// Rotation about the volume center by Euler angles (degrees) about axes 0, 1
// and 2, applied in that order. Trilinear resampling, zero fill outside.
// Multiples of 90 degrees use exact matrices.
Volume rotate(const Volume& v, const std::array<double, 3>& angles_degrees);

// Random height/width flips followed by a random rotation.
Volume rigid_augment(const Volume& v, const AugmentConfig& cfg, Rng& rng);

// Coarse control grid of 3-component displacements.
struct ControlGrid {
  Dims3 dims{};
  std::vector<double> values;  // dims product x 3, component fastest
  double at(std::size_t z, std::size_t y, std::size_t x, int c) const {
    return values[((z * dims[1] + y) * dims[2] + x) * 3 + c];
  }
};

struct ElasticField {
  ControlGrid raw;       // unit normal samples
  ControlGrid smoothed;  // Gaussian-smoothed and scaled by alpha
  double spacing = 10.0;
};

ElasticField sample_elastic_field(const Dims3& volume_dims, const ElasticConfig& cfg, Rng& rng);
// Displacement (voxels) at a voxel position, trilinearly upsampled.
std::array<double, 3> displacement_at(const ElasticField& field, std::size_t z, std::size_t y,
                                      std::size_t x);
Volume apply_elastic_field(const Volume& v, const ElasticField& field);
Volume elastic_deform(const Volume& v, const AugmentConfig& cfg, Rng& rng);

// Full chain used during training: rigid, then elastic, per enabled flags.
Volume augment(const Volume& v, const AugmentConfig& cfg, Rng& rng);

}  // namespace volab
