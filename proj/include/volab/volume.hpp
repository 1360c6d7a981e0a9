#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <vector>

namespace volab {

using Dims3 = std::array<std::size_t, 3>;
using Spacing3 = std::array<double, 3>;

// Dense scalar grid in slice-major order (slices x height x width) with the
// physical voxel size in millimeters along each axis.
class Volume {
 public:
  Volume(Dims3 dims, Spacing3 spacing, std::vector<float> data);
  Volume(Dims3 dims, Spacing3 spacing, float fill = 0.0f);

  const Dims3& dims() const { return dims_; }
  const Spacing3& spacing() const { return spacing_; }
  std::size_t size() const { return data_.size(); }
  const std::vector<float>& data() const { return data_; }
  std::vector<float>& data() { return data_; }

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const {
    return (z * dims_[1] + y) * dims_[2] + x;
  }
  float at(std::size_t z, std::size_t y, std::size_t x) const { return data_[index(z, y, x)]; }
  float& at(std::size_t z, std::size_t y, std::size_t x) { return data_[index(z, y, x)]; }

  double mean() const;
  double stddev() const;

 private:
  Dims3 dims_;
  Spacing3 spacing_;
  std::vector<float> data_;
};

struct Image {
  std::size_t height = 0, width = 0;
  std::vector<float> data;
  float at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
};

// "VOLB", version u8, dims 3 x u32, spacing 3 x f32, f32 voxels.
void write_volume(const std::filesystem::path& path, const Volume& v);
Volume read_volume(const std::filesystem::path& path);

enum class Outside { Clamp, Zero };

// Trilinear sample at continuous voxel coordinates.
double sample_trilinear(const Volume& v, double z, double y, double x, Outside mode);

// Output dims round(n * spacing / target), at least 1; voxel centers are
// aligned and samples beyond the edge clamp to the border.
Volume resample_trilinear(const Volume& v, const Spacing3& target_spacing);

// Centered crop (offset floor((src - tgt) / 2)) or symmetric zero padding,
// chosen per axis.
Volume crop_or_pad(const Volume& v, const Dims3& target);

// Instance z-score with the population standard deviation. Throws DataError
// when the standard deviation is below 1e-8.
Volume zscore_normalize(const Volume& v);

// Radial slice index for an angle when slices are spread evenly over 360 deg.
std::size_t slice_index_for_angle(double angle_degrees, std::size_t slices);

// Bilinear resize of one slice to height x width.
Image extract_bscan(const Volume& v, std::size_t slice_index, std::size_t height = 224,
                    std::size_t width = 224);

// Native device geometry: 24 radial scans of 1800 x 1024 pixels over a
// 16 x 7 mm field; slices spaced so the resampled angular axis spans 252
// voxels.
inline constexpr Dims3 kNativeDims{24, 1800, 1024};
inline constexpr Spacing3 kNativeSpacing{1.5, 16.0 / 1800.0, 7.0 / 1024.0};
inline constexpr double kIsotropicSpacing = 0.143;
inline constexpr Dims3 kVolumeInputDims{112, 112, 80};

// Resample to 143 um isotropic and crop/pad to 112 x 112 x 80.
Volume preprocess_volume_3d(const Volume& native);

}  // namespace volab
