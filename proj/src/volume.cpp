#include "volab/volume.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "volab/error.hpp"
#include "volab/io.hpp"

namespace volab {

Volume::Volume(Dims3 dims, Spacing3 spacing, std::vector<float> data)
    : dims_(dims), spacing_(spacing), data_(std::move(data)) {
  for (int a = 0; a < 3; ++a) {
    if (dims_[a] == 0) throw DataError("volume dims must be >= 1");
    if (!(spacing_[a] > 0.0) || !std::isfinite(spacing_[a])) {
      throw DataError("volume spacing must be positive");
    }
  }
  if (data_.size() != dims_[0] * dims_[1] * dims_[2]) {
    throw DataError("volume data length does not match dims");
  }
  for (float f : data_) {
    if (!std::isfinite(f)) throw DataError("volume contains non-finite values");
  }
}

Volume::Volume(Dims3 dims, Spacing3 spacing, float fill)
    : Volume(dims, spacing, std::vector<float>(dims[0] * dims[1] * dims[2], fill)) {}

double Volume::mean() const {
  double s = 0.0;
  for (float f : data_) s += f;
  return s / static_cast<double>(data_.size());
}

double Volume::stddev() const {
  const double m = mean();
  double s = 0.0;
  for (float f : data_) s += (f - m) * (f - m);
  return std::sqrt(s / static_cast<double>(data_.size()));
}

void write_volume(const std::filesystem::path& path, const Volume& v) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write volume " + path.string());
  out.write("VOLB", 4);
  binary::write_u8(out, 1);
  for (std::size_t d : v.dims()) binary::write_u32(out, static_cast<std::uint32_t>(d));
  for (double s : v.spacing()) binary::write_f32(out, static_cast<float>(s));
  for (float f : v.data()) binary::write_f32(out, f);
  if (!out) throw DataError("write failed for volume " + path.string());
}

Volume read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open volume " + path.string());
  binary::expect_magic(in, "VOLB", "volume " + path.string());
  const auto version = binary::read_u8(in);
  if (version != 1) throw DataError("volume " + path.string() + ": unsupported version");
  Dims3 dims{};
  for (auto& d : dims) d = binary::read_u32(in);
  Spacing3 spacing{};
  for (auto& s : spacing) s = binary::read_f32(in);
  const std::size_t n = dims[0] * dims[1] * dims[2];
  if (n == 0 || n > (std::size_t{1} << 32)) throw DataError("volume " + path.string() + ": bad dims");
  std::vector<float> data(n);
  for (float& f : data) f = binary::read_f32(in);
  return Volume(dims, spacing, std::move(data));
}

double sample_trilinear(const Volume& v, double z, double y, double x, Outside mode) {
  const auto& d = v.dims();
  const double c[3] = {z, y, x};
  std::size_t lo[3], hi[3];
  double frac[3];
  for (int a = 0; a < 3; ++a) {
    double u = c[a];
    const double top = static_cast<double>(d[a] - 1);
    if (u < 0.0 || u > top) {
      if (mode == Outside::Zero) return 0.0;
      u = std::clamp(u, 0.0, top);
    }
    const double f = std::floor(u);
    lo[a] = static_cast<std::size_t>(f);
    hi[a] = std::min(lo[a] + 1, d[a] - 1);
    frac[a] = u - f;
  }
  double acc = 0.0;
  for (int corner = 0; corner < 8; ++corner) {
    double w = 1.0;
    std::size_t idx[3];
    for (int a = 0; a < 3; ++a) {
      const bool up = (corner >> (2 - a)) & 1;
      w *= up ? frac[a] : 1.0 - frac[a];
      idx[a] = up ? hi[a] : lo[a];
    }
    if (w != 0.0) acc += w * v.at(idx[0], idx[1], idx[2]);
  }
  return acc;
}

Volume resample_trilinear(const Volume& v, const Spacing3& target) {
  Dims3 out_dims{};
  double step[3];
  for (int a = 0; a < 3; ++a) {
    if (!(target[a] > 0.0)) throw DataError("resample: target spacing must be positive");
    const double extent = static_cast<double>(v.dims()[a]) * v.spacing()[a];
    if (!(extent > 0.0)) throw DataError("resample: degenerate input extent");
    out_dims[a] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(extent / target[a])));
    step[a] = target[a] / v.spacing()[a];
  }
  Volume out(out_dims, target);
  for (std::size_t z = 0; z < out_dims[0]; ++z) {
    const double sz = (static_cast<double>(z) + 0.5) * step[0] - 0.5;
    for (std::size_t y = 0; y < out_dims[1]; ++y) {
      const double sy = (static_cast<double>(y) + 0.5) * step[1] - 0.5;
      for (std::size_t x = 0; x < out_dims[2]; ++x) {
        const double sx = (static_cast<double>(x) + 0.5) * step[2] - 0.5;
        out.at(z, y, x) = static_cast<float>(sample_trilinear(v, sz, sy, sx, Outside::Clamp));
      }
    }
  }
  return out;
}

Volume crop_or_pad(const Volume& v, const Dims3& target) {
  for (std::size_t t : target) {
    if (t == 0) throw DataError("crop_or_pad: target dims must be >= 1");
  }
  // src index = dst index + shift (shift negative when padding).
  long shift[3];
  for (int a = 0; a < 3; ++a) {
    const long s = static_cast<long>(v.dims()[a]), t = static_cast<long>(target[a]);
    shift[a] = t <= s ? (s - t) / 2 : -((t - s) / 2);
  }
  Volume out(target, v.spacing());
  for (std::size_t z = 0; z < target[0]; ++z) {
    const long sz = static_cast<long>(z) + shift[0];
    if (sz < 0 || sz >= static_cast<long>(v.dims()[0])) continue;
    for (std::size_t y = 0; y < target[1]; ++y) {
      const long sy = static_cast<long>(y) + shift[1];
      if (sy < 0 || sy >= static_cast<long>(v.dims()[1])) continue;
      for (std::size_t x = 0; x < target[2]; ++x) {
        const long sx = static_cast<long>(x) + shift[2];
        if (sx < 0 || sx >= static_cast<long>(v.dims()[2])) continue;
        out.at(z, y, x) = v.at(sz, sy, sx);
      }
    }
  }
  return out;
}

Volume zscore_normalize(const Volume& v) {
  const double mu = v.mean();
  const double sigma = v.stddev();
  if (!(sigma > 1e-8)) throw DataError("zscore: volume is (nearly) constant");
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>((v.data()[i] - mu) / sigma);
  }
  return Volume(v.dims(), v.spacing(), std::move(out));
}

std::size_t slice_index_for_angle(double angle_degrees, std::size_t slices) {
  if (slices == 0) throw DataError("slice_index_for_angle: no slices");
  const double step = 360.0 / static_cast<double>(slices);
  double a = std::fmod(angle_degrees, 360.0);
  if (a < 0.0) a += 360.0;
  return static_cast<std::size_t>(std::llround(a / step)) % slices;
}

Image extract_bscan(const Volume& v, std::size_t slice_index, std::size_t height,
                    std::size_t width) {
  if (slice_index >= v.dims()[0]) {
    throw DataError("extract_bscan: slice " + std::to_string(slice_index) + " out of range");
  }
  if (height == 0 || width == 0) throw DataError("extract_bscan: empty target");
  Image img{height, width, std::vector<float>(height * width)};
  const double sy = static_cast<double>(v.dims()[1]) / static_cast<double>(height);
  const double sx = static_cast<double>(v.dims()[2]) / static_cast<double>(width);
  const double z = static_cast<double>(slice_index);
  for (std::size_t y = 0; y < height; ++y) {
    const double uy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    for (std::size_t x = 0; x < width; ++x) {
      const double ux = (static_cast<double>(x) + 0.5) * sx - 0.5;
      img.data[y * width + x] = static_cast<float>(sample_trilinear(v, z, uy, ux, Outside::Clamp));
    }
  }
  return img;
}

Volume preprocess_volume_3d(const Volume& native) {
  const Volume iso =
      resample_trilinear(native, {kIsotropicSpacing, kIsotropicSpacing, kIsotropicSpacing});
  return crop_or_pad(iso, kVolumeInputDims);
}

}  // namespace volab
