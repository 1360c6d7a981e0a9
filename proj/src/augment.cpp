#include "volab/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "volab/error.hpp"

namespace volab {

void AugmentConfig::validate() const {
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw DataError("augment: flip_prob outside [0,1]");
  if (!(max_rotation_degrees >= 0.0)) throw DataError("augment: negative max rotation");
  if (!(elastic.grid_spacing > 0.0) || !(elastic.smooth_sigma > 0.0)) {
    throw DataError("augment: elastic grid spacing and sigma must be positive");
  }
  if (!(elastic.magnitude_alpha >= 0.0)) throw DataError("augment: negative elastic alpha");
}

AugmentConfig augment_config_from_json(const nlohmann::json& j) {
  AugmentConfig c;
  c.flip_prob = j.value("flip_prob", c.flip_prob);
  c.max_rotation_degrees = j.value("max_rotation_degrees", c.max_rotation_degrees);
  c.flip_enabled = j.value("flip_enabled", c.flip_enabled);
  c.rotation_enabled = j.value("rotation_enabled", c.rotation_enabled);
  c.elastic_enabled = j.value("elastic_enabled", c.elastic_enabled);
  if (j.contains("elastic")) {
    const auto& e = j.at("elastic");
    c.elastic.grid_spacing = e.value("grid_spacing", c.elastic.grid_spacing);
    c.elastic.smooth_sigma = e.value("smooth_sigma", c.elastic.smooth_sigma);
    c.elastic.magnitude_alpha = e.value("magnitude_alpha", c.elastic.magnitude_alpha);
  }
  c.validate();
  return c;
}

nlohmann::json augment_config_to_json(const AugmentConfig& c) {
  return {{"flip_prob", c.flip_prob},
          {"max_rotation_degrees", c.max_rotation_degrees},
          {"flip_enabled", c.flip_enabled},
          {"rotation_enabled", c.rotation_enabled},
          {"elastic_enabled", c.elastic_enabled},
          {"elastic",
           {{"grid_spacing", c.elastic.grid_spacing},
            {"smooth_sigma", c.elastic.smooth_sigma},
            {"magnitude_alpha", c.elastic.magnitude_alpha}}}};
}

Volume flip(const Volume& v, int axis) {
  if (axis < 0 || axis > 2) throw Error("flip: axis must be 0, 1 or 2");
  const auto& d = v.dims();
  Volume out(d, v.spacing());
  for (std::size_t z = 0; z < d[0]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[2]; ++x) {
        std::size_t s[3] = {z, y, x};
        s[axis] = d[axis] - 1 - s[axis];
        out.at(z, y, x) = v.at(s[0], s[1], s[2]);
      }
  return out;
}

namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

// cos/sin with exact values on multiples of 90 degrees.
std::pair<double, double> cos_sin_degrees(double deg) {
  const double q = deg / 90.0;
  if (std::abs(q - std::round(q)) < 1e-12) {
    const long k = ((std::lround(q) % 4) + 4) % 4;
    static constexpr double c[4] = {1, 0, -1, 0};
    static constexpr double s[4] = {0, 1, 0, -1};
    return {c[k], s[k]};
  }
  const double r = deg * std::numbers::pi / 180.0;
  return {std::cos(r), std::sin(r)};
}

Mat3 axis_rotation(int axis, double deg) {
  const auto [c, s] = cos_sin_degrees(deg);
  const int a = (axis + 1) % 3, b = (axis + 2) % 3;
  Mat3 m{};
  m[axis][axis] = 1.0;
  m[a][a] = c;
  m[a][b] = -s;
  m[b][a] = s;
  m[b][b] = c;
  return m;
}

Mat3 matmul3(const Mat3& p, const Mat3& q) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i][j] += p[i][k] * q[k][j];
  return r;
}

}  // namespace

Volume rotate(const Volume& v, const std::array<double, 3>& angles) {
  // Forward rotation R = R2 R1 R0; sampling uses the inverse (transpose).
  const Mat3 r = matmul3(axis_rotation(2, angles[2]),
                         matmul3(axis_rotation(1, angles[1]), axis_rotation(0, angles[0])));
  const auto& d = v.dims();
  const double c[3] = {(d[0] - 1) / 2.0, (d[1] - 1) / 2.0, (d[2] - 1) / 2.0};
  Volume out(d, v.spacing());
  for (std::size_t z = 0; z < d[0]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[2]; ++x) {
        const double p[3] = {z - c[0], y - c[1], x - c[2]};
        double s[3];
        for (int i = 0; i < 3; ++i) {
          s[i] = c[i] + r[0][i] * p[0] + r[1][i] * p[1] + r[2][i] * p[2];
          // Snap round-off so exact permutations land on grid points.
          const double rs = std::round(s[i]);
          if (std::abs(s[i] - rs) < 1e-9) s[i] = rs;
        }
        out.at(z, y, x) = static_cast<float>(sample_trilinear(v, s[0], s[1], s[2], Outside::Zero));
      }
  return out;
}

Volume rigid_augment(const Volume& v, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Volume out = v;
  // Draw every variate regardless of flags so streams stay aligned.
  const bool flip_h = u01(rng) < cfg.flip_prob;
  const bool flip_w = u01(rng) < cfg.flip_prob;
  std::uniform_real_distribution<double> angle(-cfg.max_rotation_degrees, cfg.max_rotation_degrees);
  std::array<double, 3> angles{angle(rng), angle(rng), angle(rng)};
  if (cfg.flip_enabled) {
    if (flip_h) out = flip(out, 1);
    if (flip_w) out = flip(out, 2);
  }
  if (cfg.rotation_enabled && cfg.max_rotation_degrees > 0.0) out = rotate(out, angles);
  return out;
}

namespace {

// Full normalized Gaussian smoothing along one axis of a control grid.
void smooth_axis(ControlGrid& g, int axis, double sigma) {
  const std::size_t n = g.dims[axis];
  if (n == 1) return;
  std::vector<double> w(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double dd = static_cast<double>(i) - static_cast<double>(j);
      w[i * n + j] = std::exp(-dd * dd / (2.0 * sigma * sigma));
      total += w[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) w[i * n + j] /= total;
  }
  const ControlGrid src = g;
  for (std::size_t z = 0; z < g.dims[0]; ++z)
    for (std::size_t y = 0; y < g.dims[1]; ++y)
      for (std::size_t x = 0; x < g.dims[2]; ++x)
        for (int c = 0; c < 3; ++c) {
          std::size_t pos[3] = {z, y, x};
          const std::size_t i = pos[axis];
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            pos[axis] = j;
            acc += w[i * n + j] * src.at(pos[0], pos[1], pos[2], c);
          }
          g.values[((z * g.dims[1] + y) * g.dims[2] + x) * 3 + c] = acc;
        }
}

}  // namespace

ElasticField sample_elastic_field(const Dims3& dims, const ElasticConfig& cfg, Rng& rng) {
  ElasticField f;
  f.spacing = cfg.grid_spacing;
  for (int a = 0; a < 3; ++a) {
    f.raw.dims[a] =
        static_cast<std::size_t>(std::ceil((static_cast<double>(dims[a]) - 1.0) / cfg.grid_spacing)) + 1;
  }
  f.raw.values.resize(f.raw.dims[0] * f.raw.dims[1] * f.raw.dims[2] * 3);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : f.raw.values) v = normal(rng);
  f.smoothed = f.raw;
  const double sigma_grid = cfg.smooth_sigma / cfg.grid_spacing;
  for (int a = 0; a < 3; ++a) smooth_axis(f.smoothed, a, sigma_grid);
  for (double& v : f.smoothed.values) v *= cfg.magnitude_alpha;
  return f;
}

std::array<double, 3> displacement_at(const ElasticField& f, std::size_t z, std::size_t y,
                                      std::size_t x) {
  const auto& g = f.smoothed;
  const double p[3] = {z / f.spacing, y / f.spacing, x / f.spacing};
  std::size_t lo[3], hi[3];
  double fr[3];
  for (int a = 0; a < 3; ++a) {
    const double u = std::min(p[a], static_cast<double>(g.dims[a] - 1));
    lo[a] = static_cast<std::size_t>(std::floor(u));
    hi[a] = std::min(lo[a] + 1, g.dims[a] - 1);
    fr[a] = u - std::floor(u);
  }
  std::array<double, 3> d{0, 0, 0};
  for (int corner = 0; corner < 8; ++corner) {
    double w = 1.0;
    std::size_t idx[3];
    for (int a = 0; a < 3; ++a) {
      const bool up = (corner >> (2 - a)) & 1;
      w *= up ? fr[a] : 1.0 - fr[a];
      idx[a] = up ? hi[a] : lo[a];
    }
    if (w == 0.0) continue;
    for (int c = 0; c < 3; ++c) d[c] += w * g.at(idx[0], idx[1], idx[2], c);
  }
  return d;
}

Volume apply_elastic_field(const Volume& v, const ElasticField& field) {
  const auto& d = v.dims();
  Volume out(d, v.spacing());
  for (std::size_t z = 0; z < d[0]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[2]; ++x) {
        const auto u = displacement_at(field, z, y, x);
        out.at(z, y, x) = static_cast<float>(
            sample_trilinear(v, z + u[0], y + u[1], x + u[2], Outside::Clamp));
      }
  return out;
}

Volume elastic_deform(const Volume& v, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  const ElasticField field = sample_elastic_field(v.dims(), cfg.elastic, rng);
  if (cfg.elastic.magnitude_alpha == 0.0) return v;
  return apply_elastic_field(v, field);
}

Volume augment(const Volume& v, const AugmentConfig& cfg, Rng& rng) {
  Volume out = rigid_augment(v, cfg, rng);
  if (cfg.elastic_enabled) out = elastic_deform(out, cfg, rng);
  return out;
}

}  // namespace volab
