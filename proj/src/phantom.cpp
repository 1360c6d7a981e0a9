#include "volab/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "volab/error.hpp"
#include "volab/io.hpp"
#include "volab/rng.hpp"

namespace volab {

void PhantomSpec::validate() const {
  for (std::size_t d : shape) {
    if (d == 0) throw DataError("phantom: shape dims must be >= 1");
  }
  if (!(anomaly_amplitude >= 0.0)) throw DataError("phantom: amplitude must be >= 0");
  if (!(anomaly_sparsity > 0.0 && anomaly_sparsity <= 1.0)) {
    throw DataError("phantom: sparsity must be in (0, 1]");
  }
  if (!(noise_sigma >= 0.0)) throw DataError("phantom: noise sigma must be >= 0");
  if (!(reference_energy > 0.0)) throw DataError("phantom: reference energy must be > 0");
  label_gmm.validate();
  if (label_gmm.dim() != 2) throw DataError("phantom: label GMM must be 2-dimensional");
}

namespace {

// Separable Gaussian blur with zero boundary contribution, renormalized.
std::vector<double> blur(const std::vector<double>& in, const Dims3& d, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  std::vector<double> cur = in, next(in.size());
  const std::size_t stride[3] = {d[1] * d[2], d[2], 1};
  for (int a = 0; a < 3; ++a) {
    const long n = static_cast<long>(d[a]);
    for (std::size_t idx = 0; idx < cur.size(); ++idx) {
      const long pos = static_cast<long>((idx / stride[a]) % d[a]);
      double acc = 0.0, wsum = 0.0;
      for (int o = -radius; o <= radius; ++o) {
        const long q = pos + o;
        if (q < 0 || q >= n) continue;
        const double w = k[o + radius];
        acc += w * cur[idx + (q - pos) * static_cast<long>(stride[a])];
        wsum += w;
      }
      next[idx] = acc / wsum;
    }
    std::swap(cur, next);
  }
  return cur;
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const Dims3& d = spec.shape;
  const std::size_t n = d[0] * d[1] * d[2];
  Rng support_rng(derive_seed(spec.seed, "support"));
  Rng noise_rng(derive_seed(spec.seed, "noise"));
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<double> field(n);
  for (double& v : field) v = normal(support_rng);
  field = blur(field, d, 1.5);

  // Support: the k largest field values.
  const std::size_t k =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(spec.anomaly_sparsity * n)), 1, n);
  std::vector<double> sorted = field;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double lo = sorted.back(), hi = sorted.front();
  const double threshold = k < n ? sorted[k] : lo - 0.05 * (hi - lo) - 1e-12;

  std::vector<double> bump(n, 0.0);
  double energy_on_support = 0.0;
  std::size_t count = 0;
  double coord_sum[3] = {0, 0, 0}, coord_sq[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    if (field[i] <= threshold) continue;
    bump[i] = field[i] - threshold;
    energy_on_support += bump[i] * bump[i];
    ++count;
    const std::size_t c[3] = {i / (d[1] * d[2]), (i / d[2]) % d[1], i % d[2]};
    for (int a = 0; a < 3; ++a) {
      coord_sum[a] += static_cast<double>(c[a]);
      coord_sq[a] += static_cast<double>(c[a]) * static_cast<double>(c[a]);
    }
  }
  const double rms = std::sqrt(energy_on_support / static_cast<double>(count));
  for (double& b : bump) b /= rms;  // mean b^2 over the support is now 1

  // Spread: per-axis coordinate std relative to a uniform distribution.
  double spread = 0.0;
  int axes = 0;
  for (int a = 0; a < 3; ++a) {
    if (d[a] < 2) continue;
    const double m = coord_sum[a] / count;
    const double var = std::max(0.0, coord_sq[a] / count - m * m);
    spread += std::sqrt(var) / static_cast<double>(d[a]) * std::sqrt(12.0);
    ++axes;
  }
  spread = axes ? spread / axes : 1.0;

  const double energy =
      spec.anomaly_amplitude * spec.anomaly_amplitude * static_cast<double>(count) / n;
  const double t = energy / spec.reference_energy;
  const auto& mu = spec.label_gmm.mu;
  std::vector<double> x{mu[0][0] + t * (mu[1][0] - mu[0][0]),
                        mu[0][1] + t * spread * (mu[1][1] - mu[0][1])};

  // Background: a curved bright sheet with a fainter posterior layer.
  std::vector<float> data(n);
  for (std::size_t z = 0; z < d[0]; ++z) {
    const double uz = d[0] > 1 ? 2.0 * z / (d[0] - 1) - 1.0 : 0.0;
    for (std::size_t y = 0; y < d[1]; ++y) {
      const double uy = d[1] > 1 ? static_cast<double>(y) / (d[1] - 1) : 0.5;
      for (std::size_t xx = 0; xx < d[2]; ++xx) {
        const double ux = d[2] > 1 ? 2.0 * xx / (d[2] - 1) - 1.0 : 0.0;
        const double centre = 0.35 + 0.2 * (1.0 - 0.5 * (uz * uz + ux * ux));
        const double a = (uy - centre) / 0.08, b = (uy - centre - 0.15) / 0.05;
        const double sheet = 0.1 + std::exp(-a * a) + 0.4 * std::exp(-b * b);
        const std::size_t i = (z * d[1] + y) * d[2] + xx;
        data[i] = static_cast<float>(sheet + spec.anomaly_amplitude * bump[i] +
                                     spec.noise_sigma * normal(noise_rng));
      }
    }
  }

  Phantom out{Volume(d, {kIsotropicSpacing, kIsotropicSpacing, kIsotropicSpacing}, std::move(data)),
              x, 0.0};
  out.p_kc = gmm_posterior(out.index_vector, spec.label_gmm);
  return out;
}

std::vector<CohortRecord> write_phantom_dataset(const PhantomDatasetSpec& spec,
                                                const std::filesystem::path& out_dir) {
  if (spec.n == 0) throw DataError("phantom dataset: n must be >= 1");
  if (!(spec.amplitude_min >= 0.0 && spec.amplitude_max >= spec.amplitude_min)) {
    throw DataError("phantom dataset: need 0 <= amplitude_min <= amplitude_max");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "volumes", ec);
  if (ec) throw DataError("cannot create " + (out_dir / "volumes").string() + ": " + ec.message());

  std::vector<CohortRecord> records;
  std::ostringstream index_csv;
  index_csv << "patient_id,eye_id,amplitude,x0,x1,p_kc\n";
  for (std::size_t i = 0; i < spec.n; ++i) {
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(i)));
    std::uniform_real_distribution<double> amp(spec.amplitude_min, spec.amplitude_max);
    PhantomSpec ps;
    ps.shape = spec.shape;
    ps.anomaly_amplitude = amp(rng);
    ps.anomaly_sparsity = spec.anomaly_sparsity;
    ps.noise_sigma = spec.noise_sigma;
    ps.label_gmm = spec.label_gmm;
    ps.seed = rng();
    const Phantom ph = generate_phantom(ps);

    char name[32];
    std::snprintf(name, sizeof name, "%04zu.volb", i);
    const std::string rel = std::string("volumes/") + name;
    write_volume(out_dir / rel, ph.volume);

    char pid[32];
    std::snprintf(pid, sizeof pid, "P%04zu", i / 2);
    CohortRecord r;
    r.patient_id = pid;
    r.eye_id = i % 2 == 0 ? "OD" : "OS";
    r.volume_path = rel;
    r.p_kc = ph.p_kc;
    records.push_back(r);
    index_csv << r.patient_id << ',' << r.eye_id << ',' << format_double(ps.anomaly_amplitude) << ','
              << format_double(ph.index_vector[0]) << ',' << format_double(ph.index_vector[1]) << ','
              << format_double(ph.p_kc) << '\n';
  }
  write_manifest(out_dir / "manifest.csv", records);
  write_text(out_dir / "phantom_index.csv", index_csv.str());
  return records;
}

}  // namespace volab
