#include "volab/mechanistic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <Eigen/Dense>

#include "volab/error.hpp"
#include "volab/io.hpp"
#include "volab/ops.hpp"

namespace volab {

using nn::Index3;

ErfMap erf_from_gradient(std::vector<double> gradient, const Dims3& dims, double threshold) {
  const std::size_t n = dims[0] * dims[1] * dims[2];
  if (gradient.size() != n) throw ShapeError("erf: gradient size does not match dims");
  if (!(threshold >= 0.0 && threshold < 1.0)) throw DataError("erf: threshold must be in [0, 1)");
  ErfMap m;
  m.dims = dims;
  m.threshold = threshold;
  double peak = 0.0;
  for (double& g : gradient) {
    g = std::abs(g);
    peak = std::max(peak, g);
  }
  if (!(peak > 0.0)) throw NumericError("erf: gradient is identically zero");
  m.gradient = std::move(gradient);
  m.normalized.resize(n);
  m.mask.assign(n, 0);
  double wsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    m.normalized[i] = m.gradient[i] / peak;
    if (m.normalized[i] > threshold) {
      m.mask[i] = 1;
      ++m.erf_size;
      const double w = m.gradient[i];
      const std::size_t z = i / (dims[1] * dims[2]), y = (i / dims[2]) % dims[1], x = i % dims[2];
      m.centroid[0] += w * static_cast<double>(z);
      m.centroid[1] += w * static_cast<double>(y);
      m.centroid[2] += w * static_cast<double>(x);
      wsum += w;
    }
  }
  for (double& c : m.centroid) c /= wsum;
  double r2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!m.mask[i]) continue;
    const double dz = static_cast<double>(i / (dims[1] * dims[2])) - m.centroid[0];
    const double dy = static_cast<double>((i / dims[2]) % dims[1]) - m.centroid[1];
    const double dx = static_cast<double>(i % dims[2]) - m.centroid[2];
    r2 = std::max(r2, dz * dz + dy * dy + dx * dx);
  }
  m.erf_radius = std::sqrt(r2);
  return m;
}

namespace {

Tensor tap_scalar(const StageTap& t) {
  Tensor v = ops::slice(t.value, 0, 0, 1);
  if (v.rank() == 5) {
    for (std::size_t a = 2; a < 5; ++a) v = ops::slice(v, a, v.dim(a) / 2, 1);
  } else if (v.rank() == 3) {
    const Index3& g = t.grid;
    const std::size_t centre = ((g[0] / 2) * g[1] + g[1] / 2) * g[2] + g[2] / 2;
    v = ops::slice(v, 1, (t.has_cls ? 1 : 0) + centre, 1);
  } else if (v.rank() != 2) {
    throw ShapeError("erf: unsupported tap rank for " + t.name);
  }
  return ops::sum(v);
}

}  // namespace

ErfMap erf_map(const Model& model, const Tensor& input, const std::string& tap, double threshold) {
  if (input.rank() != 5 || input.dim(0) != 1) throw ShapeError("erf: expects a single input [1, 1, D, H, W]");
  const Tensor leaf = input.detach().as_leaf();
  Tape tape;
  Tensor y;
  {
    Tape::Scope scope(tape);
    ForwardOptions o;
    o.detach_params = true;
    o.keep_stages = tap != "output";
    const ForwardResult r = model.forward(leaf, o);
    if (tap == "output") {
      y = ops::sum(r.prediction);
    } else {
      const auto it = std::find_if(r.stages.begin(), r.stages.end(), [&](const StageTap& s) { return s.name == tap; });
      if (it == r.stages.end()) throw DataError("erf: model has no stage named " + tap);
      y = tap_scalar(*it);
    }
  }
  const Tensor g = backward(tape, y).of(leaf);
  const Dims3 dims{input.dim(2), input.dim(3), input.dim(4)};
  return erf_from_gradient(g.values(), dims, threshold);
}

namespace {

struct Layer1d {
  std::size_t k, s;
};

std::array<std::size_t, 3> clamp_extent(const std::array<double, 3>& rf, const Dims3& input) {
  std::array<std::size_t, 3> out{};
  for (std::size_t a = 0; a < 3; ++a) out[a] = std::min<std::size_t>(input[a], static_cast<std::size_t>(rf[a]));
  return out;
}

std::array<std::size_t, 3> trunk_extent(const ModelConfig& c, std::size_t stages) {
  std::array<double, 3> rf{1, 1, 1}, jump{1, 1, 1};
  auto layer = [&](Index3 k, Index3 s) {
    for (std::size_t a = 0; a < 3; ++a) {
      rf[a] += static_cast<double>(k[a] - 1) * jump[a];
      jump[a] *= static_cast<double>(s[a]);
    }
  };
  layer(c.planar(c.stem_kernel), c.planar(c.stem_stride));
  if (c.stem_pool) layer(c.planar(3), c.planar(2));
  for (std::size_t s = 0; s < stages; ++s)
    for (std::size_t b = 0; b < c.blocks[s]; ++b) {
      const Index3 st = c.planar(b == 0 ? c.strides[s] : 1);
      if (c.block == BlockType::Basic) {
        layer(c.planar(3), st);
        layer(c.planar(3), c.planar(1));
      } else {
        layer(c.planar(1), c.planar(1));
        layer(c.planar(3), st);
        layer(c.planar(1), c.planar(1));
      }
    }
  return clamp_extent(rf, c.input_shape);
}

std::array<std::size_t, 3> swin_extent(const ModelConfig& c, std::size_t stages) {
  const auto plan = swin_stages(c);
  std::array<std::size_t, 3> out{};
  for (std::size_t a = 0; a < 3; ++a) {
    const std::size_t n = c.input_shape[a], p = c.patch[a];
    std::size_t g = (n + p - 1) / p;
    std::vector<std::size_t> lo(g), hi(g);
    for (std::size_t t = 0; t < g; ++t) {
      lo[t] = t * p;
      hi[t] = std::min(n - 1, t * p + p - 1);
    }
    for (std::size_t s = 0; s < stages; ++s) {
      if (s > 0 && g > 1) {
        const std::size_t h = (g + 1) / 2;
        std::vector<std::size_t> l2(h), h2(h);
        for (std::size_t u = 0; u < h; ++u) {
          l2[u] = lo[2 * u];
          h2[u] = hi[std::min(2 * u + 1, g - 1)];
        }
        lo.swap(l2);
        hi.swap(h2);
        g = h;
      }
      if (g != plan[s].grid[a]) throw ShapeError("swin rf: grid bookkeeping mismatch");
      const std::size_t w = plan[s].window[a];
      for (std::size_t b = 0; b < c.stage_depths[s]; ++b) {
        const std::size_t shift = (b % 2 == 1 && g > w) ? w / 2 : 0;
        const std::size_t groups = (g - 1 + w - shift) / w + 1;
        std::vector<std::size_t> glo(groups, n), ghi(groups, 0);
        for (std::size_t t = 0; t < g; ++t) {
          const std::size_t q = (t + w - shift) / w;
          glo[q] = std::min(glo[q], lo[t]);
          ghi[q] = std::max(ghi[q], hi[t]);
        }
        for (std::size_t t = 0; t < g; ++t) {
          const std::size_t q = (t + w - shift) / w;
          lo[t] = glo[q];
          hi[t] = ghi[q];
        }
      }
    }
    for (std::size_t t = 0; t < g; ++t) out[a] = std::max(out[a], hi[t] - lo[t] + 1);
  }
  return out;
}

std::size_t stage_number(const std::string& stage) {
  if (stage.rfind("stage", 0) == 0 && stage.size() == 6 && stage[5] >= '1' && stage[5] <= '4')
    return static_cast<std::size_t>(stage[5] - '0');
  return 0;
}

}  // namespace

std::array<std::size_t, 3> theoretical_rf_extent(const ModelConfig& cfg, const std::string& stage) {
  const Dims3& in = cfg.input_shape;
  const std::array<std::size_t, 3> full{in[0], in[1], in[2]};
  if (stage == "output") return full;
  const std::size_t k = stage_number(stage);
  switch (cfg.family) {
    case Family::Vit:
      if (stage.rfind("block", 0) == 0) {
        const std::size_t l = std::strtoul(stage.c_str() + 5, nullptr, 10);
        if (l >= 1 && l <= cfg.depth) return full;
      }
      break;
    case Family::Cnn:
      if (k) return trunk_extent(cfg, k);
      break;
    case Family::HybridLstm:
    case Family::HybridTransformer:
      if (k) return trunk_extent(cfg, k);
      if (stage == "encoder") return trunk_extent(cfg, 4);
      if (stage == "aggregator") return full;
      break;
    case Family::Swin:
      if (stage == "patch_embed") return swin_extent(cfg, 0);
      if (k) return swin_extent(cfg, k);
      break;
  }
  throw DataError("theoretical_rf: unknown stage " + stage + " for " + family_name(cfg.family));
}

double theoretical_rf(const ModelConfig& cfg, const std::string& stage) {
  const auto e = theoretical_rf_extent(cfg, stage);
  if (cfg.family == Family::Vit) {
    double s = 0.0;
    for (std::size_t v : e) s += static_cast<double>(v - 1) * static_cast<double>(v - 1);
    return 0.5 * std::sqrt(s);
  }
  double r = 0.0;
  for (std::size_t v : e) r = std::max(r, static_cast<double>(v - 1) / 2.0);
  return r;
}

std::vector<std::string> table4_stages(const ModelConfig& cfg) {
  if (cfg.family == Family::Vit) {
    std::vector<std::string> s;
    for (std::size_t i = 1; i <= 4; ++i) {
      const std::size_t l = std::max<std::size_t>(1, (i * cfg.depth + 2) / 4);
      s.push_back("block" + std::to_string(l));
    }
    return s;
  }
  return {"stage1", "stage2", "stage3", "stage4"};
}

Table4Row erf_table_row(const Model& model, std::span<const Tensor> inputs, const std::string& model_id) {
  if (inputs.empty()) throw DataError("erf: no inputs");
  Table4Row row;
  row.model = model_id;
  row.dim = model.config().input_dims;
  const auto stages = table4_stages(model.config());
  for (std::size_t s = 0; s < 4; ++s) {
    double sum = 0.0;
    std::size_t used = 0;
    for (const Tensor& x : inputs) {
      try {
        sum += erf_map(model, x, stages[s]).erf_radius;
        ++used;
      } catch (const NumericError&) {
      }
    }
    if (used == 0) throw NumericError("erf: every input has a vanishing gradient at " + stages[s]);
    row.stage_radius[s] = sum / static_cast<double>(used);
  }
  row.et_ratio = row.stage_radius[3] / theoretical_rf(model.config(), stages[3]);
  return row;
}

std::string table4_csv(std::span<const Table4Row> rows) {
  std::string s = "model,dim,stage1,stage2,stage3,stage4,et_ratio\n";
  for (const auto& r : rows) {
    s += r.model + "," + std::to_string(r.dim);
    for (double v : r.stage_radius) s += "," + format_double(v);
    s += "," + format_double(r.et_ratio) + "\n";
  }
  return s;
}

std::vector<double> attention_distances(const AttentionRecord& r, std::size_t k, bool include_self) {
  if (k == 0) throw DataError("attention distance: k must be positive");
  const std::size_t off = r.has_cls ? 1 : 0;
  if (r.tokens < off || r.centroids.size() != r.tokens - off)
    throw DataError("attention distance: record " + r.layer + " is missing centroids");
  if (r.weights.size() != r.heads * r.tokens * r.tokens) throw ShapeError("attention distance: weight size");
  std::vector<double> out;
  std::vector<std::size_t> keys;
  for (std::size_t h = 0; h < r.heads; ++h)
    for (std::size_t q = off; q < r.tokens; ++q) {
      keys.clear();
      for (std::size_t j = off; j < r.tokens; ++j)
        if (include_self || j != q) keys.push_back(j);
      const std::size_t take = std::min(k, keys.size());
      std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(take), keys.end(),
                        [&](std::size_t a, std::size_t b) {
                          const double wa = r.at(h, q, a), wb = r.at(h, q, b);
                          return wa != wb ? wa > wb : a < b;
                        });
      const auto& cq = r.centroids[q - off];
      for (std::size_t i = 0; i < take; ++i) {
        const auto& ck = r.centroids[keys[i] - off];
        double d2 = 0.0;
        for (std::size_t a = 0; a < 3; ++a) d2 += (cq[a] - ck[a]) * (cq[a] - ck[a]);
        out.push_back(std::sqrt(d2));
      }
    }
  return out;
}

DistanceStats summarize_distances(std::vector<double> d) {
  if (d.empty()) throw DataError("attention distance: no distances to summarize");
  std::sort(d.begin(), d.end());
  DistanceStats s;
  s.count = d.size();
  const double n = static_cast<double>(d.size());
  s.mean = std::accumulate(d.begin(), d.end(), 0.0) / n;
  double ss = 0.0;
  std::size_t far = 0;
  for (double v : d) {
    ss += (v - s.mean) * (v - s.mean);
    far += v > 20.0;
  }
  s.sd = d.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  const std::size_t m = d.size() / 2;
  s.median = d.size() % 2 ? d[m] : 0.5 * (d[m - 1] + d[m]);
  s.pct_gt20 = static_cast<double>(far) / n;
  s.max = d.back();
  return s;
}

std::string table5_csv(std::span<const Table5Row> rows) {
  std::string s = "model,dim,bin,mean,sd,median,pct_gt20,max\n";
  for (const auto& r : rows) {
    const auto& t = r.stats;
    s += r.model + "," + std::to_string(r.dim) + "," + r.bin + "," + format_double(t.mean) + "," +
         format_double(t.sd) + "," + format_double(t.median) + "," + format_double(t.pct_gt20) + "," +
         format_double(t.max) + "\n";
  }
  return s;
}

namespace {

Eigen::MatrixXd centred_gram(Eigen::MatrixXd x) {
  x.rowwise() -= x.colwise().mean();
  return x * x.transpose();
}

Eigen::MatrixXd centred_gram(const ActivationDump& a) {
  if (a.data.size() != a.n * a.d) throw ShapeError("cka: dump " + a.layer + " has the wrong size");
  Eigen::MatrixXd x(a.n, a.d);
  for (std::size_t i = 0; i < a.n; ++i)
    for (std::size_t j = 0; j < a.d; ++j) x(i, j) = a.data[i * a.d + j];
  return centred_gram(std::move(x));
}

double cka_gram(const Eigen::MatrixXd& k, const Eigen::MatrixXd& l, const std::string& a, const std::string& b) {
  const double nk = k.norm(), nl = l.norm();
  if (!(nk > 0.0) || !(nl > 0.0)) throw DataError("cka: all-zero activations after centering (" + a + ", " + b + ")");
  return std::clamp(k.cwiseProduct(l).sum() / (nk * nl), 0.0, 1.0);
}

}  // namespace

double linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  if (x.rows() != y.rows()) throw DataError("cka: sample counts differ");
  if (x.rows() < 2) throw DataError("cka: need at least two samples");
  return cka_gram(centred_gram(x), centred_gram(y), "x", "y");
}

double cka_pair(const ActivationDump& x, const ActivationDump& y) {
  if (x.n != y.n) throw DataError("cka: sample counts differ");
  if (x.n < 2) throw DataError("cka: need at least two samples");
  return cka_gram(centred_gram(x), centred_gram(y), x.layer, y.layer);
}

CkaMatrix cka_matrix(std::span<const ActivationDump> rows, std::span<const ActivationDump> cols) {
  if (rows.empty() || cols.empty()) throw DataError("cka: empty dump set");
  const std::size_t n = rows[0].n;
  for (const auto* set : {&rows, &cols})
    for (const auto& d : *set)
      if (d.n != n) throw DataError("cka: misaligned sample sets");
  if (n < 2) throw DataError("cka: need at least two samples");
  std::vector<Eigen::MatrixXd> gr, gc;
  for (const auto& d : rows) gr.push_back(centred_gram(d));
  for (const auto& d : cols) gc.push_back(centred_gram(d));
  CkaMatrix m;
  for (const auto& d : rows) m.rows.push_back(d.layer);
  for (const auto& d : cols) m.cols.push_back(d.layer);
  m.values.resize(rows.size() * cols.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j)
      m.values[i * cols.size() + j] = cka_gram(gr[i], gc[j], rows[i].layer, cols[j].layer);
  return m;
}

CkaMatrix average_cka(std::span<const CkaMatrix> per_fold) {
  if (per_fold.empty()) throw DataError("cka: nothing to average");
  CkaMatrix out = per_fold[0];
  for (std::size_t f = 1; f < per_fold.size(); ++f) {
    if (per_fold[f].rows != out.rows || per_fold[f].cols != out.cols) throw DataError("cka: fold matrices differ in ids");
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += per_fold[f].values[i];
  }
  for (double& v : out.values) v /= static_cast<double>(per_fold.size());
  return out;
}

std::string cka_csv(const CkaMatrix& m) {
  std::string s = "row";
  for (const auto& c : m.cols) s += "," + c;
  s += "\n";
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    s += m.rows[i];
    for (std::size_t j = 0; j < m.cols.size(); ++j) s += "," + format_double(m.at(i, j));
    s += "\n";
  }
  return s;
}

std::vector<ActivationDump> collect_activations(const Model& model, std::span<const Tensor> inputs,
                                                const std::string& prefix) {
  if (inputs.empty()) throw DataError("activations: no inputs");
  const auto names = model.stage_names();
  std::vector<ActivationDump> dumps(names.size());
  for (std::size_t s = 0; s < names.size(); ++s) dumps[s].layer = prefix + names[s];
  for (const Tensor& x : inputs) {
    ForwardOptions o;
    o.keep_stages = true;
    const ForwardResult r = model.forward(x, o);
    for (std::size_t s = 0; s < names.size(); ++s) {
      const Tensor& v = r.stages.at(s).value;
      const std::size_t per = v.numel() / v.dim(0);
      if (dumps[s].d == 0) dumps[s].d = per;
      for (std::size_t i = 0; i < v.numel(); ++i) dumps[s].data.push_back(static_cast<float>(v[i]));
      dumps[s].n += v.dim(0);
    }
  }
  return dumps;
}

void write_dumps(const std::filesystem::path& path, const std::string& model_id, std::span<const ActivationDump> layers) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os.write("ADMP", 4);
  binary::write_string(os, model_id);
  binary::write_u32(os, static_cast<std::uint32_t>(layers.size()));
  for (const auto& l : layers) {
    binary::write_string(os, l.layer);
    binary::write_u32(os, static_cast<std::uint32_t>(l.n));
    binary::write_u32(os, static_cast<std::uint32_t>(l.d));
    for (float v : l.data) binary::write_f32(os, v);
  }
  if (!os) throw DataError("write failed: " + path.string());
}

std::vector<ActivationDump> read_dumps(const std::filesystem::path& path, std::string* model_id) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  binary::expect_magic(is, "ADMP", path.string());
  const std::string id = binary::read_string(is);
  if (model_id) *model_id = id;
  const std::uint32_t count = binary::read_u32(is);
  std::vector<ActivationDump> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    ActivationDump d;
    d.layer = binary::read_string(is);
    d.n = binary::read_u32(is);
    d.d = binary::read_u32(is);
    d.data.resize(d.n * d.d);
    for (float& v : d.data) v = binary::read_f32(is);
    out.push_back(std::move(d));
  }
  return out;
}

std::string centroid_csv(std::span<const AttentionRecord> records) {
  std::string s = "layer,sample,token,z,y,x\n";
  for (const auto& r : records)
    for (std::size_t t = 0; t < r.centroids.size(); ++t) {
      const auto& c = r.centroids[t];
      s += r.layer + "," + std::to_string(r.sample) + "," + std::to_string(t + (r.has_cls ? 1 : 0)) + "," +
           format_double(c[0]) + "," + format_double(c[1]) + "," + format_double(c[2]) + "\n";
    }
  return s;
}

}  // namespace volab
