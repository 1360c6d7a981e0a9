#include "volab/model.hpp"

#include <cmath>

#include "volab/error.hpp"

namespace volab {

using nn::Index3;

std::string family_name(Family f) {
  switch (f) {
    case Family::Cnn: return "cnn";
    case Family::HybridLstm: return "hybrid_lstm";
    case Family::HybridTransformer: return "hybrid_transformer";
    case Family::Vit: return "vit";
    case Family::Swin: return "swin";
  }
  return "?";
}

Family family_from_name(const std::string& s) {
  for (Family f : {Family::Cnn, Family::HybridLstm, Family::HybridTransformer, Family::Vit, Family::Swin}) {
    if (family_name(f) == s) return f;
  }
  throw DataError("unknown model family '" + s + "'");
}

Index3 ModelConfig::planar(std::size_t k) const {
  if (is_hybrid() || input_dims == 2) return {1, k, k};
  return {k, k, k};
}

namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// Token grid per Swin stage together with its (clamped) window.
struct SwinGeometry {
  std::vector<Index3> grids, windows;
  std::vector<std::size_t> merge_factors;  // per stage; 0 for stage 0
};

SwinGeometry swin_geometry(const ModelConfig& c) {
  SwinGeometry g;
  Index3 grid{};
  for (std::size_t a = 0; a < 3; ++a) grid[a] = ceil_div(c.input_shape[a], c.patch[a]);
  for (std::size_t s = 0; s < c.stage_depths.size(); ++s) {
    if (s > 0) {
      g.merge_factors.push_back(nn::merge_factor(grid));
      for (std::size_t a = 0; a < 3; ++a) {
        if (grid[a] > 1) {
          if (grid[a] % 2 && c.pad_policy == nn::PadPolicy::Strict) {
            throw ShapeError("swin: odd token grid axis " + std::to_string(grid[a]) + " before merge " +
                             std::to_string(s));
          }
          grid[a] = ceil_div(grid[a], 2);
        }
      }
    } else {
      g.merge_factors.push_back(0);
    }
    Index3 w{};
    for (std::size_t a = 0; a < 3; ++a) {
      w[a] = std::min(c.window[a], grid[a]);
      if (grid[a] % w[a] && c.pad_policy == nn::PadPolicy::Strict) {
        throw ShapeError("swin: window " + std::to_string(w[a]) + " does not divide grid axis " +
                         std::to_string(grid[a]) + " in stage " + std::to_string(s + 1));
      }
    }
    g.grids.push_back(grid);
    g.windows.push_back(w);
  }
  return g;
}

}  // namespace

void ModelConfig::validate() const {
  if (input_dims != 2 && input_dims != 3) throw DataError("model: input_dims must be 2 or 3");
  for (std::size_t d : input_shape) {
    if (d == 0) throw DataError("model: input shape dims must be >= 1");
  }
  if (input_dims == 2 && !is_hybrid() && input_shape[0] != 1) {
    throw DataError("model: 2-D models take input_shape [1, H, W]");
  }
  auto need_four = [](const std::vector<std::size_t>& v, const char* what) {
    if (v.size() != 4) throw DataError(std::string("model: ") + what + " needs 4 entries");
    for (std::size_t x : v) {
      if (x == 0) throw DataError(std::string("model: ") + what + " entries must be >= 1");
    }
  };
  if (family == Family::Cnn || is_hybrid()) {
    need_four(widths, "widths");
    need_four(strides, "strides");
    need_four(blocks, "blocks");
    if (stem_channels == 0 || stem_kernel == 0 || stem_stride == 0) {
      throw DataError("model: stem settings must be positive");
    }
  }
  if (family == Family::HybridLstm && lstm_hidden == 0) throw DataError("model: lstm_hidden must be >= 1");
  if (family == Family::HybridTransformer) {
    const std::size_t width = widths.back() * (block == BlockType::Bottleneck ? 4 : 1);
    if (agg_layers == 0 || agg_heads == 0 || width % agg_heads) {
      throw ShapeError("model: aggregator heads must divide the encoder width");
    }
    if (!(agg_dropout >= 0.0 && agg_dropout < 1.0)) throw DataError("model: dropout must be in [0, 1)");
  }
  if (family == Family::Vit || family == Family::Swin) {
    for (std::size_t a = 0; a < 3; ++a) {
      if (patch[a] == 0) throw DataError("model: patch sizes must be >= 1");
      if (input_shape[a] % patch[a] && pad_policy == nn::PadPolicy::Strict) {
        throw ShapeError("model: patch " + std::to_string(patch[a]) + " does not divide input axis " +
                         std::to_string(input_shape[a]));
      }
    }
    if (mlp_ratio == 0) throw DataError("model: mlp_ratio must be >= 1");
  }
  if (family == Family::Vit) {
    if (depth == 0 || heads == 0 || embed_dim % heads) throw ShapeError("model: heads must divide embed_dim");
  }
  if (family == Family::Swin) {
    if (stage_depths.empty() || stage_depths.size() != stage_heads.size()) {
      throw DataError("model: stage_depths and stage_heads must have equal nonzero length");
    }
    for (std::size_t s = 0; s < stage_depths.size(); ++s) {
      const std::size_t width = embed_dim << s;
      if (stage_heads[s] == 0 || width % stage_heads[s]) {
        throw ShapeError("model: stage " + std::to_string(s + 1) + " heads must divide width");
      }
    }
    for (std::size_t w : window) {
      if (w == 0) throw DataError("model: window sizes must be >= 1");
    }
    swin_geometry(*this);
  }
}

namespace {

nlohmann::json idx3(const Index3& v) { return nlohmann::json::array({v[0], v[1], v[2]}); }
Index3 get_idx3(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw DataError("model config: expected a 3-element array");
  return {j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<std::size_t>()};
}

}  // namespace

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    const Family fam = family_from_name(j.at("family").get<std::string>());
    const int dims = j.value("input_dims", 3);
    const Scale scale = j.value("preset", std::string("desk")) == "paper" ? Scale::Paper : Scale::Desk;
    ModelConfig c = preset_config(fam, dims, scale);
    if (j.contains("input_shape")) c.input_shape = get_idx3(j["input_shape"]);
    if (j.contains("pad_policy")) {
      const auto p = j["pad_policy"].get<std::string>();
      if (p != "strict" && p != "pad") throw DataError("model config: pad_policy must be strict or pad");
      c.pad_policy = p == "pad" ? nn::PadPolicy::Pad : nn::PadPolicy::Strict;
    }
    c.stem_channels = j.value("stem_channels", c.stem_channels);
    c.stem_kernel = j.value("stem_kernel", c.stem_kernel);
    c.stem_stride = j.value("stem_stride", c.stem_stride);
    c.stem_pool = j.value("stem_pool", c.stem_pool);
    c.widths = j.value("widths", c.widths);
    c.strides = j.value("strides", c.strides);
    c.blocks = j.value("blocks", c.blocks);
    if (j.contains("block")) {
      const auto b = j["block"].get<std::string>();
      if (b != "basic" && b != "bottleneck") throw DataError("model config: block must be basic or bottleneck");
      c.block = b == "basic" ? BlockType::Basic : BlockType::Bottleneck;
    }
    if (j.contains("patch")) c.patch = get_idx3(j["patch"]);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.depth = j.value("depth", c.depth);
    c.heads = j.value("heads", c.heads);
    c.stage_depths = j.value("stage_depths", c.stage_depths);
    c.stage_heads = j.value("stage_heads", c.stage_heads);
    if (j.contains("window")) c.window = get_idx3(j["window"]);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.lstm_hidden = j.value("lstm_hidden", c.lstm_hidden);
    c.agg_layers = j.value("agg_layers", c.agg_layers);
    c.agg_heads = j.value("agg_heads", c.agg_heads);
    c.agg_dropout = j.value("agg_dropout", c.agg_dropout);
    c.positional_encoding = j.value("positional_encoding", c.positional_encoding);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["family"] = family_name(c.family);
  j["input_dims"] = c.input_dims;
  j["input_shape"] = idx3(c.input_shape);
  j["preset"] = c.preset;
  j["pad_policy"] = c.pad_policy == nn::PadPolicy::Pad ? "pad" : "strict";
  if (c.family == Family::Cnn || c.is_hybrid()) {
    j["stem_channels"] = c.stem_channels;
    j["stem_kernel"] = c.stem_kernel;
    j["stem_stride"] = c.stem_stride;
    j["stem_pool"] = c.stem_pool;
    j["widths"] = c.widths;
    j["strides"] = c.strides;
    j["blocks"] = c.blocks;
    j["block"] = c.block == BlockType::Basic ? "basic" : "bottleneck";
  }
  if (c.family == Family::Vit || c.family == Family::Swin) {
    j["patch"] = idx3(c.patch);
    j["embed_dim"] = c.embed_dim;
    j["mlp_ratio"] = c.mlp_ratio;
  }
  if (c.family == Family::Vit) {
    j["depth"] = c.depth;
    j["heads"] = c.heads;
  }
  if (c.family == Family::Swin) {
    j["stage_depths"] = c.stage_depths;
    j["stage_heads"] = c.stage_heads;
    j["window"] = idx3(c.window);
  }
  if (c.family == Family::HybridLstm) j["lstm_hidden"] = c.lstm_hidden;
  if (c.family == Family::HybridTransformer) {
    j["agg_layers"] = c.agg_layers;
    j["agg_heads"] = c.agg_heads;
    j["agg_dropout"] = c.agg_dropout;
    j["positional_encoding"] = c.positional_encoding;
    j["mlp_ratio"] = c.mlp_ratio;
  }
  return j;
}

ModelConfig preset_config(Family family, int input_dims, Scale scale) {
  if (input_dims != 2 && input_dims != 3) throw DataError("preset: input_dims must be 2 or 3");
  ModelConfig c;
  c.family = family;
  c.input_dims = input_dims;
  const bool paper = scale == Scale::Paper;
  c.preset = paper ? "paper" : "desk";
  if (paper) {
    c.input_shape = input_dims == 3 ? Dims3{112, 112, 80} : Dims3{1, 224, 224};
    c.stem_channels = 64;
    c.stem_kernel = 7;
    c.stem_stride = 2;
    c.stem_pool = true;
    c.widths = {64, 128, 256, 512};
    c.blocks = {2, 2, 2, 2};
  } else {
    c.input_shape = input_dims == 3 ? Dims3{32, 32, 32} : Dims3{1, 32, 32};
  }
  switch (family) {
    case Family::Cnn:
      break;
    case Family::HybridLstm:
    case Family::HybridTransformer:
      // 24 radial B-scans, each encoded by a 2-D network.
      c.input_dims = 3;
      c.input_shape = paper ? Dims3{24, 224, 224} : Dims3{32, 32, 32};
      c.lstm_hidden = paper ? 256 : 16;
      c.agg_layers = paper ? 6 : 2;
      c.agg_heads = paper ? 8 : 2;
      c.agg_dropout = 0.1;
      break;
    case Family::Vit:
      if (paper) {
        c.patch = input_dims == 3 ? Index3{16, 16, 4} : Index3{1, 16, 16};
        c.embed_dim = 768;
        c.depth = 12;
        c.heads = 12;
      } else {
        c.patch = input_dims == 3 ? Index3{4, 8, 8} : Index3{1, 4, 4};
        c.embed_dim = 32;
        c.depth = 4;
        c.heads = 2;
      }
      break;
    case Family::Swin:
      c.patch = input_dims == 3 ? Index3{4, 4, 4} : Index3{1, 4, 4};
      if (paper) {
        c.embed_dim = 96;
        c.stage_depths = {2, 2, 6, 2};
        c.stage_heads = {3, 6, 12, 24};
        c.window = input_dims == 3 ? Index3{4, 4, 4} : Index3{1, 7, 7};
        // 14 x 14 x 10 in stage 2 is not a multiple of 4.
        if (input_dims == 3) c.pad_policy = nn::PadPolicy::Pad;
      } else {
        c.embed_dim = 16;
        c.stage_depths = {2, 2, 2, 2};
        c.stage_heads = {1, 2, 4, 8};
        c.window = input_dims == 3 ? Index3{4, 4, 4} : Index3{1, 4, 4};
      }
      break;
  }
  return c;
}

std::vector<SwinStage> swin_stages(const ModelConfig& cfg) {
  const SwinGeometry g = swin_geometry(cfg);
  std::vector<SwinStage> out;
  for (std::size_t s = 0; s < g.grids.size(); ++s) out.push_back({g.grids[s], g.windows[s]});
  return out;
}

// ---------------------------------------------------------------------------

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

NamedTensors Model::state() const {
  NamedTensors s = params_;
  for (const auto& [name, st] : bn_) {
    const std::size_t c = st.running_mean.size();
    s.emplace(name + ".running_mean", Tensor({c}, st.running_mean));
    s.emplace(name + ".running_var", Tensor({c}, st.running_var));
  }
  return s;
}

void Model::load_state(const NamedTensors& state) {
  const NamedTensors expected = this->state();
  if (state.size() != expected.size()) {
    throw DataError("checkpoint has " + std::to_string(state.size()) + " tensors, model expects " +
                    std::to_string(expected.size()));
  }
  for (const auto& [name, t] : expected) {
    auto it = state.find(name);
    if (it == state.end()) throw DataError("checkpoint is missing '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                      ", expected " + shape_str(t.shape()));
    }
  }
  for (auto& [name, t] : params_) t = Tensor(t.shape(), state.at(name).values(), true);
  for (auto& [name, st] : bn_) {
    st.running_mean = state.at(name + ".running_mean").values();
    st.running_var = state.at(name + ".running_var").values();
  }
}

void Model::add_weight(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
  add_normal(name, std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

void Model::add_const(const std::string& name, Shape shape, double value) {
  params_.insert_or_assign(name, Tensor::full(std::move(shape), value, true));
}

void Model::add_normal(const std::string& name, Shape shape, double sd, Rng& rng) {
  std::normal_distribution<double> normal(0.0, sd);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = normal(rng);
  params_.insert_or_assign(name, Tensor(std::move(shape), std::move(v), true));
}

void Model::add_batch_norm(const std::string& name, std::size_t channels) {
  add_const(name + ".gamma", {channels}, 1.0);
  add_const(name + ".beta", {channels}, 0.0);
  bn_.insert_or_assign(name, ops::BatchNormStats(channels));
}

Tensor Model::p(const std::string& name, const ForwardOptions& o) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("model has no parameter '" + name + "'");
  return o.detach_params ? it->second.detach() : it->second;
}

Tensor Model::batch_norm(const std::string& name, const Tensor& x, const ForwardOptions& o) const {
  return ops::batch_norm(x, p(name + ".gamma", o), p(name + ".beta", o), bn_.at(name), o.training);
}

Tensor Model::head(const Tensor& features, const ForwardOptions& o) const {
  const Tensor logit = nn::linear(features, p("head.w", o), p("head.b", o));
  return ops::reshape(ops::sigmoid(logit), {features.dim(0)});
}

ForwardResult Model::forward(const Tensor& input, const ForwardOptions& options) const {
  const auto& s = config_.input_shape;
  if (input.rank() != 5 || input.dim(1) != 1 || input.dim(2) != s[0] || input.dim(3) != s[1] ||
      input.dim(4) != s[2]) {
    throw ShapeError("model expects input [N, 1, " + std::to_string(s[0]) + ", " + std::to_string(s[1]) +
                     ", " + std::to_string(s[2]) + "], got " + shape_str(input.shape()));
  }
  return run(input, options);
}

namespace {

// Expands window/global attention weights into per-sample dense records.
void append_records(const Tensor& w, const nn::WindowPlan* plan, std::size_t batch, std::size_t tokens,
                    bool has_cls, const std::vector<nn::Centroid>& centroids, const std::string& layer,
                    std::vector<AttentionRecord>& out) {
  const std::size_t H = w.dim(1), T = w.dim(2);
  const auto data = w.data();
  for (std::size_t n = 0; n < batch; ++n) {
    AttentionRecord r;
    r.layer = layer;
    r.sample = n;
    r.heads = H;
    r.tokens = tokens;
    r.has_cls = has_cls;
    r.centroids = centroids;
    r.weights.assign(H * tokens * tokens, 0.0);
    if (!plan) {
      std::copy_n(data.begin() + n * H * T * T, H * T * T, r.weights.begin());
    } else {
      const std::size_t nW = plan->num_windows;
      for (std::size_t win = 0; win < nW; ++win)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t q = 0; q < T; ++q) {
            const std::size_t tq = plan->slot_token[win * T + q];
            if (tq == nn::WindowPlan::kPad) continue;
            for (std::size_t k = 0; k < T; ++k) {
              const std::size_t tk = plan->slot_token[win * T + k];
              if (tk == nn::WindowPlan::kPad) continue;
              r.weights[(h * tokens + tq) * tokens + tk] = data[(((n * nW + win) * H + h) * T + q) * T + k];
            }
          }
    }
    out.push_back(std::move(r));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Residual trunk shared by the CNN and the hybrid slice encoder.

class TrunkModel : public Model {
 protected:
  using Model::Model;

  std::size_t trunk_width() const {
    return config_.widths.back() * (config_.block == BlockType::Bottleneck ? 4 : 1);
  }

  void build_trunk(Rng& rng) {
    const auto& c = config_;
    const Index3 k = c.planar(c.stem_kernel);
    add_weight("stem.conv", {c.stem_channels, 1, k[0], k[1], k[2]}, k[0] * k[1] * k[2], rng);
    add_batch_norm("stem.bn", c.stem_channels);
    std::size_t cin = c.stem_channels;
    const std::size_t exp = c.block == BlockType::Bottleneck ? 4 : 1;
    const Index3 k3 = c.planar(3);
    const std::size_t vol3 = k3[0] * k3[1] * k3[2];
    for (std::size_t s = 0; s < 4; ++s) {
      for (std::size_t b = 0; b < c.blocks[s]; ++b) {
        const std::string pre = "layer" + std::to_string(s + 1) + "." + std::to_string(b);
        const std::size_t stride = b == 0 ? c.strides[s] : 1;
        const std::size_t w = c.widths[s];
        if (c.block == BlockType::Basic) {
          add_weight(pre + ".conv1", {w, cin, k3[0], k3[1], k3[2]}, cin * vol3, rng);
          add_batch_norm(pre + ".bn1", w);
          add_weight(pre + ".conv2", {w, w, k3[0], k3[1], k3[2]}, w * vol3, rng);
          add_batch_norm(pre + ".bn2", w);
        } else {
          add_weight(pre + ".conv1", {w, cin, 1, 1, 1}, cin, rng);
          add_batch_norm(pre + ".bn1", w);
          add_weight(pre + ".conv2", {w, w, k3[0], k3[1], k3[2]}, w * vol3, rng);
          add_batch_norm(pre + ".bn2", w);
          add_weight(pre + ".conv3", {w * exp, w, 1, 1, 1}, w, rng);
          add_batch_norm(pre + ".bn3", w * exp);
        }
        if (stride != 1 || cin != w * exp) {
          add_weight(pre + ".down", {w * exp, cin, 1, 1, 1}, cin, rng);
          add_batch_norm(pre + ".down_bn", w * exp);
        }
        cin = w * exp;
      }
    }
  }

  Tensor run_trunk(const Tensor& input, const ForwardOptions& o, std::vector<StageTap>* taps) const {
    const auto& c = config_;
    const Index3 k = c.planar(c.stem_kernel);
    const Index3 pad{k[0] / 2, k[1] / 2, k[2] / 2};
    Tensor x = ops::conv3d(input, p("stem.conv", o), std::nullopt, c.planar(c.stem_stride), pad);
    x = ops::relu(batch_norm("stem.bn", x, o));
    if (c.stem_pool) {
      const Index3 pp = c.planar(3), ps = c.planar(2);
      x = ops::pool3d(x, ops::PoolKind::Max, pp, ps, {pp[0] / 2, pp[1] / 2, pp[2] / 2});
    }
    const Index3 k3 = c.planar(3);
    const Index3 pad3{k3[0] / 2, k3[1] / 2, k3[2] / 2};
    for (std::size_t s = 0; s < 4; ++s) {
      for (std::size_t b = 0; b < c.blocks[s]; ++b) {
        const std::string pre = "layer" + std::to_string(s + 1) + "." + std::to_string(b);
        const Index3 st = c.planar(b == 0 ? c.strides[s] : 1);
        Tensor y;
        if (c.block == BlockType::Basic) {
          y = ops::relu(batch_norm(pre + ".bn1", ops::conv3d(x, p(pre + ".conv1", o), std::nullopt, st, pad3), o));
          y = batch_norm(pre + ".bn2", ops::conv3d(y, p(pre + ".conv2", o), std::nullopt, {1, 1, 1}, pad3), o);
        } else {
          y = ops::relu(batch_norm(pre + ".bn1", ops::conv3d(x, p(pre + ".conv1", o), std::nullopt, {1, 1, 1}, {0, 0, 0}), o));
          y = ops::relu(batch_norm(pre + ".bn2", ops::conv3d(y, p(pre + ".conv2", o), std::nullopt, st, pad3), o));
          y = batch_norm(pre + ".bn3", ops::conv3d(y, p(pre + ".conv3", o), std::nullopt, {1, 1, 1}, {0, 0, 0}), o);
        }
        Tensor shortcut = x;
        if (params_.count(pre + ".down")) {
          shortcut = batch_norm(pre + ".down_bn", ops::conv3d(x, p(pre + ".down", o), std::nullopt, st, {0, 0, 0}), o);
        }
        x = ops::relu(ops::add(y, shortcut));
      }
      if (taps) {
        StageTap t;
        t.name = "stage" + std::to_string(s + 1);
        t.value = x;
        t.grid = {x.dim(2), x.dim(3), x.dim(4)};
        taps->push_back(std::move(t));
      }
    }
    return x;
  }
};

class CnnModel final : public TrunkModel {
 public:
  CnnModel(const ModelConfig& cfg, Rng& rng) : TrunkModel(cfg) {
    build_trunk(rng);
    add_weight("head.w", {trunk_width(), 1}, trunk_width(), rng);
    add_const("head.b", {1}, 0.0);
  }
  std::vector<std::string> stage_names() const override { return {"stage1", "stage2", "stage3", "stage4"}; }

 protected:
  ForwardResult run(const Tensor& input, const ForwardOptions& o) const override {
    ForwardResult r;
    const Tensor x = run_trunk(input, o, o.keep_stages ? &r.stages : nullptr);
    const std::size_t N = x.dim(0), C = x.dim(1);
    const Tensor pooled = ops::mean_axis(ops::reshape(x, {N, C, x.numel() / (N * C)}), 2);
    r.prediction = head(pooled, o);
    return r;
  }
};

class HybridModel final : public TrunkModel {
 public:
  HybridModel(const ModelConfig& cfg, Rng& rng) : TrunkModel(cfg) {
    build_trunk(rng);
    const std::size_t C = trunk_width();
    if (cfg.family == Family::HybridLstm) {
      const std::size_t h = cfg.lstm_hidden;
      for (const char* dir : {"fwd", "bwd"}) {
        const std::string pre = std::string("agg.") + dir;
        add_weight(pre + ".w_ih", {C, 4 * h}, C, rng);
        add_weight(pre + ".w_hh", {h, 4 * h}, h, rng);
        add_const(pre + ".b", {4 * h}, 0.0);
      }
      feature_ = 2 * h;
    } else {
      add_normal("agg.cls", {C}, 0.02, rng);
      for (std::size_t l = 0; l < cfg.agg_layers; ++l) {
        add_block("agg.block" + std::to_string(l), C, std::nullopt, rng);
      }
      add_const("agg.norm.g", {C}, 1.0);
      add_const("agg.norm.b", {C}, 0.0);
      feature_ = C;
    }
    add_weight("head.w", {feature_, 1}, feature_, rng);
    add_const("head.b", {1}, 0.0);
  }
  std::vector<std::string> stage_names() const override {
    return {"stage1", "stage2", "stage3", "stage4", "encoder", "aggregator"};
  }

 protected:
  ForwardResult run(const Tensor& input, const ForwardOptions& o) const override;

 private:
  std::size_t feature_ = 0;
};

void Model::add_block(const std::string& pre, std::size_t D,
                      std::optional<std::pair<std::size_t, std::size_t>> rel, Rng& rng) {
  const std::size_t ratio = config_.mlp_ratio;
  add_const(pre + ".ln1_g", {D}, 1.0);
  add_const(pre + ".ln1_b", {D}, 0.0);
  add_weight(pre + ".qkv_w", {D, 3 * D}, D, rng);
  add_const(pre + ".qkv_b", {3 * D}, 0.0);
  add_weight(pre + ".proj_w", {D, D}, D, rng);
  add_const(pre + ".proj_b", {D}, 0.0);
  add_const(pre + ".ln2_g", {D}, 1.0);
  add_const(pre + ".ln2_b", {D}, 0.0);
  add_weight(pre + ".fc1_w", {D, ratio * D}, D, rng);
  add_const(pre + ".fc1_b", {ratio * D}, 0.0);
  add_weight(pre + ".fc2_w", {ratio * D, D}, ratio * D, rng);
  add_const(pre + ".fc2_b", {D}, 0.0);
  if (rel) add_normal(pre + ".rel_bias", {rel->first, rel->second}, 0.02, rng);
}

nn::BlockWeights block_weights(const NamedTensors& params, const std::string& pre, bool detach) {
  auto get = [&](const std::string& n) {
    const Tensor& t = params.at(pre + n);
    return detach ? t.detach() : t;
  };
  nn::BlockWeights w{get(".ln1_g"), get(".ln1_b"), get(".qkv_w"), get(".qkv_b"), get(".proj_w"),
                     get(".proj_b"), get(".ln2_g"), get(".ln2_b"), get(".fc1_w"), get(".fc1_b"),
                     get(".fc2_w"), get(".fc2_b"), std::nullopt};
  if (params.count(pre + ".rel_bias")) w.rel_bias = get(".rel_bias");
  return w;
}

ForwardResult HybridModel::run(const Tensor& input, const ForwardOptions& o) const {
  const auto& c = config_;
  ForwardResult r;
  const Tensor x = run_trunk(input, o, o.keep_stages ? &r.stages : nullptr);
  const std::size_t N = x.dim(0), C = x.dim(1), S = x.dim(2);
  // Per-slice global average pooling -> sequence [N, S, C].
  Tensor seq = ops::mean_axis(ops::reshape(x, {N, C, S, x.dim(3) * x.dim(4)}), 3);
  seq = ops::transpose(seq, 1, 2);
  if (o.keep_stages) {
    StageTap t;
    t.name = "encoder";
    t.value = seq;
    t.tokens = true;
    t.grid = {S, 1, 1};
    r.stages.push_back(std::move(t));
  }
  Tensor feat;
  if (c.family == Family::HybridLstm) {
    auto lw = [&](const char* dir) {
      const std::string pre = std::string("agg.") + dir;
      return nn::LstmWeights{p(pre + ".w_ih", o), p(pre + ".w_hh", o), p(pre + ".b", o)};
    };
    const Tensor parts[2] = {nn::lstm_final_hidden(seq, lw("fwd"), false),
                             nn::lstm_final_hidden(seq, lw("bwd"), true)};
    feat = ops::concat(parts, 1);
  } else {
    const bool drop = o.training && c.agg_dropout > 0.0;
    if (drop && !o.rng) throw Error("hybrid transformer: training with dropout needs an rng");
    if (c.positional_encoding) seq = ops::add(seq, nn::sinusoidal_encoding(S, C));
    if (drop) seq = ops::dropout(seq, c.agg_dropout, *o.rng);
    const std::vector<std::size_t> rows(N, 0);
    const Tensor cls = ops::reshape(ops::take(ops::reshape(p("agg.cls", o), {1, C}), rows), {N, 1, C});
    const Tensor parts[2] = {cls, seq};
    Tensor tok = ops::concat(parts, 1);
    std::vector<nn::Centroid> cents;
    for (std::size_t s = 0; s < S; ++s) {
      cents.push_back({static_cast<double>(s), (c.input_shape[1] - 1) / 2.0, (c.input_shape[2] - 1) / 2.0});
    }
    for (std::size_t l = 0; l < c.agg_layers; ++l) {
      const std::string pre = "agg.block" + std::to_string(l);
      nn::AttentionOptions ao;
      ao.heads = c.agg_heads;
      ao.dropout = drop ? c.agg_dropout : 0.0;
      ao.rng = drop ? o.rng : nullptr;
      ao.record = o.record_attention;
      auto out = nn::attention_block(tok, block_weights(params_, pre, o.detach_params), ao);
      tok = out.tokens;
      if (out.weights) append_records(*out.weights, nullptr, N, S + 1, true, cents, pre, r.attention);
    }
    tok = ops::layer_norm(tok, p("agg.norm.g", o), p("agg.norm.b", o));
    feat = ops::reshape(ops::slice(tok, 1, 0, 1), {N, C});
  }
  if (o.keep_stages) {
    StageTap t;
    t.name = "aggregator";
    t.value = feat;
    r.stages.push_back(std::move(t));
  }
  r.prediction = head(feat, o);
  return r;
}

class VitModel final : public Model {
 public:
  VitModel(const ModelConfig& cfg, Rng& rng) : Model(cfg) {
    const auto& pt = cfg.patch;
    const std::size_t D = cfg.embed_dim;
    for (std::size_t a = 0; a < 3; ++a) grid_[a] = ceil_div(cfg.input_shape[a], pt[a]);
    const std::size_t L = grid_[0] * grid_[1] * grid_[2];
    add_weight("embed.w", {D, 1, pt[0], pt[1], pt[2]}, pt[0] * pt[1] * pt[2], rng);
    add_const("embed.b", {D}, 0.0);
    add_normal("cls", {D}, 0.02, rng);
    add_normal("pos", {L + 1, D}, 0.02, rng);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      add_block("block" + std::to_string(l), D, std::nullopt, rng);
    }
    add_const("norm.g", {D}, 1.0);
    add_const("norm.b", {D}, 0.0);
    add_weight("head.w", {D, 1}, D, rng);
    add_const("head.b", {1}, 0.0);
  }
  std::vector<std::string> stage_names() const override {
    std::vector<std::string> s;
    for (std::size_t l = 0; l < config_.depth; ++l) s.push_back("block" + std::to_string(l + 1));
    return s;
  }

 protected:
  ForwardResult run(const Tensor& input, const ForwardOptions& o) const override {
    const auto& c = config_;
    ForwardResult r;
    nn::PatchEmbedWeights pw{p("embed.w", o), p("embed.b", o), p("cls", o), p("pos", o)};
    nn::TokenGrid g = nn::patch_embed(input, c.patch, pw, c.pad_policy);
    Tensor tok = g.tokens;
    const std::size_t N = tok.dim(0), L = tok.dim(1), D = tok.dim(2);
    for (std::size_t l = 0; l < c.depth; ++l) {
      const std::string pre = "block" + std::to_string(l);
      nn::AttentionOptions ao;
      ao.heads = c.heads;
      ao.record = o.record_attention;
      auto out = nn::attention_block(tok, block_weights(params_, pre, o.detach_params), ao);
      tok = out.tokens;
      if (out.weights) append_records(*out.weights, nullptr, N, L, true, g.centroids, pre, r.attention);
      if (o.keep_stages) {
        StageTap t;
        t.name = "block" + std::to_string(l + 1);
        t.value = tok;
        t.tokens = true;
        t.grid = g.grid;
        t.has_cls = true;
        r.stages.push_back(std::move(t));
      }
    }
    tok = ops::layer_norm(tok, p("norm.g", o), p("norm.b", o));
    r.prediction = head(ops::reshape(ops::slice(tok, 1, 0, 1), {N, D}), o);
    return r;
  }

 private:
  Index3 grid_{};
};

class SwinModel final : public Model {
 public:
  SwinModel(const ModelConfig& cfg, Rng& rng) : Model(cfg), geo_(swin_geometry(cfg)) {
    const auto& pt = cfg.patch;
    const std::size_t E = cfg.embed_dim;
    add_weight("embed.w", {E, 1, pt[0], pt[1], pt[2]}, pt[0] * pt[1] * pt[2], rng);
    add_const("embed.b", {E}, 0.0);
    add_const("embed.norm.g", {E}, 1.0);
    add_const("embed.norm.b", {E}, 0.0);
    std::size_t C = E;
    for (std::size_t s = 0; s < cfg.stage_depths.size(); ++s) {
      if (s > 0) {
        const std::size_t k = geo_.merge_factors[s];
        const std::string pre = "merge" + std::to_string(s);
        add_const(pre + ".ln_g", {k * C}, 1.0);
        add_const(pre + ".ln_b", {k * C}, 0.0);
        add_weight(pre + ".w", {k * C, 2 * C}, k * C, rng);
        C *= 2;
      }
      const Index3 w = geo_.windows[s];
      const Index3 grid = geo_.grids[s];
      Index3 shift{};
      for (std::size_t a = 0; a < 3; ++a) shift[a] = grid[a] > w[a] ? w[a] / 2 : 0;
      plans_.push_back(nn::window_partition_shift(grid, w, {0, 0, 0}, cfg.pad_policy));
      shifted_plans_.push_back(nn::window_partition_shift(grid, w, shift, cfg.pad_policy));
      for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b) {
        add_block(block_name(s, b), C,
                  std::make_pair(nn::relative_position_table_size(w), cfg.stage_heads[s]), rng);
      }
    }
    width_ = C;
    add_const("norm.g", {C}, 1.0);
    add_const("norm.b", {C}, 0.0);
    add_weight("head.w", {C, 1}, C, rng);
    add_const("head.b", {1}, 0.0);
  }
  std::vector<std::string> stage_names() const override {
    std::vector<std::string> s{"patch_embed"};
    for (std::size_t i = 0; i < config_.stage_depths.size(); ++i) s.push_back("stage" + std::to_string(i + 1));
    return s;
  }

 protected:
  static std::string block_name(std::size_t s, std::size_t b) {
    return "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
  }

  ForwardResult run(const Tensor& input, const ForwardOptions& o) const override {
    const auto& c = config_;
    ForwardResult r;
    nn::PatchEmbedWeights pw{p("embed.w", o), p("embed.b", o), std::nullopt, std::nullopt};
    nn::TokenGrid g = nn::patch_embed(input, c.patch, pw, c.pad_policy);
    g.tokens = ops::layer_norm(g.tokens, p("embed.norm.g", o), p("embed.norm.b", o));
    const std::size_t N = g.tokens.dim(0);
    auto tap = [&](const std::string& name) {
      if (!o.keep_stages) return;
      StageTap t;
      t.name = name;
      t.value = g.tokens;
      t.tokens = true;
      t.grid = g.grid;
      r.stages.push_back(std::move(t));
    };
    tap("patch_embed");
    for (std::size_t s = 0; s < c.stage_depths.size(); ++s) {
      if (s > 0) {
        const std::string pre = "merge" + std::to_string(s);
        g = nn::patch_merge(g, {p(pre + ".ln_g", o), p(pre + ".ln_b", o), p(pre + ".w", o)}, c.pad_policy);
      }
      for (std::size_t b = 0; b < c.stage_depths[s]; ++b) {
        const nn::WindowPlan& plan = b % 2 ? shifted_plans_[s] : plans_[s];
        nn::AttentionOptions ao;
        ao.heads = c.stage_heads[s];
        ao.plan = &plan;
        ao.record = o.record_attention;
        const std::string pre = block_name(s, b);
        auto out = nn::attention_block(g.tokens, block_weights(params_, pre, o.detach_params), ao);
        g.tokens = out.tokens;
        if (out.weights) {
          append_records(*out.weights, &plan, N, g.grid_tokens(), false, g.centroids, pre, r.attention);
        }
      }
      tap("stage" + std::to_string(s + 1));
    }
    Tensor t = ops::layer_norm(g.tokens, p("norm.g", o), p("norm.b", o));
    r.prediction = head(ops::mean_axis(t, 1), o);
    return r;
  }

 private:
  SwinGeometry geo_;
  std::vector<nn::WindowPlan> plans_, shifted_plans_;
  std::size_t width_ = 0;
};

std::unique_ptr<Model> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, "init"));
  switch (cfg.family) {
    case Family::Cnn: return std::make_unique<CnnModel>(cfg, rng);
    case Family::HybridLstm:
    case Family::HybridTransformer: return std::make_unique<HybridModel>(cfg, rng);
    case Family::Vit: return std::make_unique<VitModel>(cfg, rng);
    case Family::Swin: return std::make_unique<SwinModel>(cfg, rng);
  }
  throw Error("build_model: unknown family");
}

Tensor volume_tensor(const Volume& v) {
  const auto& d = v.dims();
  return Tensor({1, 1, d[0], d[1], d[2]}, std::vector<double>(v.data().begin(), v.data().end()));
}

Tensor stack_batch(const std::vector<Tensor>& samples) {
  if (samples.empty()) throw ShapeError("stack_batch: no samples");
  if (samples.size() == 1) return samples[0];
  return ops::concat(samples, 0);
}

}  // namespace volab
