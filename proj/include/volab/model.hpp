#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "volab/io.hpp"
#include "volab/nn.hpp"
#include "volab/ops.hpp"
#include "volab/volume.hpp"

namespace volab {

enum class Family { Cnn, HybridLstm, HybridTransformer, Vit, Swin };
enum class BlockType { Basic, Bottleneck };
enum class Scale { Desk, Paper };

std::string family_name(Family f);
Family family_from_name(const std::string& s);

struct ModelConfig {
  Family family = Family::Cnn;
  int input_dims = 3;               // 2: input_shape[0] must be 1 (hybrid: slices)
  Dims3 input_shape{32, 32, 32};    // slices x height x width
  std::string preset = "desk";
  nn::PadPolicy pad_policy = nn::PadPolicy::Strict;

  // CNN and hybrid slice encoder.
  std::size_t stem_channels = 4;
  std::size_t stem_kernel = 3;
  std::size_t stem_stride = 2;
  bool stem_pool = false;  // 3x3(x3) max pool, stride 2, after the stem
  std::vector<std::size_t> widths{4, 8, 16, 32};
  std::vector<std::size_t> strides{1, 2, 2, 2};
  std::vector<std::size_t> blocks{1, 1, 1, 1};
  BlockType block = BlockType::Basic;

  // ViT and Swin.
  nn::Index3 patch{4, 8, 8};
  std::size_t embed_dim = 32;
  std::size_t depth = 4;   // ViT encoder blocks
  std::size_t heads = 2;   // ViT heads
  std::vector<std::size_t> stage_depths{2, 2, 2, 2};
  std::vector<std::size_t> stage_heads{1, 2, 4, 8};
  nn::Index3 window{4, 4, 4};
  std::size_t mlp_ratio = 4;

  // Hybrid aggregators.
  std::size_t lstm_hidden = 16;
  std::size_t agg_layers = 2;
  std::size_t agg_heads = 2;
  double agg_dropout = 0.1;
  bool positional_encoding = true;

  // Throws ShapeError/DataError on inconsistent settings.
  void validate() const;
  bool is_hybrid() const { return family == Family::HybridLstm || family == Family::HybridTransformer; }
  bool has_attention() const {
    return family == Family::Vit || family == Family::Swin || family == Family::HybridTransformer;
  }
  // kernel/stride triple honoring 2-D inputs and slice-wise hybrid encoders.
  nn::Index3 planar(std::size_t k) const;
};

ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json model_config_to_json(const ModelConfig& c);

// Named presets. Paper presets encode the reported architectures; desk
// presets are CPU-sized.
ModelConfig preset_config(Family family, int input_dims, Scale scale);

// Token grid and clamped window of every Swin stage.
struct SwinStage {
  nn::Index3 grid, window;
};
std::vector<SwinStage> swin_stages(const ModelConfig& cfg);

struct AttentionRecord {
  std::string layer;
  std::size_t sample = 0;
  std::size_t heads = 0;
  std::size_t tokens = 0;   // including the class token when has_cls
  bool has_cls = false;
  std::vector<double> weights;            // heads x tokens x tokens
  std::vector<nn::Centroid> centroids;    // tokens - has_cls entries
  double at(std::size_t h, std::size_t q, std::size_t k) const {
    return weights[(h * tokens + q) * tokens + k];
  }
};

struct StageTap {
  std::string name;
  Tensor value;               // [N, C, D, H, W] volumes or [N, L, C] tokens
  bool tokens = false;
  nn::Index3 grid{1, 1, 1};   // spatial grid of the tap
  bool has_cls = false;
};

struct ForwardOptions {
  bool training = false;
  bool record_attention = false;
  bool keep_stages = false;
  bool detach_params = false;  // treat parameters as constants (input gradients only)
  Rng* rng = nullptr;          // dropout stream; required when training with dropout
};

struct ForwardResult {
  Tensor prediction;  // [N], sigmoid outputs
  std::vector<AttentionRecord> attention;
  std::vector<StageTap> stages;
};

class Model {
 public:
  virtual ~Model() = default;
  const ModelConfig& config() const { return config_; }

  NamedTensors& parameters() { return params_; }
  const NamedTensors& parameters() const { return params_; }
  std::size_t parameter_count() const;

  // Parameters plus batch-norm running statistics ("<bn>.running_mean/var").
  NamedTensors state() const;
  void load_state(const NamedTensors& state);

  // Stage boundaries used by the layer-wise analyses.
  virtual std::vector<std::string> stage_names() const = 0;

  // input [N, 1, D, H, W] with (D, H, W) == config().input_shape.
  ForwardResult forward(const Tensor& input, const ForwardOptions& options = {}) const;

 protected:
  explicit Model(ModelConfig cfg) : config_(std::move(cfg)) {}
  virtual ForwardResult run(const Tensor& input, const ForwardOptions& options) const = 0;

  // Registration helpers used while building.
  void add_weight(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng);
  void add_const(const std::string& name, Shape shape, double value);
  void add_normal(const std::string& name, Shape shape, double sd, Rng& rng);
  void add_batch_norm(const std::string& name, std::size_t channels);
  // Pre-norm transformer block; `rel` = (bias table size, heads) for windows.
  void add_block(const std::string& prefix, std::size_t width,
                 std::optional<std::pair<std::size_t, std::size_t>> rel, Rng& rng);

  Tensor p(const std::string& name, const ForwardOptions& o) const;
  Tensor batch_norm(const std::string& name, const Tensor& x, const ForwardOptions& o) const;
  Tensor head(const Tensor& features, const ForwardOptions& o) const;

  ModelConfig config_;
  NamedTensors params_;
  mutable std::map<std::string, ops::BatchNormStats> bn_;
};

// Deterministic given (cfg, seed): fan-in scaled Gaussian weights, zero
// biases, unit norm scales.
std::unique_ptr<Model> build_model(const ModelConfig& cfg, std::uint64_t seed);

// Volume -> [1, 1, D, H, W]; batch stacking along axis 0.
Tensor volume_tensor(const Volume& v);
Tensor stack_batch(const std::vector<Tensor>& samples);

}  // namespace volab
