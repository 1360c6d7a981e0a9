#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "volab/model.hpp"
#include "volab/volume.hpp"

namespace volab {

struct ErfMap {
  Dims3 dims{};
  std::vector<double> gradient;    // |dy/dV|
  std::vector<double> normalized;  // gradient / max
  std::vector<std::uint8_t> mask;  // normalized > threshold (strict)
  double threshold = 0.01;
  std::size_t erf_size = 0;
  double erf_radius = 0.0;
  std::array<double, 3> centroid{};  // gradient-weighted over the mask
};

// Mask, size, and the radius of the smallest sphere centred on the
// gradient-weighted centroid that holds every mask voxel. Throws
// NumericError for an all-zero gradient.
ErfMap erf_from_gradient(std::vector<double> gradient, const Dims3& dims, double threshold = 0.01);

// Gradient of the tap with respect to a single input [1, 1, D, H, W]. "output"
// is the prediction; a stage tap is the channel sum at the stage's centre
// position (centre token for token stages, all features for vectors).
ErfMap erf_map(const Model& model, const Tensor& input, const std::string& tap = "output",
               double threshold = 0.01);

// Per-axis receptive-field extent in input voxels, clamped to the input.
// CNN / hybrid trunk: standard kernel/stride composition. Swin: window
// reachability composed through blocks and merges. ViT: the full input.
std::array<std::size_t, 3> theoretical_rf_extent(const ModelConfig& cfg, const std::string& stage);
// ViT: half-diagonal of the extent; others: max over axes of (extent - 1) / 2.
double theoretical_rf(const ModelConfig& cfg, const std::string& stage);

// The four stages reported per model: stage1..4 for trunks and Swin, evenly
// spaced blocks for ViT.
std::vector<std::string> table4_stages(const ModelConfig& cfg);

struct Table4Row {
  std::string model;
  int dim = 3;
  std::array<double, 4> stage_radius{};
  double et_ratio = 0.0;  // last-stage ERF radius / theoretical radius
};

// ERF radii averaged over the inputs (each [1, 1, D, H, W]); inputs whose
// tap gradient vanishes are skipped, and at least one must remain per stage.
Table4Row erf_table_row(const Model& model, std::span<const Tensor> inputs, const std::string& model_id);
// model,dim,stage1,stage2,stage3,stage4,et_ratio
std::string table4_csv(std::span<const Table4Row> rows);

// Distances (voxels) from each non-CLS query to its top-k attended non-CLS
// keys, over every head. Self pairs are dropped unless include_self. Ties in
// attention go to the lower key index.
std::vector<double> attention_distances(const AttentionRecord& record, std::size_t k = 5,
                                        bool include_self = false);

struct DistanceStats {
  std::size_t count = 0;
  double mean = 0.0, sd = 0.0, median = 0.0;
  double pct_gt20 = 0.0;  // fraction of distances above 20 voxels
  double max = 0.0;
};

// sd is the sample standard deviation (n - 1). Throws DataError when empty.
DistanceStats summarize_distances(std::vector<double> d);

struct Table5Row {
  std::string model;
  int dim = 3;
  std::string bin;
  DistanceStats stats;
};

// model,dim,bin,mean,sd,median,pct_gt20,max
std::string table5_csv(std::span<const Table5Row> rows);

struct ActivationDump {
  std::string layer;
  std::size_t n = 0, d = 0;
  std::vector<float> data;  // n x d, row per sample
};

// Column-centred linear CKA via N x N Gram matrices; rows are samples.
double linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);
double cka_pair(const ActivationDump& x, const ActivationDump& y);

struct CkaMatrix {
  std::vector<std::string> rows, cols;
  std::vector<double> values;
  double at(std::size_t i, std::size_t j) const { return values[i * cols.size() + j]; }
};

CkaMatrix cka_matrix(std::span<const ActivationDump> rows, std::span<const ActivationDump> cols);
// Elementwise mean; ids must agree.
CkaMatrix average_cka(std::span<const CkaMatrix> per_fold);
// row,<col ids...>
std::string cka_csv(const CkaMatrix& m);

// Flattened stage activations for each input, one dump per stage, in
// stage_names() order. Layer ids are prefixed with `prefix`.
std::vector<ActivationDump> collect_activations(const Model& model, std::span<const Tensor> inputs,
                                                const std::string& prefix = "");

// "ADMP", model id, u32 layer count, per layer: id, u32 N, u32 D, f32 data.
void write_dumps(const std::filesystem::path& path, const std::string& model_id,
                 std::span<const ActivationDump> layers);
std::vector<ActivationDump> read_dumps(const std::filesystem::path& path, std::string* model_id = nullptr);

// layer,sample,token,z,y,x for every record's centroids.
std::string centroid_csv(std::span<const AttentionRecord> records);

}  // namespace volab
