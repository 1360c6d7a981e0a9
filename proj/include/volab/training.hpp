#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "volab/augment.hpp"
#include "volab/io.hpp"
#include "volab/labels.hpp"
#include "volab/model.hpp"
#include "volab/volume.hpp"

namespace volab {

struct EarlyStopConfig {
  double min_delta = 0.001;
  std::size_t patience = 3;
};

struct TrainConfig {
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t physical_batch = 16;
  std::size_t accumulation_steps = 8;
  std::size_t max_epochs = 50;
  // Linear ramp to lr_max before the cosine decay; early stopping only
  // starts counting once it is over.
  std::size_t warmup_epochs = 0;
  EarlyStopConfig early_stop;
  // Share of the non-test patients held out for validation.
  double val_fraction = 0.2;
  bool augment = true;
  AugmentConfig augmentation;
  std::uint64_t seed = 0;

  void validate() const;
};

TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& cfg);
// Batch 8 x 2 accumulation, 12 epochs, light augmentation.
TrainConfig desk_train_config();
// Same, with the per-family adjustments the transformer trunks need.
TrainConfig desk_train_config(Family family);

// Mean squared error of [N] predictions against [N] targets (scalar tensor).
Tensor mse_loss(const Tensor& pred, const Tensor& target);

struct AdamState {
  std::size_t step = 0;
  std::map<std::string, std::vector<double>> m, v;
};

// Decoupled weight decay, then the bias-corrected Adam update. Gradients
// missing from `grads` count as zero. Throws NumericError on non-finite
// gradients.
void adamw_step(NamedTensors& params, const NamedTensors& grads, AdamState& state, double lr,
                const TrainConfig& cfg);

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min);
// Steps [0, warmup) ramp linearly up to lr_max; the rest follow cosine_lr.
double warmup_cosine_lr(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double lr_max,
                        double lr_min);

// Best-so-far rule: an epoch counts as an improvement only when it beats the
// best previous validation MSE by at least min_delta; `patience` consecutive
// non-improving epochs stop training.
class EarlyStopping {
 public:
  explicit EarlyStopping(EarlyStopConfig cfg);
  // Returns true when training should stop after this epoch.
  bool update(double val_mse);
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }  // 1-based
  std::size_t epochs() const { return epochs_; }

 private:
  EarlyStopConfig cfg_;
  double best_;
  std::size_t best_epoch_ = 0, epochs_ = 0, stale_ = 0;
};

// Epoch (1-based) after which training stops on a scripted trace, or the
// trace length if the rule never fires.
std::size_t early_stop_epoch(std::span<const double> val_history, EarlyStopConfig cfg);

struct Example {
  std::size_t record = 0;  // row in the manifest
  Volume volume{{1, 1, 1}, {1.0, 1.0, 1.0}};
  double target = 0.0;
};

// Reads every manifest volume (paths relative to `root`).
std::vector<Example> load_examples(std::span<const CohortRecord> records,
                                   const std::filesystem::path& root);

// Volume -> model input [1, 1, D, H, W]: B-scan at 90 degrees for 2-D models,
// per-slice resize for hybrids, crop-or-pad otherwise; then z-scored.
Tensor model_input(const Volume& v, const ModelConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
  double lr = 0.0;
};

struct Checkpoint {
  NamedTensors state;
  std::size_t epoch = 0;
  double val_mse = 0.0;
};

struct FoldResult {
  Checkpoint best;
  std::vector<EpochRecord> history;
  bool stopped_early = false;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains in place and leaves the model holding the best checkpoint.
FoldResult train_fold(Model& model, std::span<const Example> train, std::span<const Example> val,
                      const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Eval-mode predictions in example order.
std::vector<double> predict(const Model& model, std::span<const Example> examples,
                            std::size_t batch = 16);

struct Prediction {
  std::size_t record = 0;
  std::size_t fold = 0;
  double target = 0.0;
  double pred = 0.0;
};

struct FoldRun {
  std::size_t fold = 0;
  FoldResult result;
  std::vector<std::size_t> train, val, test;  // example indices
};

struct CvOptions {
  std::size_t n_folds = 5;
  std::size_t n_bins = 3;
  std::optional<std::size_t> only_fold;
};

struct CvResult {
  std::vector<FoldRun> folds;
  std::vector<Prediction> predictions;  // sorted by record
};

using FoldCallback = std::function<void(const FoldRun&, const Model&)>;

// Patient-grouped k-fold CV: each fold trains on the remainder (minus an
// inner patient-disjoint validation split) and predicts its held-out fold.
CvResult cross_validate(std::span<const CohortRecord> records, std::span<const Example> examples,
                        const ModelConfig& model_cfg, const TrainConfig& cfg,
                        const CvOptions& options = {}, const FoldCallback& on_fold = {},
                        const EpochCallback& on_epoch = {});

void write_history_csv(const std::filesystem::path& path, std::span<const EpochRecord> history);
// record,fold,target,pred
void write_predictions_csv(const std::filesystem::path& path, std::span<const Prediction> preds);
std::vector<Prediction> read_predictions_csv(const std::filesystem::path& path);

// <path> holds the tensors; <path>.json carries epoch, val_mse and the model
// config so the checkpoint can be rebuilt without the training config.
void save_model_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                           const Checkpoint& ckpt);
std::unique_ptr<Model> load_model_checkpoint(const std::filesystem::path& path,
                                             Checkpoint* meta = nullptr);

}  // namespace volab
