#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "whatifts/data_model.hpp"
#include "whatifts/diffusion_schedule.hpp"
#include "whatifts/noise_estimator.hpp"
#include "whatifts/textproc.hpp"

namespace whatifts {

/// Everything needed to run the forecaster: network, schedule, vocabulary,
/// normalizer and window lengths. Serialized as one checkpoint archive.
struct ForecastModel {
  EstimatorConfig config;
  NoiseSchedule schedule;
  Vocab vocab;
  Normalizer normalizer;
  int history_len = 0;
  int future_len = 0;
  std::string dataset_name;
  std::optional<std::string> parent_id;
  nlohmann::json training_state = nlohmann::json::object();
  NoiseEstimator net{nullptr};

  static ForecastModel create(const EstimatorConfig& config, NoiseSchedule schedule, Vocab vocab,
                              Normalizer normalizer, int history_len, int future_len);
  void save(const std::filesystem::path& file) const;
  static ForecastModel load(const std::filesystem::path& file);

  torch::ScalarType dtype() const { return net->patch_embed->weight.scalar_type(); }
  /// [B, W] ids under this model's vocabulary.
  torch::Tensor ids(const std::vector<std::string>& texts) const { return tokenize_batch(texts, vocab); }
};

/// Any callable with the estimator's signature; lets the losses be checked
/// against hand-built estimators.
using EstimatorFn = std::function<torch::Tensor(const torch::Tensor& x, const torch::Tensor& ids,
                                                const torch::Tensor& t)>;

EstimatorFn as_estimator_fn(NoiseEstimator net);

/// Clean history followed by a noised future, with the supervision mask.
struct MaskedBatch {
  torch::Tensor x_mixed;  // [B, L_h + L_f]
  torch::Tensor eps;      // [B, L_h + L_f], zero over the history span
  torch::Tensor mask;     // [L_h + L_f], 0 over history, 1 over future
  torch::Tensor ids;      // [B, W] future-text ids
  torch::Tensor t;        // [B] int64
  int history_len = 0;
};

MaskedBatch make_masked_batch(const torch::Tensor& history, const torch::Tensor& future, const torch::Tensor& ids,
                              const torch::Tensor& t, const torch::Tensor& future_eps, const NoiseSchedule& sched);

/// Mean squared noise error over the supervised (future) positions.
torch::Tensor forecast_loss(const EstimatorFn& estimator, const MaskedBatch& batch);

/// Mean squared noise error of the estimator on noised history-only inputs.
torch::Tensor attribution_loss(const EstimatorFn& estimator, const torch::Tensor& history, const torch::Tensor& ids,
                               const torch::Tensor& t, const torch::Tensor& eps, const NoiseSchedule& sched);

struct TrainConfig {
  int epochs = 200;
  int batch_size = 128;
  double lambda_forecast = 2.0;
  double lambda_attribution = 1.0;
  double learning_rate = 1e-3;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  int T = ScheduleDefaults::T;
  double beta_start = ScheduleDefaults::beta_start;
  double beta_end = ScheduleDefaults::beta_end;
  int S = ScheduleDefaults::S;
  EstimatorConfig estimator;
  int max_train_samples = 0;  // 0 = whole split
  int val_samples = 256;
  bool double_precision = false;
  bool verbose = false;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochLog {
  int epoch = 0;
  double forecast_loss = 0.0;
  double attribution_loss = 0.0;
  double total = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::vector<EpochLog> epochs;
  double best_val = 0.0;
};

/// Normalized tensors for one split, tokenized under a vocabulary.
struct SplitTensors {
  torch::Tensor history;       // [N, L_h]
  torch::Tensor future;        // [N, L_f] (undefined when futures are absent)
  torch::Tensor history_ids;   // [N, W]
  torch::Tensor future_ids;    // [N, W]
  std::vector<std::string> sample_ids;
};

SplitTensors split_tensors(const std::vector<SampleTuple>& records, const Normalizer& norm, const Vocab& vocab,
                           torch::ScalarType dtype, int limit = 0);

/// Loss terms on one minibatch; used by both training and finetuning.
struct JointLoss {
  torch::Tensor forecast;
  torch::Tensor attribution;
  torch::Tensor total;
};

JointLoss joint_loss(ForecastModel& model, const SplitTensors& data, const torch::Tensor& index, double lambda_forecast,
                     double lambda_attribution, torch::Generator& gen);

/// Trains on the dataset's train split and writes the final checkpoint to
/// `out`, rolling/best copies next to it and a JSONL epoch log.
TrainResult train(const TrainConfig& config, const Dataset& dataset, const std::filesystem::path& out,
                  const std::optional<Vocab>& vocab = std::nullopt);

/// Vocabulary stored alongside a dataset (vocab.json), or built from its train split.
Vocab dataset_vocab(const Dataset& dataset, const std::filesystem::path& dir, int max_tokens);

void write_epoch_log(std::ostream& out, const EpochLog& log);

}  // namespace whatifts
