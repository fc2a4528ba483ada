#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "whatifts/data_model.hpp"
#include "whatifts/dttc.hpp"
#include "whatifts/training.hpp"

namespace whatifts {

enum class EvalSetting { Factual, Counterfactual };

std::string to_string(EvalSetting s);
EvalSetting eval_setting_from_string(const std::string& s);

/// Elementwise mean absolute and squared error over all entries.
std::pair<double, double> mae_mse(const torch::Tensor& pred, const torch::Tensor& truth);
std::pair<double, double> mae_mse(const std::vector<std::vector<double>>& pred,
                                  const std::vector<std::vector<double>>& truth);

struct EvalReport {
  std::string dataset;
  std::string split = "test";
  EvalSetting setting = EvalSetting::Factual;
  std::optional<double> mae;  // normalized units
  std::optional<double> mse;
  std::optional<double> mae_raw;  // data units
  std::optional<double> mse_raw;
  double dttc_i = 0.0;
  double dttc_e = 0.0;
  int n = 0;
  int num_samples = 1;
  bool use_attribution = true;
  std::string model_checkpoint;
  std::string dttc_checkpoint;
  std::uint64_t seed = 0;
  double wall_time_s = 0.0;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  bool operator==(const EvalReport&) const = default;
};

/// Checks the report schema: required keys, types, and the factual /
/// counterfactual error-metric rule. Returns an empty string when valid.
std::string validate_report_json(const nlohmann::json& j);

struct EvalOptions {
  std::string split = "test";
  EvalSetting setting = EvalSetting::Factual;
  int num_samples = 1;
  bool use_attribution = true;
  double perturb_scale = 0.0;
  std::optional<int> steps;
  std::uint64_t seed = 0;
  int limit = 0;  // 0 = whole split
  int batch_size = 64;
};

/// Inputs handed to a forecaster for one batch; history is normalized.
struct EvalBatch {
  torch::Tensor history;  // [B, L_h]
  std::vector<std::string> history_texts;
  std::vector<std::string> future_texts;
  std::vector<std::size_t> rows;  // record indices within the split
};

/// Returns normalized forecasts [B, L_f] for draw `draw`.
using Forecaster = std::function<torch::Tensor(const EvalBatch& batch, int draw)>;

/// Scores an arbitrary forecaster; MAE/MSE use the pointwise median over
/// draws, DTTC scores the mean over draws.
EvalReport evaluate_forecaster(const Forecaster& forecaster, DttcModel& dttc, const Dataset& dataset,
                               const Normalizer& normalizer, const EvalOptions& options);

EvalReport evaluate(ForecastModel& model, DttcModel& dttc, const Dataset& dataset, const EvalOptions& options);

/// Repeats the most recent L_f history values (tiled when L_h < L_f).
std::vector<double> persistence_forecast(const std::vector<double>& history, int future_len);

/// (mae, mse) of the persistence baseline on a factual split, normalized units.
std::pair<double, double> persistence_mae_mse(const Dataset& dataset, const Normalizer& normalizer,
                                              const std::string& split, int limit = 0);

struct NoiseExportOptions {
  std::string split = "test";
  std::optional<std::uint64_t> control_seed;  // fresh entropy when unset
  int limit = 0;
  int batch_size = 64;
};

/// One JSONL row per sample: {sample_id, attributed, control}. Returns the row count.
std::size_t export_initial_noise(ForecastModel& model, const Dataset& dataset, const std::filesystem::path& out,
                                 const NoiseExportOptions& options);

}  // namespace whatifts
