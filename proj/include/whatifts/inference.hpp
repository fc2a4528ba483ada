#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "whatifts/diffusion_schedule.hpp"
#include "whatifts/noise_estimator.hpp"
#include "whatifts/training.hpp"

namespace whatifts {

struct ForecastRequest {
  std::vector<double> history;  // normalized, length L_h
  std::string history_text;
  std::string future_text;
  int num_samples = 1;
  bool use_attribution = true;
  std::optional<int> steps;     // overrides the checkpoint's inference step count
  double perturb_scale = 0.0;   // jitter on the shared attributed state for samples after the first
  std::uint64_t seed = 0;
};

struct ForecastResult {
  std::vector<std::vector<double>> forecasts;       // num_samples x L_f, normalized
  std::vector<std::vector<double>> denormalized;    // same, in data units
  std::vector<std::vector<double>> initial_states;  // num_samples x L_f
  std::vector<std::vector<double>> full_states;     // num_samples x (L_h + L_f), normalized
  bool attribution_used = false;
};

/// Copy of a schedule with a different number of inference steps.
NoiseSchedule with_steps(const NoiseSchedule& sched, int steps);

/// Deterministic inversion of clean histories [B, L_h] up the whole grid,
/// every estimate conditioned on the history text embedding [B, D].
torch::Tensor attribute(NoiseEstimator& net, const NoiseSchedule& sched, const torch::Tensor& history,
                        const torch::Tensor& history_text_embedding);
torch::Tensor attribute_ids(NoiseEstimator& net, const NoiseSchedule& sched, const torch::Tensor& history,
                            const torch::Tensor& history_ids);

/// Denoises history ⊕ initial future state down the grid under the future
/// text, overwriting the history span with the clean history before every
/// estimator call and once more at the end. Returns the full [B, L_h + L_f]
/// state.
torch::Tensor denoise_anchored(NoiseEstimator& net, const NoiseSchedule& sched, const torch::Tensor& history,
                               const torch::Tensor& initial_future, const torch::Tensor& future_text_embedding);

/// Batched two-stage forecast: attribution (or Gaussian draws) then anchored
/// denoising. Rows are independent samples.
struct BatchForecast {
  torch::Tensor full_states;     // [B, L_h + L_f]
  torch::Tensor forecasts;       // [B, L_f]
  torch::Tensor initial_states;  // [B, L_f]
};

BatchForecast forecast_batch(ForecastModel& model, const NoiseSchedule& sched, const torch::Tensor& history,
                             const torch::Tensor& history_ids, const torch::Tensor& future_ids, bool use_attribution,
                             torch::Generator& gen);

ForecastResult forecast(ForecastModel& model, const ForecastRequest& req);

}  // namespace whatifts
