#pragma once

#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace whatifts {

/// Betas for steps 1..T, cumulative alphas with alphas[0] = 1, and the
/// evenly spaced inference grid (ascending, starts at 0 and ends at T).
struct NoiseSchedule {
  int T = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> betas;   // size T, betas[t-1] = beta_t
  std::vector<double> alphas;  // size T+1
  std::vector<int> grid;       // size S+1

  int steps() const { return static_cast<int>(grid.size()) - 1; }
  double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t)); }
  bool on_grid(int t) const;

  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);
};

struct ScheduleDefaults {
  static constexpr int T = 1000;
  static constexpr double beta_start = 1e-4;
  static constexpr double beta_end = 0.02;
  static constexpr int S = 50;
};

NoiseSchedule make_schedule(int T = ScheduleDefaults::T, double beta_start = ScheduleDefaults::beta_start,
                            double beta_end = ScheduleDefaults::beta_end, int S = ScheduleDefaults::S);
NoiseSchedule schedule_from_betas(const std::vector<double>& betas, int S);

torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps, const NoiseSchedule& sched);
/// Per-row steps: t is an int64 tensor [B]; x0/eps are [B, ...].
torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& sched);

torch::Tensor x0_estimate(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, const NoiseSchedule& sched);

/// Deterministic DDIM transition from t down to t_prev.
torch::Tensor ddim_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, int t_prev,
                        const NoiseSchedule& sched);

/// Inverse DDIM transition from t up to t_next, reusing the estimate made at t.
torch::Tensor ddim_invert_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, int t_next,
                               const NoiseSchedule& sched);

}  // namespace whatifts
