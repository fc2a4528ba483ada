#include "whatifts/diffusion_schedule.hpp"

#include <algorithm>
#include <cmath>

#include "whatifts/common.hpp"

namespace whatifts {

bool NoiseSchedule::on_grid(int t) const { return std::binary_search(grid.begin(), grid.end(), t); }

nlohmann::json NoiseSchedule::to_json() const {
  return {{"T", T}, {"beta_start", beta_start}, {"beta_end", beta_end}, {"S", steps()}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  return make_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>(),
                       j.at("S").get<int>());
}

namespace {

void finish(NoiseSchedule& s, int S) {
  if (S < 1 || S > s.T)
    throw UsageError("invalid-range: inference steps S=" + std::to_string(S) + " must lie in [1, T=" +
                     std::to_string(s.T) + "]");
  s.alphas.assign(static_cast<std::size_t>(s.T) + 1, 1.0);
  for (int t = 1; t <= s.T; ++t) s.alphas[t] = s.alphas[t - 1] * (1.0 - s.betas[t - 1]);
  s.grid.clear();
  for (int i = 0; i <= S; ++i)
    s.grid.push_back(static_cast<int>(static_cast<long long>(i) * s.T / S));
}

}  // namespace

NoiseSchedule make_schedule(int T, double beta_start, double beta_end, int S) {
  if (T < 1) throw UsageError("invalid-range: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw UsageError("invalid-range: require 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.betas.resize(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i)
    s.betas[i] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / static_cast<double>(T - 1);
  finish(s, S);
  return s;
}

NoiseSchedule schedule_from_betas(const std::vector<double>& betas, int S) {
  if (betas.empty()) throw UsageError("invalid-range: empty beta list");
  for (double b : betas)
    if (!(b > 0.0 && b < 1.0)) throw UsageError("invalid-range: betas must lie in (0, 1)");
  NoiseSchedule s;
  s.T = static_cast<int>(betas.size());
  s.beta_start = betas.front();
  s.beta_end = betas.back();
  s.betas = betas;
  finish(s, S);
  return s;
}

namespace {

void check_step(const NoiseSchedule& sched, int t, int lo) {
  if (t < lo || t > sched.T)
    throw UsageError("t-out-of-range: step " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                     std::to_string(sched.T) + "]");
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw UsageError("length-mismatch: noise and signal shapes differ");
}

}  // namespace

torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps, const NoiseSchedule& sched) {
  check_step(sched, t, 1);
  check_same_shape(x0, eps);
  const double a = sched.alpha(t);
  return std::sqrt(a) * x0 + std::sqrt(1.0 - a) * eps;
}

torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& sched) {
  check_same_shape(x0, eps);
  auto alphas = torch::tensor(sched.alphas, torch::TensorOptions().dtype(torch::kDouble));
  auto a = alphas.index_select(0, t.to(torch::kInt64)).to(x0.scalar_type());
  std::vector<std::int64_t> shape(static_cast<std::size_t>(x0.dim()), 1);
  shape[0] = x0.size(0);
  a = a.view(shape);
  return a.sqrt() * x0 + (1.0 - a).sqrt() * eps;
}

torch::Tensor x0_estimate(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, const NoiseSchedule& sched) {
  check_step(sched, t, 0);
  check_same_shape(x_t, eps_hat);
  const double a = sched.alpha(t);
  return (x_t - std::sqrt(1.0 - a) * eps_hat) / std::sqrt(a);
}

torch::Tensor ddim_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, int t_prev,
                        const NoiseSchedule& sched) {
  if (!(t_prev < t) || !sched.on_grid(t) || !sched.on_grid(t_prev))
    throw UsageError("grid-violation: denoise step " + std::to_string(t) + " -> " + std::to_string(t_prev));
  const double a_prev = sched.alpha(t_prev);
  return std::sqrt(a_prev) * x0_estimate(x_t, eps_hat, t, sched) + std::sqrt(1.0 - a_prev) * eps_hat;
}

torch::Tensor ddim_invert_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, int t_next,
                               const NoiseSchedule& sched) {
  if (!(t_next > t) || !sched.on_grid(t) || !sched.on_grid(t_next))
    throw UsageError("grid-violation: inverse step " + std::to_string(t) + " -> " + std::to_string(t_next));
  const double a_next = sched.alpha(t_next);
  return std::sqrt(a_next) * x0_estimate(x_t, eps_hat, t, sched) + std::sqrt(1.0 - a_next) * eps_hat;
}

}  // namespace whatifts
