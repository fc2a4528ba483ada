#include "whatifts/inference.hpp"

#include "whatifts/common.hpp"
#include "whatifts/layers.hpp"

namespace whatifts {

NoiseSchedule with_steps(const NoiseSchedule& sched, int steps) {
  if (steps == sched.steps()) return sched;
  return make_schedule(sched.T, sched.beta_start, sched.beta_end, steps);
}

namespace {

torch::Tensor step_tensor(int t, std::int64_t b) { return torch::full({b}, t, torch::TensorOptions().dtype(torch::kInt64)); }

}  // namespace

torch::Tensor attribute(NoiseEstimator& net, const NoiseSchedule& sched, const torch::Tensor& history,
                        const torch::Tensor& history_text_embedding) {
  torch::NoGradGuard guard;
  const auto b = history.size(0);
  auto x = history;
  for (std::size_t i = 0; i + 1 < sched.grid.size(); ++i) {
    const int t = sched.grid[i];
    auto eps = net->forward_embedded(x, history_text_embedding, step_tensor(t, b));
    x = ddim_invert_step(x, eps, t, sched.grid[i + 1], sched);
  }
  return x;
}

torch::Tensor attribute_ids(NoiseEstimator& net, const NoiseSchedule& sched, const torch::Tensor& history,
                            const torch::Tensor& history_ids) {
  torch::NoGradGuard guard;
  return attribute(net, sched, history, net->embed_text(history_ids));
}

torch::Tensor denoise_anchored(NoiseEstimator& net, const NoiseSchedule& sched, const torch::Tensor& history,
                               const torch::Tensor& initial_future, const torch::Tensor& future_text_embedding) {
  torch::NoGradGuard guard;
  const auto b = history.size(0);
  const auto lh = history.size(1);
  auto state = torch::cat({history, initial_future}, 1);
  for (std::size_t i = sched.grid.size() - 1; i > 0; --i) {
    const int t = sched.grid[i];
    state.slice(1, 0, lh).copy_(history);
    auto eps = net->forward_embedded(state, future_text_embedding, step_tensor(t, b));
    state = ddim_step(state, eps, t, sched.grid[i - 1], sched);
  }
  state.slice(1, 0, lh).copy_(history);
  return state;
}

BatchForecast forecast_batch(ForecastModel& model, const NoiseSchedule& sched, const torch::Tensor& history,
                             const torch::Tensor& history_ids, const torch::Tensor& future_ids, bool use_attribution,
                             torch::Generator& gen) {
  torch::NoGradGuard guard;
  const auto b = history.size(0);
  const auto lf = model.future_len;
  BatchForecast out;
  if (use_attribution) {
    if (model.history_len != model.future_len)
      throw UsageError("length-policy violation: attribution requires L_h == L_f (got " +
                       std::to_string(model.history_len) + " and " + std::to_string(model.future_len) + ")");
    out.initial_states = attribute_ids(model.net, sched, history, history_ids);
  } else {
    out.initial_states = torch::randn({b, lf}, gen, history.options());
  }
  auto text = model.net->embed_text(future_ids);
  out.full_states = denoise_anchored(model.net, sched, history, out.initial_states, text);
  out.forecasts = out.full_states.slice(1, model.history_len, model.history_len + lf);
  return out;
}

namespace {

std::vector<std::vector<double>> rows(const torch::Tensor& t) {
  auto d = t.to(torch::kDouble).contiguous();
  std::vector<std::vector<double>> out(static_cast<std::size_t>(d.size(0)));
  for (std::int64_t i = 0; i < d.size(0); ++i) {
    const double* p = d[i].data_ptr<double>();
    out[i].assign(p, p + d.size(1));
  }
  return out;
}

}  // namespace

ForecastResult forecast(ForecastModel& model, const ForecastRequest& req) {
  if (req.num_samples < 1) throw UsageError("invalid num_samples: must be >= 1");
  if (static_cast<int>(req.history.size()) != model.history_len)
    throw UsageError("history length " + std::to_string(req.history.size()) + " differs from L_h=" +
                     std::to_string(model.history_len));
  if (req.use_attribution && model.history_len != model.future_len)
    throw UsageError("length-policy violation: attribution requires L_h == L_f");
  torch::NoGradGuard guard;
  const auto dtype = model.dtype();
  const NoiseSchedule sched = req.steps ? with_steps(model.schedule, *req.steps) : model.schedule;
  const std::int64_t k = req.num_samples;

  auto history = torch::tensor(req.history, torch::TensorOptions().dtype(torch::kDouble)).to(dtype).unsqueeze(0);
  auto gen = make_generator(req.seed);
  auto fut_ids = model.ids({req.future_text}).expand({k, -1});
  auto hist = history.expand({k, -1}).contiguous();

  torch::Tensor init;
  if (req.use_attribution) {
    auto attributed = attribute_ids(model.net, sched, history, model.ids({req.history_text}));
    init = attributed.expand({k, -1}).clone();
    if (k > 1 && req.perturb_scale > 0) {
      auto jitter = torch::randn({k - 1, model.future_len}, gen, init.options()) * req.perturb_scale;
      init.slice(0, 1, k) += jitter;
    }
  } else {
    init = torch::randn({k, model.future_len}, gen, hist.options());
  }
  auto text = model.net->embed_text(fut_ids.contiguous());
  auto full = denoise_anchored(model.net, sched, hist, init, text);

  ForecastResult res;
  res.attribution_used = req.use_attribution;
  res.full_states = rows(full);
  res.forecasts = rows(full.slice(1, model.history_len, model.history_len + model.future_len));
  res.initial_states = rows(init);
  for (const auto& f : res.forecasts) res.denormalized.push_back(apply_normalizer(model.normalizer, f, true));
  return res;
}

}  // namespace whatifts
