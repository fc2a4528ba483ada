#include "whatifts/evaluation.hpp"

#include <chrono>
#include <fstream>
#include <random>

#include "whatifts/checkpoint.hpp"
#include "whatifts/common.hpp"
#include "whatifts/inference.hpp"
#include "whatifts/layers.hpp"

namespace whatifts {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(EvalSetting s) { return s == EvalSetting::Factual ? "factual" : "counterfactual"; }

EvalSetting eval_setting_from_string(const std::string& s) {
  if (s == "factual") return EvalSetting::Factual;
  if (s == "counterfactual") return EvalSetting::Counterfactual;
  throw UsageError("unknown setting '" + s + "' (expected factual or counterfactual)");
}

std::pair<double, double> mae_mse(const torch::Tensor& pred, const torch::Tensor& truth) {
  if (pred.sizes() != truth.sizes()) throw UsageError("shape-mismatch: prediction and truth differ in shape");
  if (pred.numel() == 0) throw UsageError("shape-mismatch: empty prediction");
  auto diff = pred.to(torch::kDouble) - truth.to(torch::kDouble);
  return {diff.abs().mean().item<double>(), diff.pow(2).mean().item<double>()};
}

std::pair<double, double> mae_mse(const std::vector<std::vector<double>>& pred,
                                  const std::vector<std::vector<double>>& truth) {
  if (pred.size() != truth.size()) throw UsageError("shape-mismatch: prediction and truth row counts differ");
  double abs_sum = 0, sq_sum = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].size() != truth[i].size()) throw UsageError("shape-mismatch: row " + std::to_string(i));
    for (std::size_t j = 0; j < pred[i].size(); ++j) {
      const double d = pred[i][j] - truth[i][j];
      abs_sum += std::abs(d);
      sq_sum += d * d;
    }
    count += pred[i].size();
  }
  if (count == 0) throw UsageError("shape-mismatch: empty prediction");
  return {abs_sum / count, sq_sum / count};
}

json EvalReport::to_json() const {
  json j;
  j["dataset"] = dataset;
  j["split"] = split;
  j["setting"] = to_string(setting);
  if (mae) j["mae"] = *mae;
  if (mse) j["mse"] = *mse;
  if (mae_raw) j["mae_raw"] = *mae_raw;
  if (mse_raw) j["mse_raw"] = *mse_raw;
  j["dttc_i"] = dttc_i;
  j["dttc_e"] = dttc_e;
  j["n"] = n;
  j["num_samples"] = num_samples;
  j["use_attribution"] = use_attribution;
  j["checkpoints"] = {{"model", model_checkpoint}, {"dttc", dttc_checkpoint}};
  j["seed"] = seed;
  j["wall_time_s"] = wall_time_s;
  return j;
}

EvalReport EvalReport::from_json(const json& j) {
  const auto problem = validate_report_json(j);
  if (!problem.empty()) throw DataError("schema-violation: report: " + problem);
  EvalReport r;
  r.dataset = j.at("dataset").get<std::string>();
  r.split = j.at("split").get<std::string>();
  r.setting = eval_setting_from_string(j.at("setting").get<std::string>());
  auto opt = [&](const char* key) -> std::optional<double> {
    if (j.contains(key)) return j.at(key).get<double>();
    return std::nullopt;
  };
  r.mae = opt("mae");
  r.mse = opt("mse");
  r.mae_raw = opt("mae_raw");
  r.mse_raw = opt("mse_raw");
  r.dttc_i = j.at("dttc_i").get<double>();
  r.dttc_e = j.at("dttc_e").get<double>();
  r.n = j.at("n").get<int>();
  r.num_samples = j.value("num_samples", 1);
  r.use_attribution = j.value("use_attribution", true);
  r.model_checkpoint = j.at("checkpoints").at("model").get<std::string>();
  r.dttc_checkpoint = j.at("checkpoints").at("dttc").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.wall_time_s = j.at("wall_time_s").get<double>();
  return r;
}

std::string validate_report_json(const json& j) {
  if (!j.is_object()) return "report must be an object";
  for (const char* key : {"dataset", "split", "setting"})
    if (!j.contains(key) || !j[key].is_string()) return std::string("missing string field '") + key + "'";
  for (const char* key : {"dttc_i", "dttc_e", "wall_time_s"})
    if (!j.contains(key) || !j[key].is_number()) return std::string("missing numeric field '") + key + "'";
  if (!j.contains("n") || !j["n"].is_number_integer() || j["n"].get<long long>() <= 0) return "n must be a positive integer";
  if (!j.contains("seed") || !j["seed"].is_number_integer()) return "missing integer field 'seed'";
  if (!j.contains("checkpoints") || !j["checkpoints"].is_object() || !j["checkpoints"].contains("model") ||
      !j["checkpoints"].contains("dttc"))
    return "missing checkpoint ids";
  const auto setting = j["setting"].get<std::string>();
  const bool has_any = j.contains("mae") || j.contains("mse") || j.contains("mae_raw") || j.contains("mse_raw");
  if (setting == "counterfactual") {
    if (has_any) return "counterfactual reports must not carry mae/mse";
  } else if (setting == "factual") {
    for (const char* key : {"mae", "mse", "mae_raw", "mse_raw"})
      if (!j.contains(key) || !j[key].is_number()) return std::string("factual report lacks '") + key + "'";
  } else {
    return "unknown setting '" + setting + "'";
  }
  return "";
}

EvalReport evaluate_forecaster(const Forecaster& forecaster, DttcModel& dttc, const Dataset& dataset,
                               const Normalizer& normalizer, const EvalOptions& options) {
  if (options.num_samples < 1) throw UsageError("invalid num_samples: must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  const auto& records = dataset.split(options.split);
  const auto n = options.limit > 0 ? std::min<std::size_t>(records.size(), static_cast<std::size_t>(options.limit))
                                   : records.size();
  if (n == 0) throw DataError("empty-split: '" + options.split + "' has no samples to evaluate");
  const bool factual = options.setting == EvalSetting::Factual;
  if (factual)
    for (std::size_t i = 0; i < n; ++i)
      if (!records[i].future) throw DataError("missing futures: factual evaluation needs ground-truth futures");

  torch::NoGradGuard guard;
  auto dopts = torch::TensorOptions().dtype(torch::kDouble);
  double abs_n = 0, sq_n = 0, abs_r = 0, sq_r = 0, di = 0, de = 0;
  std::size_t cells = 0;
  const std::size_t bs = static_cast<std::size_t>(std::max(1, options.batch_size));
  for (std::size_t start = 0; start < n; start += bs) {
    const std::size_t end = std::min(n, start + bs);
    const auto b = static_cast<std::int64_t>(end - start);
    EvalBatch batch;
    std::vector<double> hist_raw, hist_norm, fut_raw;
    for (std::size_t i = start; i < end; ++i) {
      const auto& r = records[i];
      hist_raw.insert(hist_raw.end(), r.history.begin(), r.history.end());
      auto h = apply_normalizer(normalizer, r.history);
      hist_norm.insert(hist_norm.end(), h.begin(), h.end());
      if (factual) fut_raw.insert(fut_raw.end(), r.future->begin(), r.future->end());
      batch.history_texts.push_back(r.history_text);
      batch.future_texts.push_back(r.future_text);
      batch.rows.push_back(i);
    }
    batch.history = torch::tensor(hist_norm, dopts).view({b, -1});
    auto history_raw = torch::tensor(hist_raw, dopts).view({b, -1});

    std::vector<torch::Tensor> draws;
    for (int k = 0; k < options.num_samples; ++k) {
      auto f = forecaster(batch, k).to(torch::kDouble);
      if (f.dim() != 2 || f.size(0) != b || f.size(1) != dataset.future_len)
        throw UsageError("shape-mismatch: forecaster returned the wrong shape");
      auto raw = f * normalizer.std + normalizer.mean;
      auto s = dttc_scores(dttc, raw, history_raw, batch.future_texts);
      di += s.intrinsic * static_cast<double>(b);
      de += s.extrinsic * static_cast<double>(b);
      draws.push_back(f);
    }
    if (factual) {
      auto median = torch::stack(draws).quantile(0.5, 0);
      auto truth_raw = torch::tensor(fut_raw, dopts).view({b, -1});
      auto truth = (truth_raw - normalizer.mean) / normalizer.std;
      auto d = median - truth;
      abs_n += d.abs().sum().item<double>();
      sq_n += d.pow(2).sum().item<double>();
      auto dr = median * normalizer.std + normalizer.mean - truth_raw;
      abs_r += dr.abs().sum().item<double>();
      sq_r += dr.pow(2).sum().item<double>();
      cells += static_cast<std::size_t>(d.numel());
    }
  }

  EvalReport r;
  r.dataset = dataset.name;
  r.split = options.split;
  r.setting = options.setting;
  r.n = static_cast<int>(n);
  r.num_samples = options.num_samples;
  r.use_attribution = options.use_attribution;
  r.seed = options.seed;
  const double denom = static_cast<double>(n) * options.num_samples;
  r.dttc_i = di / denom;
  r.dttc_e = de / denom;
  if (factual) {
    r.mae = abs_n / cells;
    r.mse = sq_n / cells;
    r.mae_raw = abs_r / cells;
    r.mse_raw = sq_r / cells;
  }
  r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

EvalReport evaluate(ForecastModel& model, DttcModel& dttc, const Dataset& dataset, const EvalOptions& options) {
  if (dataset.history_len != model.history_len || dataset.future_len != model.future_len)
    throw DataError("incompatible dataset: window lengths differ from the checkpoint");
  if (options.use_attribution && model.history_len != model.future_len)
    throw UsageError("length-policy violation: attribution requires L_h == L_f");
  const NoiseSchedule sched = options.steps ? with_steps(model.schedule, *options.steps) : model.schedule;
  const auto dtype = model.dtype();
  auto gen = make_generator(options.seed);
  torch::Tensor attributed;  // cached per batch
  torch::Tensor first_draw;

  Forecaster fn = [&](const EvalBatch& batch, int draw) {
    auto history = batch.history.to(dtype);
    const auto b = history.size(0);
    if (options.use_attribution) {
      if (draw == 0) attributed = attribute_ids(model.net, sched, history, model.ids(batch.history_texts));
      // Without perturbation every draw starts from the same state and is identical.
      if (draw > 0 && options.perturb_scale <= 0) return first_draw;
    }
    torch::Tensor init;
    if (options.use_attribution) {
      init = attributed.clone();
      if (draw > 0) init += torch::randn(init.sizes(), gen, init.options()) * options.perturb_scale;
    } else {
      init = torch::randn({b, model.future_len}, gen, history.options());
    }
    auto text = model.net->embed_text(model.ids(batch.future_texts));
    auto full = denoise_anchored(model.net, sched, history, init, text);
    auto f = full.slice(1, model.history_len, model.history_len + model.future_len);
    if (draw == 0) first_draw = f;
    return f;
  };
  auto report = evaluate_forecaster(fn, dttc, dataset, model.normalizer, options);
  return report;
}

std::vector<double> persistence_forecast(const std::vector<double>& history, int future_len) {
  if (history.empty() || future_len < 1) throw UsageError("persistence needs a non-empty history and L_f >= 1");
  const auto lh = static_cast<int>(history.size());
  std::vector<double> out(static_cast<std::size_t>(future_len));
  if (lh >= future_len) {
    std::copy(history.end() - future_len, history.end(), out.begin());
  } else {
    for (int i = 0; i < future_len; ++i) out[i] = history[i % lh];
  }
  return out;
}

std::pair<double, double> persistence_mae_mse(const Dataset& dataset, const Normalizer& normalizer,
                                              const std::string& split, int limit) {
  const auto& records = dataset.split(split);
  const auto n = limit > 0 ? std::min<std::size_t>(records.size(), static_cast<std::size_t>(limit)) : records.size();
  std::vector<std::vector<double>> pred, truth;
  for (std::size_t i = 0; i < n; ++i) {
    if (!records[i].future) throw DataError("missing futures: persistence baseline needs ground truth");
    pred.push_back(apply_normalizer(normalizer, persistence_forecast(records[i].history, dataset.future_len)));
    truth.push_back(apply_normalizer(normalizer, *records[i].future));
  }
  return mae_mse(pred, truth);
}

std::size_t export_initial_noise(ForecastModel& model, const Dataset& dataset, const fs::path& out,
                                 const NoiseExportOptions& options) {
  const auto& records = dataset.split(options.split);
  const auto n = options.limit > 0 ? std::min<std::size_t>(records.size(), static_cast<std::size_t>(options.limit))
                                   : records.size();
  if (dataset.history_len != model.history_len) throw DataError("incompatible dataset: L_h differs from the checkpoint");
  std::ofstream file(out);
  if (!file) throw DataError("cannot write " + out.string());
  const std::uint64_t control_seed = options.control_seed ? *options.control_seed : std::random_device{}();
  auto gen = make_generator(control_seed);
  torch::NoGradGuard guard;
  const auto data = split_tensors(records, model.normalizer, model.vocab, model.dtype(), static_cast<int>(n));
  const std::int64_t bs = std::max(1, options.batch_size);
  for (std::int64_t start = 0; start < static_cast<std::int64_t>(n); start += bs) {
    const auto end = std::min<std::int64_t>(static_cast<std::int64_t>(n), start + bs);
    auto attributed = attribute_ids(model.net, model.schedule, data.history.slice(0, start, end),
                                    data.history_ids.slice(0, start, end))
                          .to(torch::kDouble)
                          .contiguous();
    auto control = torch::randn(attributed.sizes(), gen, attributed.options());
    for (std::int64_t i = 0; i < end - start; ++i) {
      const double* a = attributed[i].data_ptr<double>();
      const double* c = control[i].data_ptr<double>();
      const auto len = attributed.size(1);
      json row{{"sample_id", data.sample_ids[start + i]},
               {"attributed", std::vector<double>(a, a + len)},
               {"control", std::vector<double>(c, c + len)}};
      file << row.dump() << "\n";
    }
  }
  return n;
}

}  // namespace whatifts
