#include "whatifts/training.hpp"

#include <chrono>
#include <fstream>
#include <limits>

#include "whatifts/checkpoint.hpp"
#include "whatifts/common.hpp"

namespace whatifts {

using nlohmann::json;
namespace fs = std::filesystem;

ForecastModel ForecastModel::create(const EstimatorConfig& config, NoiseSchedule schedule, Vocab vocab,
                                    Normalizer normalizer, int history_len, int future_len) {
  ForecastModel m;
  m.config = config;
  m.config.vocab_size = vocab.size();
  m.config.max_tokens = vocab.max_tokens();
  m.config.diffusion_steps = schedule.T;
  m.config.max_len = history_len + future_len;
  m.schedule = std::move(schedule);
  m.vocab = std::move(vocab);
  m.normalizer = normalizer;
  m.history_len = history_len;
  m.future_len = future_len;
  m.net = NoiseEstimator(m.config);
  return m;
}

void ForecastModel::save(const fs::path& file) const {
  json meta;
  meta["format"] = "whatifts";
  meta["kind"] = "tadiff";
  meta["version"] = 1;
  meta["config"] = config.to_json();
  meta["schedule"] = schedule.to_json();
  meta["vocab"] = vocab.to_json();
  meta["normalizer"] = {{"mean", normalizer.mean}, {"std", normalizer.std}, {"fitted_on", normalizer.fitted_on}};
  meta["L_h"] = history_len;
  meta["L_f"] = future_len;
  meta["dataset"] = dataset_name;
  meta["parent"] = parent_id ? json(*parent_id) : json(nullptr);
  meta["training"] = training_state;
  write_checkpoint(file, meta, *net);
}

ForecastModel ForecastModel::load(const fs::path& file) {
  const Checkpoint ckpt = read_checkpoint(file);
  const auto& meta = ckpt.meta;
  if (meta.value("kind", "") != "tadiff") throw CheckpointError(file.string() + " is not a forecaster checkpoint");
  try {
    auto config = EstimatorConfig::from_json(meta.at("config"));
    auto vocab = Vocab::from_json(meta.at("vocab"), config.max_tokens);
    const auto& n = meta.at("normalizer");
    Normalizer norm{n.at("mean").get<double>(), n.at("std").get<double>(), n.value("fitted_on", "train")};
    ForecastModel m = create(config, NoiseSchedule::from_json(meta.at("schedule")), std::move(vocab), norm,
                             meta.at("L_h").get<int>(), meta.at("L_f").get<int>());
    m.dataset_name = meta.value("dataset", "");
    if (meta.contains("parent") && !meta["parent"].is_null()) m.parent_id = meta["parent"].get<std::string>();
    m.training_state = meta.value("training", json::object());
    load_parameters(*m.net, ckpt);
    m.net->eval();
    return m;
  } catch (const json::exception& e) {
    throw CheckpointError("malformed forecaster metadata in " + file.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw CheckpointError(std::string("malformed vocabulary in checkpoint: ") + e.what());
  }
}

EstimatorFn as_estimator_fn(NoiseEstimator net) {
  return [net](const torch::Tensor& x, const torch::Tensor& ids, const torch::Tensor& t) mutable {
    return net->forward(x, ids, t);
  };
}

MaskedBatch make_masked_batch(const torch::Tensor& history, const torch::Tensor& future, const torch::Tensor& ids,
                              const torch::Tensor& t, const torch::Tensor& future_eps, const NoiseSchedule& sched) {
  if (history.size(0) != future.size(0) || future.sizes() != future_eps.sizes() || t.size(0) != history.size(0))
    throw UsageError("shape-mismatch: batch components disagree");
  const auto lh = history.size(1);
  const auto lf = future.size(1);
  MaskedBatch b;
  b.history_len = static_cast<int>(lh);
  b.x_mixed = torch::cat({history, q_sample(future, t, future_eps, sched)}, 1);
  b.eps = torch::cat({torch::zeros_like(history), future_eps}, 1);
  b.mask = torch::cat({torch::zeros({lh}, history.options()), torch::ones({lf}, history.options())});
  b.ids = ids;
  b.t = t;
  return b;
}

torch::Tensor forecast_loss(const EstimatorFn& estimator, const MaskedBatch& batch) {
  auto out = estimator(batch.x_mixed, batch.ids, batch.t);
  if (out.sizes() != batch.eps.sizes()) throw UsageError("shape-mismatch: estimator output vs noise target");
  auto sq = (out - batch.eps).pow(2) * batch.mask.unsqueeze(0);
  return sq.sum() / (batch.mask.sum() * out.size(0));
}

torch::Tensor attribution_loss(const EstimatorFn& estimator, const torch::Tensor& history, const torch::Tensor& ids,
                               const torch::Tensor& t, const torch::Tensor& eps, const NoiseSchedule& sched) {
  if (history.sizes() != eps.sizes()) throw UsageError("shape-mismatch: history vs sampled noise");
  auto out = estimator(q_sample(history, t, eps, sched), ids, t);
  if (out.sizes() != eps.sizes()) throw UsageError("shape-mismatch: estimator output vs noise target");
  return (out - eps).pow(2).mean();
}

void TrainConfig::validate() const {
  if (epochs < 1) throw UsageError("config-invalid: epochs must be >= 1");
  if (batch_size < 1) throw UsageError("config-invalid: batch_size must be >= 1");
  if (lambda_forecast < 0 || lambda_attribution < 0 || lambda_forecast + lambda_attribution <= 0)
    throw UsageError("config-invalid: loss weights must be >= 0 and not both 0");
  if (!(learning_rate > 0)) throw UsageError("config-invalid: learning_rate must be > 0");
}

json TrainConfig::to_json() const {
  auto est = estimator.to_json();
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"lambda_F", lambda_forecast},
          {"lambda_A", lambda_attribution},
          {"learning_rate", learning_rate},
          {"grad_clip", grad_clip},
          {"seed", seed},
          {"T", T},
          {"beta_start", beta_start},
          {"beta_end", beta_end},
          {"S", S},
          {"estimator", est},
          {"max_train_samples", max_train_samples},
          {"val_samples", val_samples},
          {"double_precision", double_precision}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lambda_forecast = j.value("lambda_F", c.lambda_forecast);
  c.lambda_attribution = j.value("lambda_A", c.lambda_attribution);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
  c.T = j.value("T", c.T);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  c.S = j.value("S", c.S);
  if (j.contains("estimator")) c.estimator = EstimatorConfig::from_json(j["estimator"]);
  c.max_train_samples = j.value("max_train_samples", c.max_train_samples);
  c.val_samples = j.value("val_samples", c.val_samples);
  c.double_precision = j.value("double_precision", c.double_precision);
  c.verbose = j.value("verbose", c.verbose);
  return c;
}

SplitTensors split_tensors(const std::vector<SampleTuple>& records, const Normalizer& norm, const Vocab& vocab,
                           torch::ScalarType dtype, int limit) {
  const auto n = limit > 0 ? std::min<std::size_t>(records.size(), static_cast<std::size_t>(limit)) : records.size();
  SplitTensors out;
  if (n == 0) return out;
  const auto lh = static_cast<std::int64_t>(records.front().history.size());
  const bool has_future = records.front().future.has_value();
  std::vector<double> hist, fut;
  hist.reserve(n * lh);
  std::vector<std::string> htexts, ftexts;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = records[i];
    auto h = apply_normalizer(norm, s.history);
    hist.insert(hist.end(), h.begin(), h.end());
    if (has_future) {
      if (!s.future) throw DataError("mixed factual/counterfactual records in one split");
      auto f = apply_normalizer(norm, *s.future);
      fut.insert(fut.end(), f.begin(), f.end());
    }
    htexts.push_back(s.history_text);
    ftexts.push_back(s.future_text);
    out.sample_ids.push_back(s.sample_id);
  }
  const auto rows = static_cast<std::int64_t>(n);
  auto dopts = torch::TensorOptions().dtype(torch::kDouble);
  out.history = torch::tensor(hist, dopts).view({rows, lh}).to(dtype);
  if (has_future) out.future = torch::tensor(fut, dopts).view({rows, -1}).to(dtype);
  out.history_ids = tokenize_batch(htexts, vocab);
  out.future_ids = tokenize_batch(ftexts, vocab);
  return out;
}

JointLoss joint_loss(ForecastModel& model, const SplitTensors& data, const torch::Tensor& index, double lambda_forecast,
                     double lambda_attribution, torch::Generator& gen) {
  auto& net = model.net;
  const auto& sched = model.schedule;
  auto history = data.history.index_select(0, index);
  auto future = data.future.index_select(0, index);
  auto hist_ids = data.history_ids.index_select(0, index);
  auto fut_ids = data.future_ids.index_select(0, index);
  const auto b = index.size(0);
  auto i64 = torch::TensorOptions().dtype(torch::kInt64);
  auto fopts = history.options();

  auto t_f = torch::randint(1, sched.T + 1, {b}, gen, i64);
  auto eps_f = torch::randn(future.sizes(), gen, fopts);
  auto t_a = torch::randint(1, sched.T + 1, {b}, gen, i64);
  auto eps_a = torch::randn(history.sizes(), gen, fopts);

  // One text-encoder pass serves both branches.
  auto text = net->embed_text(torch::cat({fut_ids, hist_ids}, 0));
  auto fut_text = text.slice(0, 0, b);
  auto hist_text = text.slice(0, b, 2 * b);

  JointLoss out;
  auto zero = torch::zeros({}, fopts);
  if (lambda_forecast > 0) {
    auto batch = make_masked_batch(history, future, fut_ids, t_f, eps_f, sched);
    EstimatorFn fn = [&](const torch::Tensor& x, const torch::Tensor&, const torch::Tensor& t) {
      return net->forward_embedded(x, fut_text, t);
    };
    out.forecast = forecast_loss(fn, batch);
  } else {
    out.forecast = zero;
  }
  if (lambda_attribution > 0) {
    EstimatorFn fn = [&](const torch::Tensor& x, const torch::Tensor&, const torch::Tensor& t) {
      return net->forward_embedded(x, hist_text, t);
    };
    out.attribution = attribution_loss(fn, history, hist_ids, t_a, eps_a, sched);
  } else {
    out.attribution = zero;
  }
  out.total = lambda_forecast * out.forecast + lambda_attribution * out.attribution;
  return out;
}

Vocab dataset_vocab(const Dataset& dataset, const fs::path& dir, int max_tokens) {
  const auto file = dir / "vocab.json";
  if (!dir.empty() && fs::exists(file)) {
    std::ifstream in(file);
    try {
      return Vocab::from_json(json::parse(in), max_tokens);
    } catch (const json::exception& e) {
      throw DataError("schema-violation: vocab.json: " + std::string(e.what()));
    }
  }
  return build_vocab(split_corpus(dataset, "train"), 1, max_tokens);
}

void write_epoch_log(std::ostream& out, const EpochLog& log) {
  out << json{{"epoch", log.epoch},
              {"L_F", log.forecast_loss},
              {"L_A", log.attribution_loss},
              {"total", log.total},
              {"wall_ms", log.wall_ms}}
             .dump()
      << "\n";
}

namespace {

double evaluate_val(ForecastModel& model, const SplitTensors& val, const TrainConfig& cfg) {
  if (!val.history.defined() || !val.future.defined()) return std::numeric_limits<double>::quiet_NaN();
  torch::NoGradGuard guard;
  model.net->eval();
  auto gen = make_generator(derive_seed(cfg.seed, 0x7a11));
  const auto n = val.history.size(0);
  double sum = 0.0;
  std::int64_t batches = 0;
  for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
    auto idx = torch::arange(start, std::min(n, start + cfg.batch_size), torch::kInt64);
    sum += joint_loss(model, val, idx, cfg.lambda_forecast, cfg.lambda_attribution, gen).total.item<double>();
    ++batches;
  }
  model.net->train();
  return sum / static_cast<double>(std::max<std::int64_t>(1, batches));
}

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& dataset, const fs::path& out,
                  const std::optional<Vocab>& vocab_in) {
  config.validate();
  if (dataset.kind == DatasetKind::Counterfactual) throw DataError("training requires a factual dataset");
  const auto& train_split = dataset.split("train");
  const auto n_avail = config.max_train_samples > 0
                           ? std::min<std::size_t>(train_split.size(), static_cast<std::size_t>(config.max_train_samples))
                           : train_split.size();
  if (n_avail < static_cast<std::size_t>(config.batch_size))
    throw DataError("dataset-too-small: " + std::to_string(n_avail) + " training samples for batch size " +
                    std::to_string(config.batch_size));

  const auto dtype = config.double_precision ? torch::kDouble : torch::kFloat;
  const Normalizer norm = dataset.normalizer.value_or(fit_normalizer(dataset, "train"));
  Vocab vocab = vocab_in ? *vocab_in : build_vocab(split_corpus(dataset, "train"), 1, config.estimator.max_tokens);

  torch::manual_seed(config.seed);
  ForecastModel model = ForecastModel::create(config.estimator, make_schedule(config.T, config.beta_start, config.beta_end, config.S),
                                              std::move(vocab), norm, dataset.history_len, dataset.future_len);
  model.dataset_name = dataset.name;
  model.net->to(dtype);
  model.net->train();

  const SplitTensors data = split_tensors(train_split, norm, model.vocab, dtype, config.max_train_samples);
  const SplitTensors val = split_tensors(dataset.split("val"), norm, model.vocab, dtype, config.val_samples);

  torch::optim::Adam opt(model.net->parameters(), torch::optim::AdamOptions(config.learning_rate));
  auto gen = make_generator(config.seed);
  const auto n = data.history.size(0);
  const int cadence = std::max(1, config.epochs / 10);

  const fs::path log_path = (out.has_parent_path() ? out.parent_path() : fs::path(".")) / "train.log.jsonl";
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream log(log_path);

  TrainResult result;
  result.checkpoint = out;
  result.best_val = std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto perm = torch::randperm(n, gen, torch::TensorOptions().dtype(torch::kInt64));
    double sum_f = 0, sum_a = 0, sum_total = 0;
    int batches = 0;
    // Partial trailing batches are dropped so every step sees batch_size rows.
    for (std::int64_t start = 0; start + config.batch_size <= n; start += config.batch_size) {
      auto idx = perm.slice(0, start, start + config.batch_size);
      auto loss = joint_loss(model, data, idx, config.lambda_forecast, config.lambda_attribution, gen);
      opt.zero_grad();
      loss.total.backward();
      if (config.grad_clip > 0) torch::nn::utils::clip_grad_norm_(model.net->parameters(), config.grad_clip);
      opt.step();
      sum_f += loss.forecast.item<double>();
      sum_a += loss.attribution.item<double>();
      sum_total += loss.total.item<double>();
      ++batches;
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.forecast_loss = sum_f / batches;
    entry.attribution_loss = sum_a / batches;
    entry.total = sum_total / batches;
    entry.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(entry);
    write_epoch_log(log, entry);
    log.flush();
    if (config.verbose)
      std::fprintf(stderr, "epoch %d  L_F %.4f  L_A %.4f  total %.4f  (%.0f ms)\n", epoch, entry.forecast_loss,
                   entry.attribution_loss, entry.total, entry.wall_ms);

    if (epoch % cadence == 0 || epoch == config.epochs) {
      model.training_state = {{"epoch", epoch}, {"seed", config.seed}, {"config", config.to_json()},
                              {"last_total", entry.total}};
      model.save(fs::path(out.string() + ".last"));
      const double v = evaluate_val(model, val, config);
      if (std::isfinite(v) && v < result.best_val) {
        result.best_val = v;
        model.training_state["val_total"] = v;
        model.save(fs::path(out.string() + ".best"));
      }
    }
  }
  model.training_state = {{"epoch", config.epochs}, {"seed", config.seed}, {"config", config.to_json()},
                          {"last_total", result.epochs.back().total}};
  model.net->eval();
  model.save(out);
  return result;
}

}  // namespace whatifts
