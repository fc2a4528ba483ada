#include "whatifts/dttc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "whatifts/checkpoint.hpp"
#include "whatifts/common.hpp"

namespace whatifts {

using nlohmann::json;
namespace nn = torch::nn;

void DttcConfig::validate() const {
  if (patch_len <= 0 || width <= 0 || embed_dim <= 0 || layers < 0 || heads <= 0 || max_tokens <= 0)
    throw UsageError("config-invalid: DTTC sizes must be positive");
  if (width % heads != 0) throw UsageError("config-invalid: DTTC width must be divisible by heads");
  if (max_len % patch_len != 0) throw UsageError("config-invalid: DTTC max_len must be a multiple of patch_len");
  if (!(temperature > 0)) throw UsageError("config-invalid: temperature must be > 0");
}

json DttcConfig::to_json() const {
  return {{"patch_len", patch_len}, {"width", width},         {"embed_dim", embed_dim},
          {"layers", layers},       {"heads", heads},         {"text_layers", text_layers},
          {"max_tokens", max_tokens}, {"vocab_size", vocab_size}, {"max_len", max_len},
          {"temperature", temperature}};
}

DttcConfig DttcConfig::from_json(const json& j) {
  DttcConfig c;
  c.patch_len = j.value("patch_len", c.patch_len);
  c.width = j.value("width", c.width);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.text_layers = j.value("text_layers", c.text_layers);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_len = j.value("max_len", c.max_len);
  c.temperature = j.value("temperature", c.temperature);
  return c;
}

DttcNetImpl::DttcNetImpl(const DttcConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  patch_embed = register_module("patch_embed", nn::Linear(cfg.patch_len, cfg.width));
  position_embedding =
      register_parameter("position_embedding", torch::randn({cfg.max_len / cfg.patch_len, cfg.width}) * 0.02);
  for (int i = 0; i < cfg.layers; ++i)
    layers.push_back(register_module("layer" + std::to_string(i), EncoderLayer(cfg.width, cfg.heads)));
  final_norm = register_module("final_norm", nn::LayerNorm(nn::LayerNormOptions({cfg.width})));
  intrinsic_head = register_module("intrinsic_head", nn::Linear(cfg.width, cfg.embed_dim));
  extrinsic_head = register_module("extrinsic_head", nn::Linear(cfg.width, cfg.embed_dim));
  TextEncoderConfig tc;
  tc.vocab_size = cfg.vocab_size;
  tc.max_tokens = cfg.max_tokens;
  tc.width = cfg.width;
  tc.out_dim = cfg.embed_dim;
  tc.heads = cfg.heads;
  tc.layers = cfg.text_layers;
  text_encoder = register_module("text_encoder", TextEncoder(tc));
  log_scale = register_parameter("log_scale", torch::full({}, std::log(1.0 / cfg.temperature)));
}

std::pair<torch::Tensor, torch::Tensor> DttcNetImpl::encode_series(const torch::Tensor& x) {
  if (x.dim() != 2) throw UsageError("series encoder expects [B, L] input");
  if (x.size(1) > cfg_.max_len)
    throw UsageError("series length " + std::to_string(x.size(1)) + " exceeds DTTC max_len " +
                     std::to_string(cfg_.max_len));
  auto tokens = patchify(x, cfg_.patch_len);
  auto h = patch_embed(tokens) + position_embedding.slice(0, 0, tokens.size(1)).unsqueeze(0);
  for (auto& layer : layers) h = layer(h);
  auto pooled = final_norm(h).mean(1);
  return {intrinsic_head(pooled), extrinsic_head(pooled)};
}

torch::Tensor DttcNetImpl::logit_scale() const { return log_scale.clamp_max(std::log(100.0)).exp(); }

void DttcNetImpl::zero_heads() {
  torch::NoGradGuard guard;
  for (auto* head : {&intrinsic_head, &extrinsic_head}) {
    (*head)->weight.zero_();
    (*head)->bias.zero_();
  }
}

DttcModel DttcModel::create(const DttcConfig& config, Vocab vocab, Normalizer normalizer) {
  DttcModel m;
  m.config = config;
  m.config.vocab_size = vocab.size();
  m.config.max_tokens = vocab.max_tokens();
  m.vocab = std::move(vocab);
  m.normalizer = normalizer;
  m.net = DttcNet(m.config);
  return m;
}

void DttcModel::save(const std::filesystem::path& file) const {
  json meta;
  meta["format"] = "whatifts";
  meta["kind"] = "dttc";
  meta["version"] = 1;
  meta["config"] = config.to_json();
  meta["vocab"] = vocab.to_json();
  meta["normalizer"] = {{"mean", normalizer.mean}, {"std", normalizer.std}, {"fitted_on", normalizer.fitted_on}};
  meta["dataset"] = dataset_name;
  meta["training"] = training_state;
  write_checkpoint(file, meta, *net);
}

DttcModel DttcModel::load(const std::filesystem::path& file) {
  const Checkpoint ckpt = read_checkpoint(file);
  const auto& meta = ckpt.meta;
  if (meta.value("kind", "") != "dttc") throw CheckpointError(file.string() + " is not a DTTC checkpoint");
  try {
    auto config = DttcConfig::from_json(meta.at("config"));
    auto vocab = Vocab::from_json(meta.at("vocab"), config.max_tokens);
    const auto& n = meta.at("normalizer");
    DttcModel m = create(config, std::move(vocab),
                         Normalizer{n.at("mean").get<double>(), n.at("std").get<double>(), n.value("fitted_on", "train")});
    m.dataset_name = meta.value("dataset", "");
    m.training_state = meta.value("training", json::object());
    load_parameters(*m.net, ckpt);
    m.net->eval();
    return m;
  } catch (const json::exception& e) {
    throw CheckpointError("malformed DTTC metadata in " + file.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw CheckpointError(std::string("malformed vocabulary in checkpoint: ") + e.what());
  }
}

std::pair<torch::Tensor, torch::Tensor> DttcModel::encode_series(const torch::Tensor& raw) {
  return net->encode_series((raw.to(dtype()) - normalizer.mean) / normalizer.std);
}

torch::Tensor DttcModel::encode_texts(const std::vector<std::string>& texts) {
  return net->encode_text(tokenize_batch(texts, vocab));
}

torch::Tensor DttcModel::encode_condition(const std::string& text) { return encode_texts({text}).squeeze(0); }

torch::Tensor similarity_matrix(const torch::Tensor& a, const torch::Tensor& b) { return torch::matmul(a, b.t()); }

torch::Tensor contrastive_loss(const torch::Tensor& queries, const torch::Tensor& keys, const torch::Tensor& scale) {
  auto logits = similarity_matrix(queries, keys) * scale;
  auto targets = torch::arange(queries.size(0), torch::TensorOptions().dtype(torch::kInt64));
  return torch::nn::functional::cross_entropy(logits, targets);
}

DttcLosses dttc_losses(DttcNet& net, const torch::Tensor& history, const torch::Tensor& future,
                       const torch::Tensor& history_ids, const torch::Tensor& future_ids) {
  const auto b = history.size(0);
  torch::Tensor i_h, e_h, i_f, e_f;
  if (history.size(1) == future.size(1)) {
    auto [i, e] = net->encode_series(torch::cat({history, future}, 0));
    i_h = i.slice(0, 0, b), i_f = i.slice(0, b, 2 * b);
    e_h = e.slice(0, 0, b), e_f = e.slice(0, b, 2 * b);
  } else {
    std::tie(i_h, e_h) = net->encode_series(history);
    std::tie(i_f, e_f) = net->encode_series(future);
  }
  auto text = net->encode_text(torch::cat({history_ids, future_ids}, 0));
  auto et_h = text.slice(0, 0, b), et_f = text.slice(0, b, 2 * b);
  auto scale = net->logit_scale();
  DttcLosses out;
  out.intrinsic = contrastive_loss(i_h, i_f, scale);
  out.extrinsic = 0.5 * (contrastive_loss(e_h, et_h, scale) + contrastive_loss(e_f, et_f, scale));
  out.total = out.intrinsic + out.extrinsic;
  return out;
}

DttcScores dttc_scores(const torch::Tensor& i_forecast, const torch::Tensor& i_history,
                       const torch::Tensor& e_forecast, const torch::Tensor& e_text) {
  if (i_forecast.sizes() != i_history.sizes() || e_forecast.sizes() != e_text.sizes() ||
      i_forecast.size(0) != e_forecast.size(0) || i_forecast.size(0) < 1)
    throw UsageError("misaligned lists: DTTC inputs must be aligned and non-empty");
  DttcScores s;
  s.intrinsic = (i_forecast * i_history).sum(1).mean().item<double>();
  s.extrinsic = (e_forecast * e_text).sum(1).mean().item<double>();
  return s;
}

DttcScores dttc_scores(DttcModel& model, const torch::Tensor& forecasts, const torch::Tensor& histories,
                       const std::vector<std::string>& future_texts) {
  if (forecasts.size(0) != histories.size(0) || forecasts.size(0) != static_cast<std::int64_t>(future_texts.size()))
    throw UsageError("misaligned lists: forecasts, histories and texts differ in length");
  torch::NoGradGuard guard;
  auto [i_f, e_f] = model.encode_series(forecasts);
  auto [i_h, e_h] = model.encode_series(histories);
  return dttc_scores(i_f, i_h, e_f, model.encode_texts(future_texts));
}

json DttcTrainConfig::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size}, {"learning_rate", learning_rate}, {"seed", seed},
          {"max_train_samples", max_train_samples}, {"eval_every", eval_every}, {"model", model.to_json()}};
}

DttcTrainConfig DttcTrainConfig::from_json(const json& j) {
  DttcTrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  c.max_train_samples = j.value("max_train_samples", c.max_train_samples);
  c.eval_every = j.value("eval_every", c.eval_every);
  if (j.contains("model")) c.model = DttcConfig::from_json(j["model"]);
  c.verbose = j.value("verbose", c.verbose);
  return c;
}

namespace {

struct PairTensors {
  torch::Tensor history, future, history_ids, future_ids;
};

PairTensors pair_tensors(const std::vector<SampleTuple>& records, const Normalizer& norm, const Vocab& vocab,
                         int limit) {
  const auto n = limit > 0 ? std::min<std::size_t>(records.size(), static_cast<std::size_t>(limit)) : records.size();
  std::vector<double> h, f;
  std::vector<std::string> ht, ft;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = records[i];
    if (!s.future) throw DataError("dataset lacking futures: DTTC training needs factual records");
    auto hn = apply_normalizer(norm, s.history);
    auto fn = apply_normalizer(norm, *s.future);
    h.insert(h.end(), hn.begin(), hn.end());
    f.insert(f.end(), fn.begin(), fn.end());
    ht.push_back(s.history_text);
    ft.push_back(s.future_text);
  }
  auto opts = torch::TensorOptions().dtype(torch::kDouble);
  const auto rows = static_cast<std::int64_t>(n);
  return {torch::tensor(h, opts).view({rows, -1}).to(torch::kFloat), torch::tensor(f, opts).view({rows, -1}).to(torch::kFloat),
          tokenize_batch(ht, vocab), tokenize_batch(ft, vocab)};
}

}  // namespace

DttcTrainResult contrastive_train(const DttcTrainConfig& config, const Dataset& dataset,
                                  const std::optional<Vocab>& vocab_in) {
  if (dataset.kind == DatasetKind::Counterfactual) throw DataError("dataset lacking futures: DTTC needs factual data");
  const Normalizer norm = dataset.normalizer.value_or(fit_normalizer(dataset, "train"));
  Vocab vocab = vocab_in ? *vocab_in : build_vocab(split_corpus(dataset, "train"), 1, config.model.max_tokens);
  DttcConfig mc = config.model;
  mc.max_len = std::max(dataset.history_len, dataset.future_len);
  if (mc.max_len % mc.patch_len != 0) throw UsageError("config-invalid: series length not divisible by patch_len");

  torch::manual_seed(config.seed);
  DttcTrainResult result{DttcModel::create(mc, std::move(vocab), norm), {}};
  auto& model = result.model;
  model.dataset_name = dataset.name;
  model.net->train();

  const auto data = pair_tensors(dataset.split("train"), norm, model.vocab, config.max_train_samples);
  const auto n = data.history.size(0);
  if (n < 2) throw DataError("dataset-too-small: contrastive training needs at least 2 samples");
  const auto batch = std::min<std::int64_t>(config.batch_size, n);

  torch::optim::Adam opt(model.net->parameters(), torch::optim::AdamOptions(config.learning_rate));
  auto gen = make_generator(config.seed);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    auto perm = torch::randperm(n, gen, torch::TensorOptions().dtype(torch::kInt64));
    double sum_i = 0, sum_e = 0;
    int steps = 0;
    for (std::int64_t start = 0; start + batch <= n; start += batch) {
      auto idx = perm.slice(0, start, start + batch);
      auto losses = dttc_losses(model.net, data.history.index_select(0, idx), data.future.index_select(0, idx),
                                data.history_ids.index_select(0, idx), data.future_ids.index_select(0, idx));
      opt.zero_grad();
      losses.total.backward();
      torch::nn::utils::clip_grad_norm_(model.net->parameters(), 1.0);
      opt.step();
      sum_i += losses.intrinsic.item<double>();
      sum_e += losses.extrinsic.item<double>();
      ++steps;
    }
    DttcEpochLog log{epoch, sum_i / steps, sum_e / steps};
    if (config.eval_every > 0 && epoch % config.eval_every == 0 && !dataset.split("val").empty()) {
      model.net->eval();
      auto r = retrieval_eval(model, dataset.split("val"), 3, config.seed, 1000);
      log.val_acc_i = r.acc_i;
      log.val_acc_e = r.acc_e;
      model.net->train();
    }
    if (config.verbose)
      std::fprintf(stderr, "dttc epoch %d  L_I %.4f  L_E %.4f  val I %.1f E %.1f\n", epoch, log.intrinsic,
                   log.extrinsic, log.val_acc_i, log.val_acc_e);
    result.epochs.push_back(log);
  }
  model.net->eval();
  model.training_state = {{"epochs", config.epochs}, {"seed", config.seed}, {"config", config.to_json()},
                          {"final_L_I", result.epochs.back().intrinsic},
                          {"final_L_E", result.epochs.back().extrinsic}};
  return result;
}

double retrieval_accuracy(const torch::Tensor& sim, int k, std::uint64_t seed) {
  const auto n = sim.size(0);
  if (k < 2 || n < k) throw UsageError("split-too-small: retrieval needs at least k=" + std::to_string(k) + " samples");
  auto s = sim.to(torch::kDouble).contiguous();
  auto acc = s.accessor<double, 2>();
  std::mt19937_64 rng(seed);
  std::vector<std::int64_t> others(static_cast<std::size_t>(n - 1));
  std::int64_t correct = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::iota(others.begin(), others.begin() + i, 0);
    std::iota(others.begin() + i, others.end(), i + 1);
    // Partial Fisher-Yates: the first k-1 entries are a uniform draw without replacement.
    for (int d = 0; d < k - 1; ++d) {
      std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(d), others.size() - 1);
      std::swap(others[d], others[pick(rng)]);
    }
    bool win = true;
    for (int d = 0; d < k - 1; ++d) win = win && acc[i][i] > acc[i][others[d]];
    correct += win ? 1 : 0;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

RetrievalReport retrieval_eval(DttcModel& model, const std::vector<SampleTuple>& split, int k, std::uint64_t seed,
                               int limit) {
  const auto n = limit > 0 ? std::min<std::size_t>(split.size(), static_cast<std::size_t>(limit)) : split.size();
  if (n < static_cast<std::size_t>(k)) throw DataError("split-too-small: retrieval needs at least k samples");
  torch::NoGradGuard guard;
  std::vector<double> h, f;
  std::vector<std::string> ft;
  for (std::size_t i = 0; i < n; ++i) {
    if (!split[i].future) throw DataError("retrieval needs futures in the split");
    h.insert(h.end(), split[i].history.begin(), split[i].history.end());
    f.insert(f.end(), split[i].future->begin(), split[i].future->end());
    ft.push_back(split[i].future_text);
  }
  auto opts = torch::TensorOptions().dtype(torch::kDouble);
  const auto rows = static_cast<std::int64_t>(n);
  auto [i_h, e_h] = model.encode_series(torch::tensor(h, opts).view({rows, -1}));
  auto [i_f, e_f] = model.encode_series(torch::tensor(f, opts).view({rows, -1}));
  auto et_f = model.encode_texts(ft);
  RetrievalReport r;
  r.k = k;
  r.n = static_cast<int>(n);
  r.acc_i = retrieval_accuracy(similarity_matrix(i_f, i_h), k, seed);
  r.acc_e = retrieval_accuracy(similarity_matrix(e_f, et_f), k, derive_seed(seed, 1));
  return r;
}

double independence_probe(const torch::Tensor& series, const std::vector<std::string>& texts, const Vocab& vocab,
                          const ProbeConfig& config) {
  const auto total = series.size(0);
  if (total != static_cast<std::int64_t>(texts.size())) throw UsageError("probe sets must be aligned");
  if (total < 30) throw DataError("too-few-samples: independence probe needs at least 30 pairs");
  const auto n = std::min<std::int64_t>(total, config.max_pairs);
  const auto n_train = static_cast<std::int64_t>(std::floor(config.train_fraction * static_cast<double>(n)));
  if (n_train < 2 || n - n_train < config.k) throw DataError("too-few-samples: probe split leaves no held-out set");

  auto x = series.slice(0, 0, n).to(torch::kFloat).contiguous();
  auto ids = tokenize_batch(std::vector<std::string>(texts.begin(), texts.begin() + n), vocab);

  DttcConfig mc = config.model;
  mc.vocab_size = vocab.size();
  mc.max_tokens = vocab.max_tokens();
  mc.max_len = static_cast<int>(x.size(1));
  torch::manual_seed(config.seed);
  DttcNet net(mc);
  net->train();
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(config.learning_rate));
  auto gen = make_generator(config.seed);
  const auto batch = std::min<std::int64_t>(config.batch_size, n_train);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    auto perm = torch::randperm(n_train, gen, torch::TensorOptions().dtype(torch::kInt64));
    for (std::int64_t start = 0; start + batch <= n_train; start += batch) {
      auto idx = perm.slice(0, start, start + batch);
      auto e = net->encode_series(x.index_select(0, idx)).second;
      auto et = net->encode_text(ids.index_select(0, idx));
      auto scale = net->logit_scale();
      auto loss = 0.5 * (contrastive_loss(e, et, scale) + contrastive_loss(et, e, scale));
      opt.zero_grad();
      loss.backward();
      torch::nn::utils::clip_grad_norm_(net->parameters(), 1.0);
      opt.step();
    }
  }
  net->eval();
  torch::NoGradGuard guard;
  auto e = net->encode_series(x.slice(0, n_train, n)).second;
  auto et = net->encode_text(ids.slice(0, n_train, n));
  return retrieval_accuracy(similarity_matrix(e, et), config.k, derive_seed(config.seed, 2));
}

}  // namespace whatifts
