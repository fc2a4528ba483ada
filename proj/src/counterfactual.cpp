#include "whatifts/counterfactual.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <unordered_map>
#include <unordered_set>

#include "whatifts/checkpoint.hpp"
#include "whatifts/common.hpp"
#include "whatifts/inference.hpp"
#include "whatifts/layers.hpp"

namespace whatifts {

using nlohmann::json;
namespace fs = std::filesystem;

void CfConfig::validate() const {
  if (M < 2) throw UsageError("config-invalid: M must be >= 2");
  if (lambda_I < 0 || lambda_E < 0 || lambda_I + lambda_E <= 0)
    throw UsageError("config-invalid: lambda_I and lambda_E must be >= 0 and not both 0");
  if (epochs < 1 || batch_size < 1) throw UsageError("config-invalid: epochs and batch_size must be >= 1");
  if (mix_factual < 0 || mix_counterfactual < 0 || mix_factual + mix_counterfactual == 0)
    throw UsageError("config-invalid: mix ratio must be non-negative and not 0:0");
  if (!(learning_rate > 0)) throw UsageError("config-invalid: learning_rate must be > 0");
}

json CfConfig::to_json() const {
  return {{"M", M},
          {"lambda_I", lambda_I},
          {"lambda_E", lambda_E},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"mix", {mix_factual, mix_counterfactual}},
          {"learning_rate", learning_rate},
          {"lambda_F", lambda_forecast},
          {"lambda_A", lambda_attribution},
          {"grad_clip", grad_clip},
          {"seed", seed},
          {"max_train_samples", max_train_samples}};
}

CfConfig CfConfig::from_json(const json& j) {
  CfConfig c;
  c.M = j.value("M", c.M);
  c.lambda_I = j.value("lambda_I", c.lambda_I);
  c.lambda_E = j.value("lambda_E", c.lambda_E);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("mix")) {
    const auto& m = j.at("mix");
    if (!m.is_array() || m.size() != 2) throw UsageError("config-invalid: mix must be [factual, counterfactual]");
    c.mix_factual = m[0].get<int>();
    c.mix_counterfactual = m[1].get<int>();
  }
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lambda_forecast = j.value("lambda_F", c.lambda_forecast);
  c.lambda_attribution = j.value("lambda_A", c.lambda_attribution);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
  c.max_train_samples = j.value("max_train_samples", c.max_train_samples);
  c.verbose = j.value("verbose", c.verbose);
  return c;
}

json CandidateRecord::to_json() const {
  return {{"sample_id", sample_id},
          {"split", split},
          {"history_text", history_text},
          {"candidates", candidates},
          {"similarities", similarities},
          {"selected", selected}};
}

int select_candidate(const std::vector<double>& similarities) {
  if (similarities.empty()) throw UsageError("no candidates to select from");
  int best = 0;
  for (int i = 1; i < static_cast<int>(similarities.size()); ++i)
    if (similarities[i] > similarities[best]) best = i;
  return best;
}

double condition_similarity(DttcModel& dttc, const std::string& a, const std::string& b) {
  torch::NoGradGuard guard;
  auto ea = dttc.encode_condition(a);
  auto eb = dttc.encode_condition(b);
  return (ea * eb).sum().item<double>();
}

namespace {

// Per-text embedding cache; each text is encoded on its own so values match
// a fresh single-text encode exactly.
class EmbeddingCache {
 public:
  explicit EmbeddingCache(DttcModel& dttc) : dttc_(dttc) {}
  const torch::Tensor& get(const std::string& text) {
    auto it = cache_.find(text);
    if (it == cache_.end()) it = cache_.emplace(text, dttc_.encode_condition(text)).first;
    return it->second;
  }

 private:
  DttcModel& dttc_;
  std::unordered_map<std::string, torch::Tensor> cache_;
};

}  // namespace

CfOutput construct_counterfactual(const Dataset& dataset, DttcModel& dttc, int M, std::uint64_t seed) {
  if (M < 2) throw UsageError("config-invalid: M must be >= 2");
  if (dataset.kind == DatasetKind::Counterfactual) throw DataError("construct_counterfactual needs a factual dataset");
  torch::NoGradGuard guard;
  CfOutput out;
  out.dataset.name = dataset.name + "-cf";
  out.dataset.history_len = dataset.history_len;
  out.dataset.future_len = dataset.future_len;
  out.dataset.kind = DatasetKind::Counterfactual;
  out.dataset.normalizer = dataset.normalizer.value_or(fit_normalizer(dataset, "train"));
  EmbeddingCache cache(dttc);

  for (std::size_t s = 0; s < kSplitNames.size(); ++s) {
    const std::string split = kSplitNames[s];
    const auto& records = dataset.split(split);
    auto& dest = out.dataset.splits[split];
    if (records.empty()) continue;
    std::unordered_map<std::string, std::size_t> text_count;
    for (const auto& r : records) ++text_count[r.future_text];
    std::mt19937_64 rng(derive_seed(seed, s));
    std::uniform_int_distribution<std::size_t> pick(0, records.size() - 1);

    for (const auto& r : records) {
      const auto eligible = records.size() - text_count[r.future_text];
      if (eligible < static_cast<std::size_t>(M))
        throw DataError("pool-too-small: split '" + split + "' offers " + std::to_string(eligible) +
                        " candidate conditions for sample '" + r.sample_id + "', need M=" + std::to_string(M));
      std::unordered_set<std::size_t> chosen;
      CandidateRecord rec;
      rec.sample_id = r.sample_id;
      rec.split = split;
      rec.history_text = r.history_text;
      const auto& eh = cache.get(r.history_text);
      while (static_cast<int>(rec.candidates.size()) < M) {
        const auto j = pick(rng);
        if (chosen.count(j) || records[j].future_text == r.future_text) continue;
        chosen.insert(j);
        rec.candidates.push_back(records[j].future_text);
        rec.similarities.push_back((eh * cache.get(records[j].future_text)).sum().item<double>());
      }
      rec.selected = select_candidate(rec.similarities);

      SampleTuple cf;
      cf.sample_id = r.sample_id;
      cf.channel_id = r.channel_id;
      cf.history = r.history;
      cf.history_text = r.history_text;
      cf.future_text = rec.candidates[rec.selected];
      dest.push_back(std::move(cf));
      out.provenance.push_back(std::move(rec));
    }
  }
  out.dataset.validate();
  return out;
}

double recheck_selection(DttcModel& dttc, const std::vector<CandidateRecord>& provenance) {
  if (provenance.empty()) return 0.0;
  std::size_t agree = 0;
  for (const auto& rec : provenance) {
    std::vector<double> sims;
    sims.reserve(rec.candidates.size());
    for (const auto& c : rec.candidates) sims.push_back(condition_similarity(dttc, rec.history_text, c));
    const int best = select_candidate(sims);
    if (best == rec.selected && sims == rec.similarities) ++agree;
  }
  return static_cast<double>(agree) / static_cast<double>(provenance.size());
}

void write_provenance(const fs::path& file, const std::vector<CandidateRecord>& provenance) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  for (const auto& rec : provenance) out << rec.to_json().dump() << "\n";
}

torch::Tensor dttc_finetune_loss(ForecastModel& model, DttcModel& dttc, const torch::Tensor& history,
                                 const torch::Tensor& cf_ids, const torch::Tensor& dttc_cf_ids, int t,
                                 double lambda_I, double lambda_E, torch::Generator& gen) {
  if (!dttc.net) throw UsageError("missing DTTC evaluator");
  const auto& sched = model.schedule;
  if (!sched.on_grid(t) || t == 0) throw UsageError("grid-violation: t=" + std::to_string(t) + " is not a positive grid step");
  if (history.dim() != 2 || history.size(1) != model.history_len || cf_ids.size(0) != history.size(0) ||
      dttc_cf_ids.size(0) != history.size(0))
    throw UsageError("shape-mismatch: history [B, L_h] and condition ids must align");
  const auto b = history.size(0);
  const auto lh = model.history_len;
  const auto lf = model.future_len;

  torch::Tensor state;
  torch::Tensor text;
  {
    torch::NoGradGuard guard;
    auto init = torch::randn({b, lf}, gen, history.options());
    text = model.net->embed_text(cf_ids);
    // Descend from the top of the grid to t.
    NoiseSchedule partial = sched;
    const auto pos = std::find(sched.grid.begin(), sched.grid.end(), t) - sched.grid.begin();
    partial.grid.erase(partial.grid.begin(), partial.grid.begin() + pos);
    state = denoise_anchored(model.net, partial, history, init, text);
  }
  // The tracked call re-embeds the condition so gradients reach the text encoder too.
  auto tracked_text = model.net->embed_text(cf_ids);
  auto t_vec = torch::full({b}, t, torch::TensorOptions().dtype(torch::kInt64));
  auto eps = model.net->forward_embedded(state, tracked_text, t_vec);
  auto x0 = x0_estimate(state, eps, t, sched);
  auto forecast = x0.slice(1, lh, lh + lf);

  const auto& norm = model.normalizer;
  auto raw_forecast = (forecast * norm.std + norm.mean).to(dttc.dtype());
  auto [i_f, e_f] = dttc.encode_series(raw_forecast);
  torch::Tensor i_h, e_text;
  {
    torch::NoGradGuard guard;
    i_h = dttc.encode_series((history * norm.std + norm.mean).to(dttc.dtype())).first;
    e_text = dttc.net->encode_text(dttc_cf_ids);
  }
  auto score = lambda_I * (i_h * i_f).sum(1) + lambda_E * (e_f * e_text).sum(1);
  return -score.mean().to(history.scalar_type());
}

void write_finetune_log(std::ostream& out, const FinetuneLog& log) {
  json j{{"epoch", log.epoch}};
  j["L_fact"] = log.fact_loss ? json(*log.fact_loss) : json(nullptr);
  j["L_dttc"] = log.dttc_loss ? json(*log.dttc_loss) : json(nullptr);
  out << j.dump() << "\n";
}

FinetuneResult finetune(const CfConfig& config, const Dataset& factual, const Dataset& counterfactual,
                        const fs::path& parent, DttcModel& dttc, const fs::path& out) {
  config.validate();
  if (factual.kind == DatasetKind::Counterfactual) throw DataError("incompatible datasets: first dataset must be factual");
  if (counterfactual.kind != DatasetKind::Counterfactual)
    throw DataError("incompatible datasets: second dataset must be counterfactual");
  if (factual.history_len != counterfactual.history_len || factual.future_len != counterfactual.future_len)
    throw DataError("incompatible datasets: window lengths differ");
  if (factual.normalizer && counterfactual.normalizer &&
      (factual.normalizer->mean != counterfactual.normalizer->mean ||
       factual.normalizer->std != counterfactual.normalizer->std))
    throw DataError("incompatible datasets: normalizers differ");

  ForecastModel model = ForecastModel::load(parent);
  if (model.history_len != factual.history_len || model.future_len != factual.future_len)
    throw DataError("incompatible datasets: checkpoint window lengths differ from the data");
  const std::string parent_id = file_sha256(parent);
  const auto dtype = model.dtype();

  const SplitTensors fact = split_tensors(factual.split("train"), model.normalizer, model.vocab, dtype, config.max_train_samples);
  const SplitTensors cf = split_tensors(counterfactual.split("train"), model.normalizer, model.vocab, dtype,
                                        config.max_train_samples);
  std::vector<std::string> cf_texts;
  for (std::size_t i = 0; i < cf.sample_ids.size(); ++i) cf_texts.push_back(counterfactual.split("train")[i].future_text);
  const torch::Tensor cf_dttc_ids = cf_texts.empty() ? torch::Tensor() : tokenize_batch(cf_texts, dttc.vocab);

  const bool use_fact = config.mix_factual > 0;
  const bool use_cf = config.mix_counterfactual > 0;
  const std::int64_t n_fact = use_fact && fact.history.defined() ? fact.history.size(0) : 0;
  const std::int64_t n_cf = use_cf && cf.history.defined() ? cf.history.size(0) : 0;
  if (use_fact && n_fact < config.batch_size) throw DataError("dataset-too-small: factual train split smaller than a batch");
  if (use_cf && n_cf < config.batch_size) throw DataError("dataset-too-small: counterfactual train split smaller than a batch");

  // The evaluator stays frozen: no gradients accumulate into it.
  std::vector<bool> dttc_flags;
  for (auto& p : dttc.net->parameters()) {
    dttc_flags.push_back(p.requires_grad());
    p.set_requires_grad(false);
  }
  dttc.net->eval();

  torch::manual_seed(config.seed);
  model.net->train();
  torch::optim::Adam opt(model.net->parameters(), torch::optim::AdamOptions(config.learning_rate));
  auto gen = make_generator(config.seed);
  std::mt19937_64 step_rng(derive_seed(config.seed, 0xcf));
  std::uniform_int_distribution<std::size_t> grid_pick(1, model.schedule.grid.size() - 1);
  const auto i64 = torch::TensorOptions().dtype(torch::kInt64);

  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const fs::path log_path = (out.has_parent_path() ? out.parent_path() : fs::path(".")) / "finetune.log.jsonl";
  std::ofstream log(log_path);

  FinetuneResult result;
  result.checkpoint = out;
  const std::int64_t bs = config.batch_size;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    torch::Tensor perm_f = n_fact ? torch::randperm(n_fact, gen, i64) : torch::Tensor();
    torch::Tensor perm_c = n_cf ? torch::randperm(n_cf, gen, i64) : torch::Tensor();
    const std::int64_t batches_f = n_fact / bs;
    const std::int64_t batches_c = n_cf / bs;
    std::int64_t next_f = 0, next_c = 0;
    double sum_fact = 0, sum_dttc = 0;
    int count_fact = 0, count_dttc = 0;

    auto step = [&](const torch::Tensor& loss) {
      opt.zero_grad();
      loss.backward();
      if (config.grad_clip > 0) torch::nn::utils::clip_grad_norm_(model.net->parameters(), config.grad_clip);
      opt.step();
    };
    // An epoch is one pass over the primary stream (factual when present);
    // the other stream wraps around as needed to honour the ratio.
    const bool primary_fact = use_fact;
    while (primary_fact ? next_f < batches_f : next_c < batches_c) {
      for (int k = 0; k < config.mix_factual && use_fact; ++k) {
        if (primary_fact && next_f >= batches_f) break;
        const auto slot = next_f++ % batches_f;
        auto idx = perm_f.slice(0, slot * bs, slot * bs + bs);
        auto loss = joint_loss(model, fact, idx, config.lambda_forecast, config.lambda_attribution, gen);
        step(loss.total);
        sum_fact += loss.total.item<double>();
        ++count_fact;
      }
      for (int k = 0; k < config.mix_counterfactual && use_cf; ++k) {
        if (!primary_fact && next_c >= batches_c) break;
        const auto slot = next_c++ % batches_c;
        auto idx = perm_c.slice(0, slot * bs, slot * bs + bs);
        const int t = model.schedule.grid[grid_pick(step_rng)];
        auto loss = dttc_finetune_loss(model, dttc, cf.history.index_select(0, idx), cf.future_ids.index_select(0, idx),
                                       cf_dttc_ids.index_select(0, idx), t, config.lambda_I, config.lambda_E, gen);
        step(loss);
        sum_dttc += loss.item<double>();
        ++count_dttc;
      }
    }
    FinetuneLog entry;
    entry.epoch = epoch;
    if (count_fact) entry.fact_loss = sum_fact / count_fact;
    if (count_dttc) entry.dttc_loss = sum_dttc / count_dttc;
    write_finetune_log(log, entry);
    log.flush();
    if (config.verbose)
      std::fprintf(stderr, "finetune epoch %d  L_fact %.4f  L_dttc %.4f\n", epoch, entry.fact_loss.value_or(NAN),
                   entry.dttc_loss.value_or(NAN));
    result.epochs.push_back(entry);
  }

  std::size_t i = 0;
  for (auto& p : dttc.net->parameters()) p.set_requires_grad(dttc_flags[i++]);

  model.net->eval();
  model.parent_id = parent_id;
  model.training_state = {{"finetune", config.to_json()},
                          {"parent", parent_id},
                          {"counterfactual_dataset", counterfactual.name},
                          {"epochs", config.epochs}};
  model.save(out);
  return result;
}

}  // namespace whatifts
