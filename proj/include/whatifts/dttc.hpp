#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "whatifts/data_model.hpp"
#include "whatifts/layers.hpp"
#include "whatifts/textproc.hpp"

namespace whatifts {

struct DttcConfig {
  int patch_len = 8;
  int width = 64;
  int embed_dim = 64;  // D_e
  int layers = 2;
  int heads = 4;
  int text_layers = 2;
  int max_tokens = kDefaultMaxTokens;
  std::int64_t vocab_size = 2;
  int max_len = 128;
  double temperature = 0.07;  // initial; learned as a log scale

  void validate() const;
  nlohmann::json to_json() const;
  static DttcConfig from_json(const nlohmann::json& j);
};

/// Dual encoder: a patch transformer over series with intrinsic and
/// extrinsic projection heads sharing one backbone, plus a text encoder into
/// the extrinsic space.
class DttcNetImpl : public torch::nn::Module {
 public:
  explicit DttcNetImpl(const DttcConfig& cfg);

  /// x [B, L] (normalized) -> (I [B, D_e], E [B, D_e])
  std::pair<torch::Tensor, torch::Tensor> encode_series(const torch::Tensor& x);
  /// ids [B, W] -> Ẽ [B, D_e]
  torch::Tensor encode_text(const torch::Tensor& ids) { return text_encoder(ids); }
  torch::Tensor logit_scale() const;

  void zero_heads();
  const DttcConfig& config() const { return cfg_; }

  torch::nn::Linear patch_embed{nullptr};
  torch::Tensor position_embedding;
  std::vector<EncoderLayer> layers;
  torch::nn::LayerNorm final_norm{nullptr};
  torch::nn::Linear intrinsic_head{nullptr};
  torch::nn::Linear extrinsic_head{nullptr};
  TextEncoder text_encoder{nullptr};
  torch::Tensor log_scale;

 private:
  DttcConfig cfg_;
};
TORCH_MODULE(DttcNet);

/// DTTC evaluator bundle. Series are passed in data units and normalized
/// internally with the evaluator's own normalizer.
struct DttcModel {
  DttcConfig config;
  Vocab vocab;
  Normalizer normalizer;
  std::string dataset_name;
  nlohmann::json training_state = nlohmann::json::object();
  DttcNet net{nullptr};

  static DttcModel create(const DttcConfig& config, Vocab vocab, Normalizer normalizer);
  void save(const std::filesystem::path& file) const;
  static DttcModel load(const std::filesystem::path& file);

  torch::ScalarType dtype() const { return net->patch_embed->weight.scalar_type(); }
  /// Differentiable in `raw` ([B, L], data units).
  std::pair<torch::Tensor, torch::Tensor> encode_series(const torch::Tensor& raw);
  torch::Tensor encode_texts(const std::vector<std::string>& texts);
  torch::Tensor encode_condition(const std::string& text);
};

/// In-batch cross-entropy of rows of `queries` against rows of `keys`, with
/// the diagonal as targets: mean_i -log softmax_j(scale * <q_i, k_j>)[i].
torch::Tensor contrastive_loss(const torch::Tensor& queries, const torch::Tensor& keys, const torch::Tensor& scale);

/// Pairwise inner products [B, B] with entry (i, j) = <a_i, b_j>.
torch::Tensor similarity_matrix(const torch::Tensor& a, const torch::Tensor& b);

struct DttcLosses {
  torch::Tensor intrinsic;
  torch::Tensor extrinsic;
  torch::Tensor total;
};

/// Intrinsic loss over (I_h, I_f) plus the mean of history and future
/// extrinsic losses; all similarities scaled by the learned temperature.
DttcLosses dttc_losses(DttcNet& net, const torch::Tensor& history, const torch::Tensor& future,
                       const torch::Tensor& history_ids, const torch::Tensor& future_ids);

struct DttcScores {
  double intrinsic = 0.0;  // DTTC-I
  double extrinsic = 0.0;  // DTTC-E
};

/// Raw inner products averaged over aligned rows; no temperature.
DttcScores dttc_scores(const torch::Tensor& i_forecast, const torch::Tensor& i_history,
                       const torch::Tensor& e_forecast, const torch::Tensor& e_text);
/// Model-level scores on data-unit forecasts and histories.
DttcScores dttc_scores(DttcModel& model, const torch::Tensor& forecasts, const torch::Tensor& histories,
                       const std::vector<std::string>& future_texts);

struct DttcTrainConfig {
  int epochs = 40;
  int batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  int max_train_samples = 0;
  int eval_every = 0;  // retrieval check on val every N epochs (0 = off)
  DttcConfig model;
  bool verbose = false;

  nlohmann::json to_json() const;
  static DttcTrainConfig from_json(const nlohmann::json& j);
};

struct DttcEpochLog {
  int epoch = 0;
  double intrinsic = 0.0;
  double extrinsic = 0.0;
  double val_acc_i = -1.0;
  double val_acc_e = -1.0;
};

struct DttcTrainResult {
  DttcModel model;
  std::vector<DttcEpochLog> epochs;
};

DttcTrainResult contrastive_train(const DttcTrainConfig& config, const Dataset& dataset,
                                  const std::optional<Vocab>& vocab = std::nullopt);

/// Fraction (in %) of queries whose own key scores strictly above every one
/// of k-1 distractors drawn without replacement; sim(i, j) is query i vs key j.
double retrieval_accuracy(const torch::Tensor& sim, int k, std::uint64_t seed);

struct RetrievalReport {
  double acc_i = 0.0;
  double acc_e = 0.0;
  int k = 3;
  int n = 0;
  nlohmann::json to_json() const { return {{"acc_I", acc_i}, {"acc_E", acc_e}, {"k", k}, {"n", n}}; }
};

RetrievalReport retrieval_eval(DttcModel& model, const std::vector<SampleTuple>& split, int k = 3,
                               std::uint64_t seed = 0, int limit = 0);

struct ProbeConfig {
  int k = 3;
  int epochs = 50;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double train_fraction = 0.8;
  int max_pairs = 2000;
  std::uint64_t seed = 0;
  DttcConfig model;
};

/// Trains a fresh series/text aligner on a train portion of the pairs and
/// reports k-way text retrieval accuracy (%) on the held-out portion.
double independence_probe(const torch::Tensor& series, const std::vector<std::string>& texts, const Vocab& vocab,
                          const ProbeConfig& config);

}  // namespace whatifts
