#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "whatifts/layers.hpp"
#include "whatifts/textproc.hpp"

namespace whatifts {

struct EstimatorConfig {
  int patch_len = 8;
  int width = 64;
  int depth = 4;
  int heads = 4;
  int text_layers = 2;
  int max_tokens = kDefaultMaxTokens;  // W
  std::int64_t vocab_size = 2;
  int max_len = 256;  // longest admissible input (L_h + L_f)
  int diffusion_steps = 1000;  // T; valid t lie in [0, T]

  void validate() const;
  nlohmann::json to_json() const;
  static EstimatorConfig from_json(const nlohmann::json& j);
};

/// Transformer block whose pre-norm activations are shifted and scaled, and
/// whose residual branches are gated, by a conditioning MLP of e_c.
class ConditionedBlockImpl : public torch::nn::Module {
 public:
  ConditionedBlockImpl(int width, int heads);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& cond);

  torch::nn::LayerNorm norm1{nullptr};
  SelfAttention attn{nullptr};
  torch::nn::LayerNorm norm2{nullptr};
  FeedForward ff{nullptr};
  torch::nn::Linear modulation{nullptr};  // e_c -> 6 x width, zero-initialised
};
TORCH_MODULE(ConditionedBlock);

/// Conditional noise estimator eps(x_t, c, t). Length preserving: the output
/// has the same length as the input, whatever span mix the caller passes.
class NoiseEstimatorImpl : public torch::nn::Module {
 public:
  explicit NoiseEstimatorImpl(const EstimatorConfig& cfg);

  /// x [B, L], ids [B, W] int64, t [B] int64 -> [B, L]
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& ids, const torch::Tensor& t);
  /// Same as forward with the text embedding precomputed ([B, D]).
  torch::Tensor forward_embedded(const torch::Tensor& x, const torch::Tensor& text_embedding, const torch::Tensor& t);

  torch::Tensor embed_text(const torch::Tensor& ids) { return text_encoder(ids); }
  torch::Tensor embed_time(const torch::Tensor& t);

  const EstimatorConfig& config() const { return cfg_; }

  /// Zeroes the prediction head so the estimator outputs exactly 0.
  void zero_head();

  torch::nn::Linear patch_embed{nullptr};
  torch::Tensor position_embedding;
  torch::nn::Sequential time_mlp{nullptr};
  TextEncoder text_encoder{nullptr};
  std::vector<ConditionedBlock> blocks;
  torch::nn::LayerNorm final_norm{nullptr};
  torch::nn::Linear final_modulation{nullptr};
  torch::nn::Linear head{nullptr};

 private:
  EstimatorConfig cfg_;
};
TORCH_MODULE(NoiseEstimator);

/// Convenience wrapper: single-sequence call with a scalar step.
torch::Tensor estimate_noise(NoiseEstimator& model, const torch::Tensor& x, const std::vector<std::int64_t>& ids,
                             int t);

}  // namespace whatifts
