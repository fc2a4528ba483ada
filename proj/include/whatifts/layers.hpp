#pragma once

#include <cstdint>
#include <optional>

#include <torch/torch.h>

namespace whatifts {

/// Seeded CPU generator for reproducible draws.
torch::Generator make_generator(std::uint64_t seed);

/// Multi-head self-attention over [B, N, D] tokens. An optional boolean
/// key mask [B, N] (true = attend) hides padded keys.
class SelfAttentionImpl : public torch::nn::Module {
 public:
  SelfAttentionImpl(int width, int heads);
  torch::Tensor forward(const torch::Tensor& x, const std::optional<torch::Tensor>& key_mask = std::nullopt);

  torch::nn::Linear qkv{nullptr};
  torch::nn::Linear out{nullptr};

 private:
  int width_;
  int heads_;
};
TORCH_MODULE(SelfAttention);

class FeedForwardImpl : public torch::nn::Module {
 public:
  FeedForwardImpl(int width, int hidden);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear fc1{nullptr};
  torch::nn::Linear fc2{nullptr};
};
TORCH_MODULE(FeedForward);

/// Plain pre-norm transformer encoder layer.
class EncoderLayerImpl : public torch::nn::Module {
 public:
  EncoderLayerImpl(int width, int heads);
  torch::Tensor forward(const torch::Tensor& x, const std::optional<torch::Tensor>& key_mask = std::nullopt);

  torch::nn::LayerNorm norm1{nullptr};
  SelfAttention attn{nullptr};
  torch::nn::LayerNorm norm2{nullptr};
  FeedForward ff{nullptr};
};
TORCH_MODULE(EncoderLayer);

/// Sinusoidal features of integer diffusion steps: t [B] -> [B, dim].
torch::Tensor sinusoidal_embedding(const torch::Tensor& t, int dim, torch::ScalarType dtype);

/// Splits [B, L] into [B, L/P, P] contiguous patches; throws on P ∤ L.
torch::Tensor patchify(const torch::Tensor& x, int patch_len);
/// Inverse of patchify: [B, N, P] -> [B, N*P].
torch::Tensor unpatchify(const torch::Tensor& tokens);

/// Mean over tokens whose mask is true; rows without any true entry fall back
/// to a uniform mean. x [B, N, D], mask [B, N] bool.
torch::Tensor masked_mean(const torch::Tensor& x, const torch::Tensor& mask);

}  // namespace whatifts
