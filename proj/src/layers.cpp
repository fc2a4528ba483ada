#include "whatifts/layers.hpp"

#include <cmath>

#include <ATen/CPUGeneratorImpl.h>

#include "whatifts/common.hpp"

namespace whatifts {

namespace nn = torch::nn;

torch::Generator make_generator(std::uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

SelfAttentionImpl::SelfAttentionImpl(int width, int heads) : width_(width), heads_(heads) {
  if (heads <= 0 || width % heads != 0)
    throw UsageError("attention width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
  qkv = register_module("qkv", nn::Linear(width, 3 * width));
  out = register_module("out", nn::Linear(width, width));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x, const std::optional<torch::Tensor>& key_mask) {
  const auto b = x.size(0);
  const auto n = x.size(1);
  const int head_dim = width_ / heads_;
  // [B, N, 3, H, Dh] -> 3 x [B, H, N, Dh]
  auto parts = qkv(x).view({b, n, 3, heads_, head_dim}).permute({2, 0, 3, 1, 4});
  auto q = parts[0], k = parts[1], v = parts[2];
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
  if (key_mask) {
    auto hidden = key_mask->logical_not().view({b, 1, 1, n});
    scores = scores.masked_fill(hidden, -std::numeric_limits<double>::infinity());
  }
  auto attn = torch::softmax(scores, -1);
  auto y = torch::matmul(attn, v).permute({0, 2, 1, 3}).reshape({b, n, width_});
  return out(y);
}

FeedForwardImpl::FeedForwardImpl(int width, int hidden) {
  fc1 = register_module("fc1", nn::Linear(width, hidden));
  fc2 = register_module("fc2", nn::Linear(hidden, width));
}

torch::Tensor FeedForwardImpl::forward(const torch::Tensor& x) { return fc2(torch::gelu(fc1(x), "tanh")); }

EncoderLayerImpl::EncoderLayerImpl(int width, int heads) {
  norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({width})));
  attn = register_module("attn", SelfAttention(width, heads));
  norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({width})));
  ff = register_module("ff", FeedForward(width, 4 * width));
}

torch::Tensor EncoderLayerImpl::forward(const torch::Tensor& x, const std::optional<torch::Tensor>& key_mask) {
  auto h = x + attn(norm1(x), key_mask);
  return h + ff(norm2(h));
}

torch::Tensor sinusoidal_embedding(const torch::Tensor& t, int dim, torch::ScalarType dtype) {
  const int half = dim / 2;
  auto opts = torch::TensorOptions().dtype(dtype);
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, opts) / static_cast<double>(half));
  auto args = t.to(dtype).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
  if (dim % 2 == 1) emb = torch::cat({emb, torch::zeros({t.size(0), 1}, opts)}, 1);
  return emb;
}

torch::Tensor patchify(const torch::Tensor& x, int patch_len) {
  const auto len = x.size(-1);
  if (patch_len <= 0 || len % patch_len != 0)
    throw UsageError("indivisible-length: length " + std::to_string(len) + " is not a multiple of patch length " +
                     std::to_string(patch_len));
  return x.reshape({x.size(0), len / patch_len, patch_len});
}

torch::Tensor unpatchify(const torch::Tensor& tokens) {
  return tokens.reshape({tokens.size(0), tokens.size(1) * tokens.size(2)});
}

torch::Tensor masked_mean(const torch::Tensor& x, const torch::Tensor& mask) {
  auto any = mask.any(1, /*keepdim=*/true);
  auto effective = torch::where(any, mask, torch::ones_like(mask)).to(x.scalar_type()).unsqueeze(-1);
  return (x * effective).sum(1) / effective.sum(1);
}

}  // namespace whatifts
