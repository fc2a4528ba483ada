#include "whatifts/noise_estimator.hpp"

#include "whatifts/common.hpp"

namespace whatifts {

namespace nn = torch::nn;

void EstimatorConfig::validate() const {
  if (patch_len <= 0 || width <= 0 || depth <= 0 || heads <= 0 || text_layers < 0 || max_tokens <= 0)
    throw UsageError("config-invalid: estimator sizes must be positive");
  if (width % heads != 0) throw UsageError("config-invalid: width must be divisible by heads");
  if (max_len % patch_len != 0) throw UsageError("config-invalid: max_len must be a multiple of patch_len");
  if (vocab_size < 2) throw UsageError("config-invalid: vocab must contain PAD and UNK");
  if (diffusion_steps < 1) throw UsageError("config-invalid: diffusion_steps must be >= 1");
}

nlohmann::json EstimatorConfig::to_json() const {
  return {{"patch_len", patch_len}, {"width", width},          {"depth", depth},
          {"heads", heads},         {"text_layers", text_layers}, {"max_tokens", max_tokens},
          {"vocab_size", vocab_size}, {"max_len", max_len},    {"diffusion_steps", diffusion_steps}};
}

EstimatorConfig EstimatorConfig::from_json(const nlohmann::json& j) {
  EstimatorConfig c;
  c.patch_len = j.value("patch_len", c.patch_len);
  c.width = j.value("width", c.width);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.text_layers = j.value("text_layers", c.text_layers);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_len = j.value("max_len", c.max_len);
  c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
  return c;
}

ConditionedBlockImpl::ConditionedBlockImpl(int width, int heads) {
  norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({width}).elementwise_affine(false)));
  attn = register_module("attn", SelfAttention(width, heads));
  norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({width}).elementwise_affine(false)));
  ff = register_module("ff", FeedForward(width, 4 * width));
  modulation = register_module("modulation", nn::Linear(width, 6 * width));
  nn::init::zeros_(modulation->weight);
  nn::init::zeros_(modulation->bias);
}

torch::Tensor ConditionedBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& cond) {
  // [B, 6D] -> six [B, 1, D] chunks
  auto mod = modulation(torch::silu(cond)).unsqueeze(1).chunk(6, -1);
  const auto& shift1 = mod[0];
  const auto& scale1 = mod[1];
  const auto& gate1 = mod[2];
  const auto& shift2 = mod[3];
  const auto& scale2 = mod[4];
  const auto& gate2 = mod[5];
  auto h = x + gate1 * attn(norm1(x) * (1 + scale1) + shift1);
  return h + gate2 * ff(norm2(h) * (1 + scale2) + shift2);
}

NoiseEstimatorImpl::NoiseEstimatorImpl(const EstimatorConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  const int d = cfg.width;
  patch_embed = register_module("patch_embed", nn::Linear(cfg.patch_len, d));
  position_embedding =
      register_parameter("position_embedding", torch::randn({cfg.max_len / cfg.patch_len, d}) * 0.02);
  time_mlp = register_module("time_mlp", nn::Sequential(nn::Linear(d, d), nn::SiLU(), nn::Linear(d, d)));
  TextEncoderConfig tc;
  tc.vocab_size = cfg.vocab_size;
  tc.max_tokens = cfg.max_tokens;
  tc.width = d;
  tc.out_dim = d;
  tc.heads = cfg.heads;
  tc.layers = cfg.text_layers;
  text_encoder = register_module("text_encoder", TextEncoder(tc));
  for (int i = 0; i < cfg.depth; ++i)
    blocks.push_back(register_module("block" + std::to_string(i), ConditionedBlock(d, cfg.heads)));
  final_norm = register_module("final_norm", nn::LayerNorm(nn::LayerNormOptions({d}).elementwise_affine(false)));
  final_modulation = register_module("final_modulation", nn::Linear(d, 2 * d));
  nn::init::zeros_(final_modulation->weight);
  nn::init::zeros_(final_modulation->bias);
  head = register_module("head", nn::Linear(d, cfg.patch_len));
}

torch::Tensor NoiseEstimatorImpl::embed_time(const torch::Tensor& t) {
  return time_mlp->forward(sinusoidal_embedding(t, cfg_.width, patch_embed->weight.scalar_type()));
}

torch::Tensor NoiseEstimatorImpl::forward(const torch::Tensor& x, const torch::Tensor& ids, const torch::Tensor& t) {
  return forward_embedded(x, text_encoder(ids), t);
}

torch::Tensor NoiseEstimatorImpl::forward_embedded(const torch::Tensor& x, const torch::Tensor& text_embedding,
                                                   const torch::Tensor& t) {
  if (x.dim() != 2) throw UsageError("estimator expects [B, L] input");
  if (x.size(1) > cfg_.max_len)
    throw UsageError("input length " + std::to_string(x.size(1)) + " exceeds max_len " + std::to_string(cfg_.max_len));
  if (t.numel() > 0 && (t.min().item<std::int64_t>() < 0 || t.max().item<std::int64_t>() > cfg_.diffusion_steps))
    throw UsageError("t-out-of-range: steps must lie in [0, " + std::to_string(cfg_.diffusion_steps) + "]");
  auto tokens = patchify(x, cfg_.patch_len);  // [B, N, P]
  const auto n = tokens.size(1);
  auto h = patch_embed(tokens) + position_embedding.slice(0, 0, n).unsqueeze(0);
  auto cond = embed_time(t) + text_embedding;
  for (auto& block : blocks) h = block(h, cond);
  auto mod = final_modulation(torch::silu(cond)).unsqueeze(1).chunk(2, -1);
  h = final_norm(h) * (1 + mod[1]) + mod[0];
  return unpatchify(head(h));
}

void NoiseEstimatorImpl::zero_head() {
  torch::NoGradGuard guard;
  head->weight.zero_();
  head->bias.zero_();
}

torch::Tensor estimate_noise(NoiseEstimator& model, const torch::Tensor& x, const std::vector<std::int64_t>& ids,
                             int t) {
  auto opts = torch::TensorOptions().dtype(torch::kInt64);
  auto id_tensor = torch::tensor(ids, opts).unsqueeze(0);
  auto t_tensor = torch::full({1}, t, opts);
  return model->forward(x.reshape({1, -1}), id_tensor, t_tensor).reshape(x.sizes());
}

}  // namespace whatifts
