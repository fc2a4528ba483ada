#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "whatifts/layers.hpp"

namespace whatifts {

inline constexpr std::int64_t kPadId = 0;
inline constexpr std::int64_t kUnkId = 1;
inline constexpr int kDefaultMaxTokens = 64;

/// Word-level vocabulary. Ids are dense: PAD=0, UNK=1, then corpus tokens by
/// descending frequency with lexicographic tie-break.
class Vocab {
 public:
  Vocab() = default;

  std::int64_t id(const std::string& token) const;
  const std::string& token(std::int64_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }
  int max_tokens() const { return max_tokens_; }
  void set_max_tokens(int w) { max_tokens_ = w; }

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j, int max_tokens);

  friend Vocab build_vocab(const std::vector<std::string>& corpus, int min_freq, int max_tokens);
  bool operator==(const Vocab&) const = default;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int64_t> index_;
  int max_tokens_ = kDefaultMaxTokens;
};

/// Lowercases and splits on whitespace; sentence punctuation becomes its own
/// token while '-', '_' and '\'' stay inside words.
std::vector<std::string> split_tokens(const std::string& text);

Vocab build_vocab(const std::vector<std::string>& corpus, int min_freq = 1, int max_tokens = kDefaultMaxTokens);

/// Fixed-width id sequence: unknown tokens map to UNK, padded/truncated to W.
std::vector<std::int64_t> tokenize(const std::string& text, const Vocab& vocab);

/// [B, W] int64 tensor of token ids.
torch::Tensor tokenize_batch(const std::vector<std::string>& texts, const Vocab& vocab);

struct TextEncoderConfig {
  std::int64_t vocab_size = 2;
  int max_tokens = kDefaultMaxTokens;
  int width = 64;
  int out_dim = 64;
  int heads = 4;
  int layers = 2;
};

/// Token + learned position embeddings, pre-norm transformer layers with PAD
/// keys masked, masked mean pooling and a linear projection.
class TextEncoderImpl : public torch::nn::Module {
 public:
  explicit TextEncoderImpl(const TextEncoderConfig& cfg);

  /// ids: [B, W] int64 -> [B, out_dim]
  torch::Tensor forward(const torch::Tensor& ids);

  const TextEncoderConfig& config() const { return cfg_; }

  torch::nn::Embedding token_embedding{nullptr};
  torch::Tensor position_embedding;
  std::vector<EncoderLayer> layers;
  torch::nn::LayerNorm final_norm{nullptr};
  torch::nn::Linear projection{nullptr};

 private:
  TextEncoderConfig cfg_;
};
TORCH_MODULE(TextEncoder);

}  // namespace whatifts
