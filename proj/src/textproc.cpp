#include "whatifts/textproc.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "whatifts/common.hpp"

namespace whatifts {

namespace nn = torch::nn;

namespace {

const std::string kPadToken = "<pad>";
const std::string kUnkToken = "<unk>";

bool is_split_punct(unsigned char c) { return c < 0x80 && std::ispunct(c) && c != '-' && c != '_' && c != '\''; }

}  // namespace

std::int64_t Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

nlohmann::json Vocab::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < tokens_.size(); ++i) j[tokens_[i]] = static_cast<std::int64_t>(i);
  return j;
}

Vocab Vocab::from_json(const nlohmann::json& j, int max_tokens) {
  Vocab v;
  v.max_tokens_ = max_tokens;
  v.tokens_.assign(j.size(), std::string());
  for (const auto& [token, value] : j.items()) {
    const auto id = value.get<std::int64_t>();
    if (id < 0 || id >= static_cast<std::int64_t>(j.size()) || !v.tokens_[id].empty())
      throw DataError("schema-violation: vocab ids must be dense and unique");
    v.tokens_[id] = token;
    v.index_[token] = id;
  }
  if (v.tokens_.size() < 2 || v.tokens_[kPadId] != kPadToken || v.tokens_[kUnkId] != kUnkToken)
    throw DataError("schema-violation: vocab must reserve <pad>=0 and <unk>=1");
  return v;
}

std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (is_split_punct(c)) {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
    }
  }
  flush();
  return out;
}

Vocab build_vocab(const std::vector<std::string>& corpus, int min_freq, int max_tokens) {
  if (corpus.empty()) throw DataError("empty-corpus: cannot build a vocabulary from no text");
  std::map<std::string, std::int64_t> freq;
  for (const auto& text : corpus)
    for (auto& tok : split_tokens(text)) ++freq[tok];
  std::vector<std::pair<std::string, std::int64_t>> kept;
  for (auto& [tok, n] : freq)
    if (n >= min_freq && tok != kPadToken && tok != kUnkToken) kept.emplace_back(tok, n);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocab v;
  v.max_tokens_ = max_tokens;
  v.tokens_ = {kPadToken, kUnkToken};
  for (auto& [tok, _] : kept) v.tokens_.push_back(tok);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.index_[v.tokens_[i]] = static_cast<std::int64_t>(i);
  return v;
}

std::vector<std::int64_t> tokenize(const std::string& text, const Vocab& vocab) {
  std::vector<std::int64_t> ids(static_cast<std::size_t>(vocab.max_tokens()), kPadId);
  std::size_t i = 0;
  for (const auto& tok : split_tokens(text)) {
    if (i >= ids.size()) break;
    ids[i++] = vocab.id(tok);
  }
  return ids;
}

torch::Tensor tokenize_batch(const std::vector<std::string>& texts, const Vocab& vocab) {
  const auto w = vocab.max_tokens();
  auto out = torch::empty({static_cast<std::int64_t>(texts.size()), w}, torch::kInt64);
  auto acc = out.accessor<std::int64_t, 2>();
  for (std::size_t b = 0; b < texts.size(); ++b) {
    const auto ids = tokenize(texts[b], vocab);
    for (int j = 0; j < w; ++j) acc[static_cast<std::int64_t>(b)][j] = ids[j];
  }
  return out;
}

TextEncoderImpl::TextEncoderImpl(const TextEncoderConfig& cfg) : cfg_(cfg) {
  token_embedding = register_module("token_embedding", nn::Embedding(cfg.vocab_size, cfg.width));
  nn::init::normal_(token_embedding->weight, 0.0, 0.02);
  position_embedding = register_parameter("position_embedding", torch::randn({cfg.max_tokens, cfg.width}) * 0.02);
  for (int i = 0; i < cfg.layers; ++i)
    layers.push_back(register_module("layer" + std::to_string(i), EncoderLayer(cfg.width, cfg.heads)));
  final_norm = register_module("final_norm", nn::LayerNorm(nn::LayerNormOptions({cfg.width})));
  projection = register_module("projection", nn::Linear(cfg.width, cfg.out_dim));
}

torch::Tensor TextEncoderImpl::forward(const torch::Tensor& ids) {
  if (ids.dim() != 2 || ids.size(1) != cfg_.max_tokens)
    throw UsageError("text encoder expects [B, " + std::to_string(cfg_.max_tokens) + "] ids");
  if (ids.numel() > 0 && (ids.min().item<std::int64_t>() < 0 || ids.max().item<std::int64_t>() >= cfg_.vocab_size))
    throw UsageError("id-out-of-range: token id outside [0, " + std::to_string(cfg_.vocab_size) + ")");
  auto mask = ids.ne(kPadId);
  mask = torch::where(mask.any(1, true), mask, torch::ones_like(mask));
  auto h = token_embedding(ids) + position_embedding.unsqueeze(0);
  for (auto& layer : layers) h = layer(h, mask);
  return projection(masked_mean(final_norm(h), mask));
}

}  // namespace whatifts
