#include "whatifts/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include <openssl/evp.h>

#include "whatifts/common.hpp"

namespace whatifts {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr std::array<char, 8> kMagic = {'W', 'I', 'F', 'T', 'C', 'K', 'P', '1'};

std::map<std::string, torch::Tensor> module_tensors(const torch::nn::Module& module) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& item : module.named_parameters(true)) out[item.key()] = item.value();
  for (const auto& item : module.named_buffers(true)) out[item.key()] = item.value();
  return out;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& file, nlohmann::json meta, const torch::nn::Module& module) {
  auto tensors = module_tensors(module);
  nlohmann::json index = nlohmann::json::array();
  std::int64_t offset = 0;
  std::vector<torch::Tensor> payload;
  for (const auto& [name, t] : tensors) {
    auto f = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    index.push_back({{"name", name}, {"shape", f.sizes().vec()}, {"offset", offset}});
    offset += f.numel();
    payload.push_back(f);
  }
  meta["tensors"] = index;
  const std::string header = meta.dump();

  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  const auto tmp = std::filesystem::path(file.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint " + file.string());
    out.write(kMagic.data(), kMagic.size());
    const std::uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& f : payload)
      out.write(reinterpret_cast<const char*>(f.data_ptr<float>()), static_cast<std::streamsize>(f.numel() * 4));
    if (!out) throw CheckpointError("short write on checkpoint " + file.string());
  }
  std::filesystem::rename(tmp, file);
}

Checkpoint read_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + file.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw CheckpointError("not a checkpoint archive: " + file.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1ULL << 31)) throw CheckpointError("corrupt checkpoint header: " + file.string());
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError("truncated checkpoint header: " + file.string());

  Checkpoint ckpt;
  try {
    ckpt.meta = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint metadata: " + std::string(e.what()));
  }
  const auto data_start = in.tellg();
  try {
    for (const auto& entry : ckpt.meta.at("tensors")) {
      const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = entry.at("offset").get<std::int64_t>();
      auto t = torch::empty(shape, torch::kFloat32);
      in.seekg(data_start + static_cast<std::streamoff>(offset * 4));
      in.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(t.numel() * 4));
      if (!in) throw CheckpointError("truncated tensor data in " + file.string());
      ckpt.tensors[entry.at("name").get<std::string>()] = t;
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt tensor index: " + std::string(e.what()));
  }
  return ckpt;
}

void load_parameters(torch::nn::Module& module, const Checkpoint& ckpt) {
  torch::NoGradGuard guard;
  for (auto& [name, target] : module_tensors(module)) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
    if (it->second.sizes() != target.sizes())
      throw CheckpointError("shape mismatch for tensor '" + name + "'");
    target.copy_(it->second.to(target.scalar_type()));
  }
}

std::string file_sha256(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + file.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int n = 0;
  EVP_DigestFinal_ex(ctx, digest.data(), &n);
  EVP_MD_CTX_free(ctx);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < n; ++i) {
    hex.push_back(kHex[digest[i] >> 4]);
    hex.push_back(kHex[digest[i] & 0xf]);
  }
  return hex;
}

}  // namespace whatifts
