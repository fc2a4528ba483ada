#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <torch/torch.h>

#include "json.hpp"

namespace whatifts {

/// Archive layout: 8-byte magic, u64 little-endian metadata length, the
/// metadata JSON, then each parameter tensor as raw little-endian float32.
/// The metadata lists {name, shape, offset} for every tensor.
struct Checkpoint {
  nlohmann::json meta;
  std::map<std::string, torch::Tensor> tensors;  // float32, CPU
};

void write_checkpoint(const std::filesystem::path& file, nlohmann::json meta, const torch::nn::Module& module);
Checkpoint read_checkpoint(const std::filesystem::path& file);

/// Copies every named parameter and buffer of the module from the archive,
/// casting to the module's dtype; throws CheckpointError on missing or
/// mis-shaped tensors.
void load_parameters(torch::nn::Module& module, const Checkpoint& ckpt);

/// Hex SHA-256 of a file's bytes; serves as the checkpoint id.
std::string file_sha256(const std::filesystem::path& file);

}  // namespace whatifts
