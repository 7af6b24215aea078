#pragma once

// Binary checkpoint format.
//
//   "MMSEQ1"            6 bytes magic
//   u32 version         currently 1
//   char[4] model tag   e.g. "TFM\0", "GRU\0"
//   u64 n + n bytes     hyperparameters, "key=value\n" lines
//   repeated to EOF:
//     u32 n + n bytes   tensor name
//     u32 rank, rank x u64 dims
//     f32 payload
//
// All integers and floats are little-endian.

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "mmseq/optim.hpp"
#include "mmseq/tensor.hpp"

namespace mmseq::nn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  std::string model_tag;  // up to 4 characters
  std::map<std::string, std::string> hyper;
  std::vector<NamedTensor> tensors;

  const Tensor* find(std::string_view name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws ValidationError on a malformed or truncated image.
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameter values plus Adam moments ("adam.m/<name>", "adam.v/<name>")
/// and the step count (hyper key "adam.step").
void store_to_checkpoint(const ParameterStore& store, Checkpoint& ckpt, bool with_optimizer);
/// Copies tensors back by name; every parameter must be present with a
/// matching shape. Optimizer state is restored when present.
void store_from_checkpoint(ParameterStore& store, const Checkpoint& ckpt);

}  // namespace mmseq::nn
