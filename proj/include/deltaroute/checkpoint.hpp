#pragma once

// Binary checkpoint layout, all integers little-endian:
//
//   magic      8 bytes  "DROUTCK\x01"
//   version    u32
//   config     u32 length + UTF-8 JSON (model, routing and seed)
//   table      u32 count, then per tensor: u32 name length, name,
//              u32 rank, rank x u64 dims
//   payload    float32 values of every tensor in table order
//   checksum   u64 FNV-1a over every preceding byte

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deltaroute/model.hpp"

namespace deltaroute {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const;
};

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size);

std::vector<std::uint8_t> serialize(const Checkpoint& checkpoint);
/// Throws FormatError on bad magic, version, checksum or truncation.
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename Scalar>
Checkpoint snapshot(const BasicModel<Scalar>& model);

/// Copies every tensor into `model`. Rejects a checkpoint whose routing mode
/// or parameter table differs from the model's.
template <typename Scalar>
void restore(BasicModel<Scalar>& model, const Checkpoint& checkpoint);

/// Builds a float model from the stored config and restores its parameters.
Model instantiate(const Checkpoint& checkpoint);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

/// Baseline checkpoint to a routed variant: backbone tensors copied verbatim,
/// routing queries zero, routing gains one. Throws ContractError when the
/// source is not Baseline.
Checkpoint convert(const Checkpoint& baseline, const RoutingMode& target);

}  // namespace deltaroute
