#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "urnet/dataset.hpp"
#include "urnet/model.hpp"
#include "urnet/trainer.hpp"

namespace urnet {

inline constexpr int kCheckpointVersion = 1;

/// Training progress stored alongside the weights.
struct TrainState {
  std::string phase = "none";
  std::size_t next_epoch = 0;
  std::map<std::string, OptimizerState> optimizer;
};

struct Checkpoint {
  UrnetModel model;
  Normalization normalization;
  TrainState state;
};

/// Layout: 8-byte little-endian header length, JSON header, float32
/// little-endian payload, CRC32 of the payload (little-endian u32).
void save_checkpoint(UrnetModel& model, const Normalization& normalization, const TrainState& state,
                     const std::filesystem::path& path);

/// Rebuilds the model from the architecture in the header.
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// As above, but the header must describe the same architecture as `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelSpec& expected);

}  // namespace urnet
