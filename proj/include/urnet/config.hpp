#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "urnet/dataset.hpp"
#include "urnet/model.hpp"
#include "urnet/trainer.hpp"

namespace urnet {

using Json = nlohmann::json;

Json to_json(const ModelSpec& spec);
/// Missing keys keep their defaults; unknown keys throw ConfigError.
ModelSpec model_spec_from_json(const Json& j);

Json to_json(const Normalization& norm);
Normalization normalization_from_json(const Json& j);

Json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const Json& j);

enum class DataKind { Synthetic, Cifar10 };

struct DataConfig {
  DataKind kind = DataKind::Synthetic;
  SyntheticSpec synthetic;  // split and size of the training set
  std::size_t test_size = 1000;
  std::vector<std::filesystem::path> train_files;
  std::vector<std::filesystem::path> test_files;
  Normalization normalization = Normalization::cifar10();
};

Json to_json(const DataConfig& cfg);
DataConfig data_config_from_json(const Json& j);

/// Everything a command needs besides its flags.
struct RunConfig {
  ModelSpec model;
  TrainConfig train;
  DataConfig data;
  std::size_t pretrain_epochs = 8;
  std::filesystem::path output_dir = "runs/default";
  std::uint64_t seed = 1;

  /// Throws ConfigError on any inconsistency.
  void validate() const;
};

Json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const std::filesystem::path& path);

Dataset load_train_set(const DataConfig& cfg);
Dataset load_test_set(const DataConfig& cfg);

}  // namespace urnet
