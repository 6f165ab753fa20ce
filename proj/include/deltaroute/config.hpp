#pragma once

// JSON configuration files. Layout:
//
//   {
//     "seed": 0,
//     "model":   { "d_model": 128, "n_layers": 8, "n_heads": 4, ... },
//     "routing": { "mode": "delta_block", "block_size": 2, "null_source": false },
//     "train":   { "steps": 2000, "data_path": "corpus.txt", ... }
//   }
//
// Required: model.d_model, model.n_layers, model.n_heads, routing.mode,
// train.steps, train.data_path. Everything else has a default. Unknown keys are
// rejected so typos do not pass silently. routing.num_blocks may be given
// instead of routing.block_size and is converted with ceil(L / B).

#include <filesystem>

#include <json.hpp>

#include "deltaroute/model.hpp"
#include "deltaroute/trainer.hpp"

namespace deltaroute {

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
};

nlohmann::json model_config_to_json(const ModelConfig& config);
/// Parses the "model" and "routing" sections plus "seed". Throws ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& doc);

nlohmann::json experiment_to_json(const ExperimentConfig& config);
ExperimentConfig experiment_from_json(const nlohmann::json& doc);
/// Reads and validates a config file; a relative train.data_path resolves
/// against the file's directory.
ExperimentConfig load_experiment(const std::filesystem::path& path);

}  // namespace deltaroute
