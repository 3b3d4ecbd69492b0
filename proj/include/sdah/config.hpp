#pragma once

#include <filesystem>
#include <string>

#include "sdah/inference.hpp"
#include "sdah/network.hpp"
#include "sdah/training.hpp"

namespace sdah {

// JSON field names mirror the struct members exactly. Parsing starts from the
// defaults, so a file only needs the fields it changes; unknown fields are a
// DataError.
std::string model_config_to_json(const ModelConfig& c, int indent = -1);
ModelConfig model_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& c, int indent = -1);
TrainConfig train_config_from_json(const std::string& text);

/// Run configuration file: {"model": {...}, "train": {...}, "sliding": {...}}.
struct RunConfig {
  ModelConfig model;
  TrainConfig train = desk_train_config();
  SlidingConfig sliding;
};

std::string run_config_to_json(const RunConfig& c, int indent = 2);
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace sdah
