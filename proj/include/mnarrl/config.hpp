#pragma once

// JSON run configuration. Every section is optional and falls back to its
// defaults; unknown keys and type mismatches are rejected. The accepted
// layout is published in schema/config.schema.json.
//
//   {
//     "sim":    { SimConfig fields },
//     "split":  { "fractions": [0.7, 0.15, 0.15], "seed": 0 },
//     "model":  { ModelConfig fields },
//     "train":  { TrainConfig fields, nested "weights", "entropy", "rl", "validation_fqe" },
//     "eval":   { EvalConfig fields, nested "fqe" },
//     "ablate": { "seeds": [0], "variants": [{"name": "full", "model": {...overrides}}] }
//   }

#include "mnarrl/cohort.hpp"
#include "mnarrl/evaluate.hpp"
#include "mnarrl/model.hpp"
#include "mnarrl/trainer.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace mnarrl::config {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SplitConfig {
  std::vector<double> fractions = {0.7, 0.15, 0.15};
  std::uint64_t seed = 0;
};

struct AblationVariant {
  std::string name;
  nlohmann::json model = nlohmann::json::object();  // overrides applied to "model"
};

struct AblationConfig {
  std::vector<std::uint64_t> seeds = {0};
  std::vector<AblationVariant> variants;
};

struct RunConfig {
  sim::SimConfig sim;
  SplitConfig split;
  model::ModelConfig model;
  train::TrainConfig train;
  eval::EvalConfig eval;
  AblationConfig ablate;
};

nlohmann::json to_json(const model::ModelConfig& c);
model::ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const model::DataDims& d);
model::DataDims data_dims_from_json(const nlohmann::json& j);
nlohmann::json to_json(const train::TrainConfig& c);
train::TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const eval::EvalConfig& c);
eval::EvalConfig eval_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

// Reads and validates a config file; all failures raise ConfigError.
RunConfig load_run_config(const std::filesystem::path& path);

// FNV-1a over the canonical (sorted-key, compact) dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& j);

// Applies a variant's overrides on top of the base model config.
model::ModelConfig apply_overrides(const model::ModelConfig& base, const nlohmann::json& overrides);

}  // namespace mnarrl::config
