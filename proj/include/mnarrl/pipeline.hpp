#pragma once

// Artifact-level orchestration shared by the CLI and the acceptance suite:
// run manifests and the ablation sweep.

#include "mnarrl/config.hpp"
#include "mnarrl/evaluate.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace mnarrl::pipeline {

const char* code_version();

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string started_at;   // ISO-8601 UTC
  std::string finished_at;
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json outputs = nlohmann::json::object();
};

std::string utc_now();
nlohmann::json to_json(const RunManifest& m);
// Writes <dir>/run_manifest.json, replacing any previous one.
void write_manifest(const std::filesystem::path& dir, const RunManifest& m);

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  eval::EvalReport report;
};

struct AblationRow {
  std::string variant;
  int seeds = 0;
  double fqe = 0.0;  // seed means of point estimates and CI bounds
  double fqe_lower = 0.0;
  double fqe_upper = 0.0;
  std::optional<double> auroc;
  std::optional<double> auroc_lower;
  std::optional<double> auroc_upper;
};

using Progress = std::function<void(const std::string&)>;

// Trains and evaluates every (variant, seed) pair on the cohort. Each run
// gets <out_dir>/<variant>/seed_<s>/ with metrics, checkpoints, report and
// manifest when out_dir is non-empty. With no variants configured a single
// "full" variant with the base model is run.
std::vector<AblationRun> run_ablation(const sim::Cohort& cohort, const config::RunConfig& config,
                                      const std::filesystem::path& out_dir, const Progress& progress = {});

// One row per variant in configuration order.
std::vector<AblationRow> summarize_ablation(const std::vector<AblationRun>& runs);
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

}  // namespace mnarrl::pipeline
