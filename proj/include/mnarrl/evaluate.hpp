#pragma once

// Held-out evaluation of a trained bundle: FQE and WIS policy values with
// bootstrap intervals, ESS, outcome AUROC against a last-observed-value
// logistic baseline, policy entropy and latent usage. Results are
// serialized as one JSON record per metric.

#include "mnarrl/cohort.hpp"
#include "mnarrl/model.hpp"
#include "mnarrl/trainer.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mnarrl::eval {

using ad::Matrix;

enum class BehaviorSource { kSimulator, kFittedBc };

struct EvalConfig {
  train::FqeSettings fqe;
  int n_bootstrap = 1000;
  double alpha = 0.05;
  BehaviorSource behavior = BehaviorSource::kSimulator;
  int bc_epochs = 20;
  int mi_samples = 1024;
  std::uint64_t seed = 0;

  void validate() const;
};

struct MetricRecord {
  std::string name;
  double value = 0.0;
  std::optional<double> lower;
  std::optional<double> upper;
  std::string config_hash;
  std::uint64_t seed = 0;
  nlohmann::json extra = nlohmann::json::object();
};

nlohmann::json to_json(const MetricRecord& r);
MetricRecord metric_from_json(const nlohmann::json& j);

struct EvalReport {
  std::vector<MetricRecord> records;

  const MetricRecord* find(const std::string& name) const;
  const MetricRecord& at(const std::string& name) const;  // throws if absent
};

void write_report(const std::filesystem::path& path, const EvalReport& report);
EvalReport read_report(const std::filesystem::path& path);

// Final carried-forward normalized value per structured variable
// (0 = mean when never observed).
Eigen::RowVectorXd last_observed_features(const sim::Episode& episode,
                                          const sim::NormalizationStats& stats);

// L2-regularized logistic regression by Newton iterations; the last
// coefficient is the intercept.
Eigen::VectorXd fit_logistic(const Matrix& x, const Eigen::VectorXd& y, double l2 = 1e-4,
                             int iterations = 50);
Eigen::VectorXd predict_logistic(const Matrix& x, const Eigen::VectorXd& coef);

struct OutcomeScores {
  std::vector<double> model;
  std::vector<double> baseline;
  std::vector<int> labels;
};

// Outcome-head and baseline scores on eligible (full-horizon survivor)
// episodes of `eval_indices`; the baseline is fit on `train_indices`.
OutcomeScores outcome_scores(const model::ModelBundle& bundle, const sim::Cohort& cohort,
                             std::span<const int> train_indices, std::span<const int> eval_indices);

// Action distribution after the first `prefix` steps of an episode, from
// the belief at the last observed step.
iql::Selection recommend(const model::ModelBundle& bundle, const sim::Episode& episode, int prefix,
                         int n_samples, iql::SelectMode mode, std::uint64_t seed);

EvalReport evaluate(const model::ModelBundle& bundle, const sim::Cohort& cohort,
                    const EvalConfig& config, const std::string& config_hash,
                    sim::Split which = sim::Split::kTest);

}  // namespace mnarrl::eval
