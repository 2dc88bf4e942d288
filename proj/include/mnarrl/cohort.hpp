#pragma once

// Synthetic ICU-style cohort whose observation and documentation intensity
// depend on a latent severity process, plus the observation summaries
// (time gaps, counts, missing rates, windowed frequency, documentation
// density) consumed by the encoders.

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mnarrl::sim {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Marker stored in value matrices where the mask is 0. Masks, never values,
// define observedness.
inline constexpr double kUnobserved = std::numeric_limits<double>::quiet_NaN();

struct SimConfig {
  int n_episodes = 1000;
  int horizon = 18;
  int sub_steps_per_decision = 4;
  double sub_step_hours = 1.0;
  int n_structured = 16;
  int n_static = 3;
  int n_text_modalities = 2;
  int text_embed_dim = 8;
  int max_notes_per_modality = 4;
  int latent_severity_dim = 1;
  int action_count = 9;
  double mnar_steepness = 3.0;
  double doc_mnar_steepness = 1.5;
  double behavior_temperature = 1.0;
  double discount = 0.99;
  std::uint64_t seed = 0;

  // Summary windows: K decision steps for documentation density, W hours
  // for windowed observation frequency.
  int density_window_steps = 6;
  double frequency_window_hours = 6.0;

  void validate() const;  // throws std::invalid_argument
  double decision_hours() const { return sub_step_hours * sub_steps_per_decision; }
  double horizon_hours() const { return decision_hours() * horizon; }
};

struct StepObservation {
  MatrixXd values;     // [sub_steps x D], kUnobserved where mask = 0
  MatrixXd mask;       // [sub_steps x D], 0/1
  MatrixXd time_gaps;  // [sub_steps x D], hours since last observation
  // Per modality: one row per note in this step (rows = text_counts[j]).
  std::vector<MatrixXd> text_notes;
  std::vector<int> text_counts;  // [n_text_modalities]
  VectorXd text_mask;            // [n_text_modalities], 1[count > 0]
  double text_recency = 0.0;     // hours since the last note (capped)
  double doc_density = 0.0;      // kappa

  // Mean embedding per modality [n_text_modalities x d_e]; zero rows where
  // the modality is absent.
  MatrixXd text_embeds() const;
};

struct Episode {
  std::uint64_t id = 0;
  VectorXd static_features;  // x
  std::vector<StepObservation> steps;
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<std::uint8_t> dones;
  std::vector<double> true_severity;    // severity during each step (eval only)
  std::vector<VectorXd> behavior_probs;  // simulator behavior policy per step
  std::optional<int> outcome;            // post-horizon mortality, survivors only

  int length() const { return static_cast<int>(steps.size()); }
  bool survived_horizon(int horizon) const {
    return length() == horizon && !rewards.empty() && rewards.back() > 0.0;
  }
  double total_return(double discount) const;
};

enum class Split : std::uint8_t { kTrain = 0, kValidation = 1, kTest = 2 };

struct Cohort {
  SimConfig config;
  std::vector<Episode> episodes;
  std::vector<Split> split;  // one entry per episode; empty when unsplit

  std::vector<int> indices(Split which) const;
};

struct NormalizationStats {
  VectorXd mean;    // per structured variable, observed entries only
  VectorXd stddev;  // floored at kStdFloor
  double text_recency_mean = 0.0;
  double text_recency_std = 1.0;
  double doc_density_mean = 0.0;
  double doc_density_std = 1.0;

  static constexpr double kStdFloor = 1e-6;
};

NormalizationStats compute_normalization(const std::vector<Episode>& episodes,
                                         std::span<const int> indices);

// Optional perturbation used to verify that observations at step h depend
// only on severity at steps <= h.
struct SeverityPerturbation {
  int from_step = std::numeric_limits<int>::max();
  double delta = 0.0;
};

Episode generate_episode(const SimConfig& config, int index,
                         const SeverityPerturbation& perturbation = {});
std::vector<Episode> generate_cohort(const SimConfig& config);

struct SummaryGrid {
  double sub_step_hours = 1.0;
  int sub_steps_per_decision = 4;
  double recency_cap_hours = 72.0;  // text recency before any note
};

struct ObservationSummaries {
  MatrixXd time_gaps;     // delta [T x D]
  MatrixXd cumulative;    // c [T x D]
  MatrixXd missing_rate;  // rho [T x D]
  MatrixXd window_freq;   // omega [T x D], observations per hour
  VectorXd text_recency;  // [H]
  VectorXd doc_density;   // kappa [H]
};

// masks: [T x D] over the fine grid (T = H * sub_steps); counts: [H x M].
ObservationSummaries compute_summaries(const MatrixXd& masks,
                                       const Eigen::MatrixXi& counts,
                                       int density_window_steps,
                                       double frequency_window_hours,
                                       const SummaryGrid& grid);

// Partition [0, n) into len(fractions) disjoint groups. Group sizes are
// floor(f_i * n) for all but the last group, which takes the remainder.
// Indices inside each group are ascending.
std::vector<std::vector<int>> split_indices(int n, std::span<const double> fractions,
                                            std::uint64_t seed);

// Assigns train/validation/test labels to the cohort.
void split_cohort(Cohort& cohort, std::span<const double> fractions,
                  std::uint64_t seed);

}  // namespace mnarrl::sim
