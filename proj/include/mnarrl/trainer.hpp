#pragma once

// Three-stage training: representation pre-training, frozen-encoder IQL,
// and joint fine-tuning, with entropy monitoring/rollback, posterior
// collapse diagnostics, validation FQE and early stopping.

#include "mnarrl/cohort.hpp"
#include "mnarrl/model.hpp"
#include "mnarrl/ope.hpp"

#include "json.hpp"

#include <filesystem>
#include <limits>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mnarrl::train {

using ad::Matrix;

struct EntropyConfig {
  double collapse_threshold = 0.5;  // nats
  double relative_drop = 0.5;       // fraction lost within the window
  int window = 10;                  // epochs
  double healthy_threshold = 1.0;   // rollback targets must exceed this
  double lr_factor = 0.5;
  double beta_factor = 1.5;
  int max_rollbacks = 3;
};

struct FqeSettings {
  int iterations = 50;
  std::vector<int> widths = {256, 256};
  int epochs_per_fit = 1;
  int batch_size = 256;
  double lr = 1e-3;
};

struct TrainConfig {
  int stage1_epochs = 50;
  int stage2_epochs = 100;
  int stage3_epochs = 50;
  double stage1_lr = 1e-3;
  double stage2_lr = 3e-4;
  double stage3_encoder_lr = 1e-4;
  double stage3_rl_lr = 3e-4;
  model::LossWeights weights;  // Stage-1 weights; reused for Stage-3 auxiliaries
  double weight_decay = 1e-5;
  int batch_size = 256;           // episodes (Stages 1, 3) or transitions (Stage 2)
  double grad_clip = 1.0;
  int patience = 10;              // validation evaluations without improvement
  int validation_every = 5;       // epochs, Stages 2 and 3
  bool beta_annealing = true;     // KL weight 0 -> weights.kl over the first fraction
  double anneal_fraction = 0.4;
  bool free_bits = true;
  EntropyConfig entropy;
  FqeSettings validation_fqe;
  iql::RLConfig rl;
  int entropy_states = 2048;      // states used for the per-epoch entropy estimate
  std::uint64_t seed = 0;

  void validate() const;
};

// ---- entropy monitor ----

struct EntropyDecision {
  bool collapse = false;
  int rollback_epoch = -1;  // index into the history, -1 when none is healthy
  double new_lr = 0.0;
  double new_beta = 0.0;
  std::string reason;
};

// `history` holds one mean policy entropy per epoch, the last entry being
// the current epoch.
EntropyDecision entropy_monitor(std::span<const double> history, double lr, double beta,
                                const EntropyConfig& config);

// ---- early stopping ----

class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}
  // Returns true when training should stop: `patience` consecutive
  // evaluations without improving on the best value.
  bool update(double value);
  bool improved() const { return improved_; }
  double best() const { return best_; }
  int stale() const { return stale_; }

 private:
  int patience_;
  double best_ = -std::numeric_limits<double>::infinity();
  int stale_ = 0;
  bool improved_ = false;
};

// ---- posterior collapse ----

struct CollapseDiagnostics {
  double mean_kl = 0.0;  // per transition, summed over latent dims
  int active_dims = 0;   // dims with mean KL > threshold
  int latent_dims = 0;
  double mutual_information = 0.0;
  Eigen::RowVectorXd kl_per_dim;
};

inline constexpr double kActiveDimThreshold = 0.01;

CollapseDiagnostics collapse_diagnostics(const model::ModelBundle& bundle,
                                         const std::vector<model::PreparedEpisode>& episodes,
                                         int mi_samples = 1024, std::uint64_t seed = 0);

// Aggregate-posterior KL proxy for I(x; z) from posterior moments [N x d].
double mutual_information_proxy(const Matrix& means, const Matrix& stds, int max_samples,
                                std::uint64_t seed);

// ---- training ----

class NumericFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  model::ModelBundle bundle;
  std::vector<nlohmann::json> metrics;  // one record per epoch
  std::vector<std::filesystem::path> checkpoints;
  std::uint64_t encoder_checksum_before_stage2 = 0;
  std::uint64_t encoder_checksum_after_stage2 = 0;
  double max_clipped_grad_norm = 0.0;
  int rollbacks = 0;
  double final_beta = 0.0;
  std::optional<double> best_validation_fqe;
};

struct TrainHooks {
  // Invoked after each Stage-2/3 epoch with the measured entropy; the
  // return value replaces it (used to force a collapse schedule in tests).
  std::function<double(int stage, int epoch, double entropy)> entropy_override;
};

// Trains on cohort.split == kTrain, validates on kValidation (if any).
// When out_dir is non-empty, writes checkpoints and metrics.jsonl there.
TrainResult run_training(const sim::Cohort& cohort, const model::ModelConfig& model_config,
                         const TrainConfig& config, const std::filesystem::path& out_dir = {},
                         const nlohmann::json& manifest_extra = {}, const TrainHooks& hooks = {});

// States, transitions and policy probabilities for one episode set.
ope::FqeDataset fqe_dataset(const model::ModelBundle& bundle, const model::TransitionSet& t);
Matrix policy_matrix(const model::ModelBundle& bundle, const Matrix& states);
double mean_entropy(const Matrix& probs);

ope::FqeResult run_fqe(const model::ModelBundle& bundle, const model::TransitionSet& t,
                       const FqeSettings& settings, std::uint64_t seed);

}  // namespace mnarrl::train
