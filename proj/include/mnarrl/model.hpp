#pragma once

// Full model bundle and the batched forward pass over padded episodes:
// structured encoder -> text fusion -> latent belief -> state s_h, with the
// Stage-1 representation losses and state extraction for the RL heads.

#include "mnarrl/belief.hpp"
#include "mnarrl/cohort.hpp"
#include "mnarrl/encoder.hpp"
#include "mnarrl/fusion.hpp"
#include "mnarrl/iql.hpp"
#include "mnarrl/outcome.hpp"

#include <optional>
#include <vector>

namespace mnarrl::model {

using ad::Matrix;
using ad::Var;

struct ModelConfig {
  int hidden = 128;
  int latent = 32;
  int psi_embed = 32;
  int attention_dim = 128;
  int heads = 4;
  int action_embed = 16;
  std::vector<int> dynamics_widths = {128, 64};
  std::vector<int> rl_widths = {256, 256};
  int outcome_hidden = 64;
  double dropout = 0.1;
  double sigma_floor = 1e-3;

  // Ablation switches; each toggles one mechanism.
  bool mnar_features = true;
  bool doc_factor = true;
  bool text_channel = true;
  bool action_conditioning = true;
  bool semi_mdp = false;  // gamma^duration discounting (duration 1 on the uniform grid)
  encoder::PsiEmbedding psi_embedding = encoder::PsiEmbedding::kMlp;
  belief::PosteriorConditioning posterior_conditioning = belief::PosteriorConditioning::kPhiX;

  void validate() const;
};

// Data-side dimensions taken from the cohort.
struct DataDims {
  int n_structured = 16;
  int sub_steps = 4;
  int n_static = 3;
  int text_modalities = 2;
  int embed_dim = 8;
  int max_notes = 4;
  int actions = 9;
  int horizon = 18;
  double sub_step_hours = 1.0;
  double window_hours = 6.0;
  double discount = 0.99;

  static DataDims from(const sim::SimConfig& config);
};

struct ModelBundle {
  ModelBundle() = default;
  ModelBundle(const ModelConfig& config, const DataDims& data, const sim::NormalizationStats& stats,
              std::uint64_t seed);

  ModelConfig config;
  DataDims data;
  sim::NormalizationStats stats;
  encoder::EncoderParams encoder;
  fusion::FusionParams fusion;
  belief::DynamicsParams dynamics;
  belief::DecoderParams decoders;
  iql::RLHeads heads;
  outcome::OutcomeParams outcome;

  // Encoder, fusion, and the posterior path (frozen in Stage 2).
  nn::ParameterList encoder_parameters() const;
  // Encoder plus prior, projection, decoders and outcome head (Stage 1).
  nn::ParameterList representation_parameters() const;
  nn::ParameterList rl_parameters() const;
  nn::ParameterList target_parameters() const;
  // Everything, in checkpoint order.
  nn::ParameterList all_parameters() const;
};

// Normalized, model-ready view of one episode.
struct PreparedEpisode {
  const sim::Episode* source = nullptr;
  int length = 0;
  encoder::StructuredInputs structured;
  Matrix process;          // [L x (M+2)]
  Matrix static_features;  // [1 x S]
  Matrix obs_values;       // [L x U*D], normalized, 0 where unobserved
  Matrix obs_mask;         // [L x U*D]
  Matrix text_targets;     // [L x M*d_e]
  Matrix text_weights;     // [L x M*d_e]
};

PreparedEpisode prepare_episode(const sim::Episode& episode, const ModelBundle& bundle);
std::vector<PreparedEpisode> prepare_episodes(const std::vector<sim::Episode>& episodes,
                                              std::span<const int> indices,
                                              const ModelBundle& bundle);

struct ForwardOptions {
  bool dropout = false;
  bool sample = false;  // reparameterized draws; otherwise latent means
  Rng* rng = nullptr;   // required when dropout or sample
};

struct ForwardResult {
  int batch = 0;
  int steps = 0;
  Matrix step_valid;                // [L x B]
  std::vector<Var> phi;             // fused embedding per step [B x H]
  std::vector<Var> eta;             // doc-MLP output per step
  std::vector<Var> z;               // latent per step [B x d_z]
  std::vector<Var> state;           // s_h per step [B x H]
  std::vector<Matrix> imputed;      // detached y_hat per step [B x U*D]
  std::vector<belief::Gaussian> prior;      // index h predicts z_h, h >= 1
  std::vector<belief::Gaussian> posterior;  // index h, h >= 1
};

ForwardResult forward(const ModelBundle& bundle, std::span<const PreparedEpisode* const> batch,
                      const ForwardOptions& options);

struct LossWeights {
  double obs = 1.0;
  double mask = 0.5;
  double text = 0.3;
  double dynamics = 1.0;
  double kl = 0.1;
  double outcome = 1.0;
  double unobserved_target_weight = 0.2;
  double free_bits = 0.05;  // nats per latent dimension
  bool recon = true;
  bool dynamics_terms = true;  // L_dyn and KL
  bool outcome_term = true;
};

struct RepresentationLoss {
  Var total;
  double recon = 0.0, obs = 0.0, mask = 0.0, text = 0.0, eta = 0.0;
  double dynamics = 0.0, kl = 0.0, outcome = 0.0;
  Eigen::RowVectorXd kl_per_dim;  // batch mean over transitions, before free bits
  int outcome_count = 0;
};

RepresentationLoss representation_loss(const ModelBundle& bundle,
                                       std::span<const PreparedEpisode* const> batch,
                                       const ForwardResult& fwd, const LossWeights& weights);

// Terminal states of full-horizon survivors and their labels.
struct OutcomeBatch {
  std::vector<int> rows;  // batch rows that are eligible
  Matrix labels;          // [n x 1]
};
OutcomeBatch outcome_rows(std::span<const PreparedEpisode* const> batch, int horizon);

// Deterministic states (mean latent, no dropout) per episode [L x H].
std::vector<Matrix> encode_states(const ModelBundle& bundle,
                                  const std::vector<PreparedEpisode>& episodes,
                                  int batch_size = 256);

// Flattened transitions over precomputed states.
struct TransitionSet {
  Matrix states;       // [N x H]
  Matrix next_states;  // [N x H], copy of states on terminal rows
  std::vector<int> actions;
  Matrix rewards;      // [N x 1]
  Matrix dones;        // [N x 1]
  Matrix discounts;    // [N x 1]
  std::vector<int> episode;  // index into the source episode list
  std::vector<int> step;
  std::vector<Eigen::RowVectorXd> behavior;  // simulator behavior probabilities

  int size() const { return static_cast<int>(actions.size()); }
  std::vector<int> initial_rows() const;
};

TransitionSet build_transitions(const std::vector<PreparedEpisode>& episodes,
                                const std::vector<Matrix>& states, const ModelBundle& bundle);

double step_discount(const ModelBundle& bundle);

}  // namespace mnarrl::model
