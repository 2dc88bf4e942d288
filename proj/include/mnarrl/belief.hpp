#pragma once

// Action-conditioned latent dynamics: a Gaussian prior over z_{h+1} given
// (z_h, phi_h, a_h), an amortized posterior, the residual state
// s_h = phi_h + proj(z_h), and reconstruction decoders reading s_h.

#include "mnarrl/ad.hpp"
#include "mnarrl/nn.hpp"

#include <span>
#include <vector>

namespace mnarrl::belief {

using ad::Matrix;
using ad::Var;

enum class PosteriorConditioning { kPhiX, kPhiXAZ };

struct DynamicsDims {
  int latent = 32;
  int hidden = 128;
  int static_features = 3;
  int actions = 9;
  int action_embed = 16;
  std::vector<int> widths = {128, 64};
  double sigma_floor = 1e-3;
  bool action_conditioning = true;  // off: prior ignores a_h
  PosteriorConditioning posterior_mode = PosteriorConditioning::kPhiX;
};

struct DynamicsParams {
  DynamicsParams() = default;
  DynamicsParams(const DynamicsDims& dims, Rng& rng);

  DynamicsDims dims;
  Var action_embedding;  // [A x 16]
  nn::Mlp prior;         // [z; phi; e(a)] -> [mu; log var]
  nn::Mlp posterior;     // [phi; x] (optionally + [z; e(a)]) -> [mu; log var]
  nn::Linear proj;       // z -> hidden

  void register_parameters(const std::string& prefix, nn::ParameterList& list) const;
};

struct Gaussian {
  Var mean;  // [B x d_z]
  Var std;   // [B x d_z], >= floor
};

// Splits [mu; log var] and maps the log-variance to a floored deviation.
Gaussian gaussian_from_raw(const Var& raw, int latent, double floor);

Var embed_actions(std::span<const int> actions, const DynamicsParams& params);

Gaussian prior_step(const Var& z, const Var& phi, std::span<const int> actions,
                    const DynamicsParams& params);

// z_prev and actions are read only in PosteriorConditioning::kPhiXAZ.
Gaussian posterior(const Var& phi_next, const Matrix& static_features,
                   const DynamicsParams& params, const Var* z_prev = nullptr,
                   std::span<const int> actions = {});

Var sample_latent(const Gaussian& g, const Matrix& noise);

// KL(q || p) per dimension [B x d_z].
Var kl_per_dim(const Gaussian& q, const Gaussian& p);
// Sum of kl_per_dim over every entry.
Var kl_diag_gaussian(const Gaussian& q, const Gaussian& p);
// N(0, I), the prior over z_0.
Gaussian standard_normal(Eigen::Index batch, int latent);

// Mean over rows of ||z - mu||^2.
Var dynamics_loss(const Var& z, const Var& predicted_mean);

Var combine_state(const Var& phi, const Var& z, const DynamicsParams& params);

// ---- reconstruction ----

struct DecoderDims {
  int hidden = 128;
  int obs_width = 64;   // sub_steps * D
  int text_width = 16;  // M * d_e
};

struct DecoderParams {
  DecoderParams() = default;
  DecoderParams(const DecoderDims& dims, Rng& rng);

  DecoderDims dims;
  nn::Mlp values;  // s -> y
  nn::Mlp mask;    // s -> mask logits
  nn::Mlp text;    // s -> e
  nn::Mlp eta;     // s -> eta

  void register_parameters(const std::string& prefix, nn::ParameterList& list) const;
};

// Targets and per-entry weights for one batch of decision steps. Padded
// rows carry zero weight everywhere. Each term is divided by its
// normalizer (number of weighted entries) to keep terms per entry.
struct ReconTargets {
  Matrix values, value_weights;
  Matrix mask, mask_weights;
  Matrix text, text_weights;
  Matrix eta, eta_weights;
};

struct ReconWeights {
  double obs = 1.0;
  double mask = 0.5;
  double text = 0.3;
  bool text_terms = true;
};

struct ReconBreakdown {
  Var total;
  double obs = 0.0;
  double mask = 0.0;
  double text = 0.0;
  double eta = 0.0;
};

ReconBreakdown reconstruction_loss(const Var& state, const ReconTargets& targets,
                                   const DecoderParams& decoders, const ReconWeights& weights);

// ---- action-independence probe ----

struct ProbeConfig {
  int states = 8;
  int rollout_steps = 6;
  double discount = 0.99;
  double fd_step = 1e-5;
  int followup_action = 0;  // action taken after the probed step
  std::uint64_t seed = 0;
};

struct ProbeReport {
  double max_abs_gradient = 0.0;  // over states and logits
  double max_q_spread = 0.0;      // max_a Q - min_a Q, over states
};

// For each probed (z, phi), rolls the prior mean forward under action a at
// the probed step and `followup_action` afterwards, with reward read out
// linearly from s only. Differentiates E_{a~softmax(l)}[return] with
// respect to the logits l by central differences.
ProbeReport theorem1_probe(const DynamicsParams& params, const ProbeConfig& config);

}  // namespace mnarrl::belief
