#pragma once

// Decay-gated recurrent encoder over irregular structured observations,
// with explicit missingness features entering every gate.

#include "mnarrl/ad.hpp"
#include "mnarrl/cohort.hpp"
#include "mnarrl/nn.hpp"

#include <Eigen/Dense>

#include <optional>
#include <utility>

namespace mnarrl::encoder {

using ad::Matrix;
using ad::Var;

enum class PsiEmbedding { kMlp, kLinear };

struct EncoderDims {
  int n_structured = 16;
  int hidden = 128;
  int psi_embed = 32;  // used only with PsiEmbedding::kMlp
  PsiEmbedding psi_mode = PsiEmbedding::kMlp;
  bool use_mnar_features = true;
  double dropout = 0.1;
};

struct EncoderParams {
  EncoderParams() = default;
  EncoderParams(const EncoderDims& dims, Rng& rng);

  EncoderDims dims;
  Var hidden_decay_weight;  // [1 x 1]
  Var hidden_decay_bias;    // [1 x 1]
  Var input_decay_weight;   // [1 x D], per-variable
  Var input_decay_bias;     // [1 x D]
  nn::Mlp psi_mlp;          // 4D -> 32 -> 32
  nn::Linear gates;         // [y_hat; phi_hat; psi_emb] -> [reset; update]
  nn::Linear candidate;     // [y_hat; r * phi_hat; psi_emb] -> hidden

  int psi_width() const;  // width of the embedded psi fed to the gates
  void register_parameters(const std::string& prefix, nn::ParameterList& list) const;
};

struct DecayFactors {
  Var hidden;  // [B x 1], in (0, 1]
  Var input;   // [B x D], in (0, 1]
};

// xi_phi = exp(-max(0, w * mean(delta) + b)); xi_y analogous per variable.
DecayFactors decay_factors(const Var& deltas, const EncoderParams& params);

// y_hat = m*y + (1-m)*(xi*y_last + (1-xi)*mu). `values` must hold finite
// numbers (any value) where mask = 0; they are multiplied by zero.
Var impute_inputs(const Matrix& values, const Matrix& mask, const Matrix& last_observed,
                  const Var& input_decay, const Eigen::RowVectorXd& mean);

// psi_t = [delta_t; c_t; rho_t; omega_t] for the sub-step t = rows(history),
// counting from 1. `history` holds the masks of sub-steps 1..t.
Eigen::VectorXd mnar_features(const Matrix& history, const Eigen::VectorXd& delta_t,
                              double window_hours, double sub_step_hours);

// Compression applied to psi before the embedding map: log1p on the
// unbounded time-gap and count blocks, rates passed through.
Matrix transform_psi(const Matrix& psi, int n_structured);

// Embedded psi fed to the gates (zeros when MNAR features are disabled).
Var embed_psi(const Matrix& psi, const EncoderParams& params);

// One gated update. dropout_mask (same shape as the candidate, already
// scaled by 1/(1-p)) is applied on the candidate path when given.
Var grud_step(const Var& previous, const Var& imputed, const Var& psi_embedded,
              const Var& hidden_decay, const EncoderParams& params,
              const Matrix* dropout_mask = nullptr);

// Per-episode encoder inputs over the fine grid (T = steps * sub_steps).
struct StructuredInputs {
  Matrix values;         // normalized, 0 where unobserved
  Matrix mask;           // 0/1
  Matrix last_observed;  // normalized value last seen before t (0 = mean)
  Matrix deltas;         // hours since last observation
  Matrix psi;            // transformed psi [T x 4D]
  int sub_steps = 0;     // per decision step
};

// Normalizes one episode and derives its per-sub-step inputs. Throws if a
// decision step carries no sub-steps.
StructuredInputs prepare_structured(const sim::Episode& episode,
                                    const sim::NormalizationStats& stats,
                                    double window_hours, double sub_step_hours);

// Runs the recurrence over one episode and returns the hidden state at the
// last sub-step of every decision step [steps x hidden] (no dropout).
Matrix encode_structured(const StructuredInputs& inputs, const EncoderParams& params);
Matrix encode_structured(const sim::Episode& episode, const EncoderParams& params,
                         const sim::NormalizationStats& stats, double window_hours,
                         double sub_step_hours);

}  // namespace mnarrl::encoder
