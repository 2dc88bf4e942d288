#pragma once

// Post-horizon outcome heads on the terminal state s_H.

#include "mnarrl/ad.hpp"
#include "mnarrl/nn.hpp"

#include <vector>

namespace mnarrl::outcome {

using ad::Matrix;
using ad::Var;

struct OutcomeParams {
  OutcomeParams() = default;
  OutcomeParams(int state_dim, int hidden, int outcomes, Rng& rng);

  std::vector<nn::Mlp> heads;   // s -> hidden -> 1
  std::vector<double> weights;  // lambda_k

  void register_parameters(const std::string& prefix, nn::ParameterList& list) const;
};

// sum_k lambda_k * mean BCE. labels [B x K].
Var outcome_loss(const Var& terminal_state, const Matrix& labels, const OutcomeParams& params);

// Probabilities [B x K].
Matrix predict_outcome(const Matrix& terminal_state, const OutcomeParams& params);

}  // namespace mnarrl::outcome
