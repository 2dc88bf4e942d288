#include "mnarrl/outcome.hpp"

#include <stdexcept>

namespace mnarrl::outcome {

OutcomeParams::OutcomeParams(int state_dim, int hidden, int outcomes, Rng& rng) {
  for (int k = 0; k < outcomes; ++k) {
    heads.emplace_back(std::vector<int>{state_dim, hidden, 1}, rng);
    weights.push_back(1.0);
  }
}

void OutcomeParams::register_parameters(const std::string& prefix, nn::ParameterList& list) const {
  for (std::size_t k = 0; k < heads.size(); ++k) {
    heads[k].register_parameters(prefix + "." + std::to_string(k), list);
  }
}

Var outcome_loss(const Var& terminal_state, const Matrix& labels, const OutcomeParams& params) {
  if (labels.cols() != static_cast<Eigen::Index>(params.heads.size()) ||
      labels.rows() != terminal_state.rows()) {
    throw std::invalid_argument("outcome_loss: label shape");
  }
  if (labels.rows() == 0) throw std::invalid_argument("outcome_loss: empty batch");
  const Matrix w = Matrix::Constant(labels.rows(), 1, 1.0 / static_cast<double>(labels.rows()));
  Var total;
  for (std::size_t k = 0; k < params.heads.size(); ++k) {
    Var logits = params.heads[k](terminal_state);
    Var term = ad::scale(ad::bce_with_logits(logits, labels.col(static_cast<Eigen::Index>(k)), w),
                         params.weights[k]);
    total = total.defined() ? ad::add(total, term) : term;
  }
  return total;
}

Matrix predict_outcome(const Matrix& terminal_state, const OutcomeParams& params) {
  ad::NoGradGuard no_grad;
  Matrix out(terminal_state.rows(), static_cast<Eigen::Index>(params.heads.size()));
  Var s = ad::constant(terminal_state);
  for (std::size_t k = 0; k < params.heads.size(); ++k) {
    out.col(static_cast<Eigen::Index>(k)) = ad::sigmoid(params.heads[k](s)).value().col(0);
  }
  return out;
}

}  // namespace mnarrl::outcome
