#include "mnarrl/iql.hpp"

#include <cmath>
#include <stdexcept>

namespace mnarrl::iql {

void RLConfig::validate() const {
  if (!(tau > 0.5 && tau < 1.0)) throw std::invalid_argument("tau must lie in (0.5, 1)");
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  if (!(w_max >= 1.0)) throw std::invalid_argument("w_max must be >= 1");
  if (!(tau_target >= 0.0 && tau_target <= 1.0)) throw std::invalid_argument("tau_target in [0,1]");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma in [0,1)");
}

namespace {

std::vector<int> widths_for(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

}  // namespace

RLHeads::RLHeads(const HeadDims& d, Rng& rng) : dims(d) {
  q1 = nn::Mlp(widths_for(d.state + d.actions, d.widths, 1), rng);
  q2 = nn::Mlp(widths_for(d.state + d.actions, d.widths, 1), rng);
  v = nn::Mlp(widths_for(d.state, d.widths, 1), rng);
  v_target = nn::Mlp(widths_for(d.state, d.widths, 1), rng);
  policy = nn::Mlp(widths_for(d.state, d.widths, d.actions), rng);
  for (std::size_t i = 0; i < v.layers().size(); ++i) {
    v_target.layers()[i].weight.mutable_value() = v.layers()[i].weight.value();
    v_target.layers()[i].bias.mutable_value() = v.layers()[i].bias.value();
  }
}

void RLHeads::register_parameters(const std::string& prefix, nn::ParameterList& list) const {
  q1.register_parameters(prefix + ".q1", list);
  q2.register_parameters(prefix + ".q2", list);
  v.register_parameters(prefix + ".v", list);
  policy.register_parameters(prefix + ".policy", list);
}

void RLHeads::register_target(const std::string& prefix, nn::ParameterList& list) const {
  v_target.register_parameters(prefix + ".v_target", list);
}

Matrix one_hot(std::span<const int> actions, int count) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(actions.size()), count);
  for (std::size_t i = 0; i < actions.size(); ++i) {
    if (actions[i] < 0 || actions[i] >= count) throw std::out_of_range("invalid action index");
    out(static_cast<Eigen::Index>(i), actions[i]) = 1.0;
  }
  return out;
}

Var q_value(const nn::Mlp& q, const Var& state, std::span<const int> actions, int action_count) {
  return q(ad::concat_cols({state, ad::constant(one_hot(actions, action_count))}));
}

Matrix q_table(const nn::Mlp& q, const Matrix& state, int action_count) {
  ad::NoGradGuard no_grad;
  const Eigen::Index n = state.rows();
  Matrix out(n, action_count);
  Var s = ad::constant(state);
  for (int a = 0; a < action_count; ++a) {
    Matrix oh = Matrix::Zero(n, action_count);
    oh.col(a).setOnes();
    out.col(a) = q(ad::concat_cols({s, ad::constant(oh)})).value().col(0);
  }
  return out;
}

Matrix bootstrap_target(const Matrix& rewards, const Matrix& dones, const Matrix& next_value,
                        double gamma) {
  return bootstrap_target(rewards, dones, next_value,
                          Matrix::Constant(rewards.rows(), rewards.cols(), gamma));
}

Matrix bootstrap_target(const Matrix& rewards, const Matrix& dones, const Matrix& next_value,
                        const Matrix& discounts) {
  Matrix y = rewards;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    // d = 1 removes the bootstrap term exactly, whatever next_value holds.
    if (dones(i) == 0.0) y(i) += discounts(i) * next_value(i);
  }
  return y;
}

double expectile_weight(double diff, double tau) { return diff < 0.0 ? 1.0 - tau : tau; }

Var value_loss(const Matrix& q_min, const Var& v, double tau) {
  const Matrix diff = q_min - v.value();
  Matrix w(diff.rows(), diff.cols());
  for (Eigen::Index i = 0; i < diff.size(); ++i) w(i) = expectile_weight(diff(i), tau);
  Var a = ad::sub(ad::constant(q_min), v);
  return ad::scale(ad::weighted_sum(ad::square(a), w), 1.0 / static_cast<double>(diff.size()));
}

QLoss q_loss(const Var& q1, const Var& q2, const Matrix& target) {
  Var t = ad::constant(target);
  return {ad::mean(ad::square(ad::sub(q1, t))), ad::mean(ad::square(ad::sub(q2, t)))};
}

Var policy_loss(const Var& logits, std::span<const int> actions, const Matrix& advantage,
                double beta, double w_max, Matrix* weights_out) {
  Matrix w(advantage.rows(), 1);
  for (Eigen::Index i = 0; i < advantage.rows(); ++i) {
    w(i, 0) = std::min(std::exp(advantage(i, 0) / beta), w_max);
  }
  if (weights_out) *weights_out = w;
  Var logp = ad::pick(ad::log_softmax_rows(logits), actions);
  return ad::scale(ad::weighted_sum(logp, w), -1.0 / static_cast<double>(w.rows()));
}

void polyak_update(const nn::ParameterList& target, const nn::ParameterList& online, double tau) {
  if (target.size() != online.size()) throw std::invalid_argument("polyak: size mismatch");
  for (std::size_t i = 0; i < target.size(); ++i) {
    Var t = target.items()[i].var;
    const Matrix& o = online.items()[i].var.value();
    t.mutable_value() = tau * o + (1.0 - tau) * t.value();
  }
}

Matrix policy_probs(const nn::Mlp& policy, const Matrix& state) {
  ad::NoGradGuard no_grad;
  return ad::softmax_rows(policy(ad::constant(state))).value();
}

double policy_entropy(const Eigen::RowVectorXd& probs) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (probs(i) > 0.0) h -= probs(i) * std::log(probs(i));
  }
  return h;
}

Selection select_action(const Matrix& phi, const Matrix& latent_mean, const Matrix& latent_std,
                        const belief::DynamicsParams& dynamics, const nn::Mlp& policy,
                        int n_samples, SelectMode mode, Rng& rng) {
  ad::NoGradGuard no_grad;
  if (phi.rows() != 1) throw std::invalid_argument("select_action: one state at a time");
  Selection sel;
  Var phi_v = ad::constant(phi);
  if (mode == SelectMode::kMeanLatent) {
    Var s = belief::combine_state(phi_v, ad::constant(latent_mean), dynamics);
    sel.probs = policy_probs(policy, s.value()).row(0);
  } else {
    if (n_samples < 1) throw std::invalid_argument("select_action: n_samples >= 1");
    Matrix noise(n_samples, latent_mean.cols());
    for (Eigen::Index i = 0; i < noise.size(); ++i) noise(i) = standard_normal(rng);
    Matrix z = (noise.array().rowwise() * latent_std.row(0).array()).matrix();
    z.rowwise() += latent_mean.row(0);
    Matrix phis = phi.replicate(n_samples, 1);
    Var s = belief::combine_state(ad::constant(phis), ad::constant(z), dynamics);
    sel.probs = policy_probs(policy, s.value()).colwise().mean();
  }
  if (mode == SelectMode::kSample) {
    std::discrete_distribution<int> dist(sel.probs.data(), sel.probs.data() + sel.probs.size());
    sel.action = dist(rng);
  } else {
    sel.probs.maxCoeff(&sel.action);
  }
  return sel;
}

}  // namespace mnarrl::iql
