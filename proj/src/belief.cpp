#include "mnarrl/belief.hpp"

#include <cmath>
#include <stdexcept>

namespace mnarrl::belief {

namespace {

std::vector<int> with_ends(int in, const std::vector<int>& widths, int out) {
  std::vector<int> all{in};
  all.insert(all.end(), widths.begin(), widths.end());
  all.push_back(out);
  return all;
}

int posterior_input(const DynamicsDims& d) {
  int in = d.hidden + d.static_features;
  if (d.posterior_mode == PosteriorConditioning::kPhiXAZ) in += d.latent + d.action_embed;
  return in;
}

}  // namespace

DynamicsParams::DynamicsParams(const DynamicsDims& d, Rng& rng) : dims(d) {
  action_embedding = ad::parameter(nn::init_normal(d.actions, d.action_embed, 1.0, rng));
  prior = nn::Mlp(with_ends(d.latent + d.hidden + d.action_embed, d.widths, 2 * d.latent), rng);
  posterior = nn::Mlp(with_ends(posterior_input(d), d.widths, 2 * d.latent), rng);
  proj = nn::Linear(d.latent, d.hidden, rng);
}

void DynamicsParams::register_parameters(const std::string& prefix,
                                         nn::ParameterList& list) const {
  list.add(prefix + ".action_embedding", action_embedding);
  prior.register_parameters(prefix + ".prior", list);
  posterior.register_parameters(prefix + ".posterior", list);
  proj.register_parameters(prefix + ".proj", list);
}

Gaussian gaussian_from_raw(const Var& raw, int latent, double floor) {
  Var mean = ad::slice_cols(raw, 0, latent);
  Var log_var = ad::slice_cols(raw, latent, latent);
  return {mean, ad::clamp_min(ad::exp(ad::scale(log_var, 0.5)), floor)};
}

Var embed_actions(std::span<const int> actions, const DynamicsParams& params) {
  for (int a : actions) {
    if (a < 0 || a >= params.dims.actions) throw std::out_of_range("invalid action index");
  }
  if (!params.dims.action_conditioning) {
    return ad::constant(
        Matrix::Zero(static_cast<Eigen::Index>(actions.size()), params.dims.action_embed));
  }
  return ad::gather_rows(params.action_embedding, actions);
}

Gaussian prior_step(const Var& z, const Var& phi, std::span<const int> actions,
                    const DynamicsParams& params) {
  if (static_cast<Eigen::Index>(actions.size()) != z.rows()) {
    throw std::invalid_argument("prior_step: one action per row required");
  }
  Var e = embed_actions(actions, params);
  Var raw = params.prior(ad::concat_cols({z, phi, e}));
  return gaussian_from_raw(raw, params.dims.latent, params.dims.sigma_floor);
}

Gaussian posterior(const Var& phi_next, const Matrix& static_features,
                   const DynamicsParams& params, const Var* z_prev,
                   std::span<const int> actions) {
  Var raw;
  if (params.dims.posterior_mode == PosteriorConditioning::kPhiXAZ) {
    if (!z_prev || static_cast<Eigen::Index>(actions.size()) != phi_next.rows()) {
      throw std::invalid_argument("posterior: conditioning on (a, z) needs both");
    }
    Var e = embed_actions(actions, params);
    raw = params.posterior(ad::concat_cols({phi_next, ad::constant(static_features), *z_prev, e}));
  } else {
    raw = params.posterior(ad::concat_cols({phi_next, ad::constant(static_features)}));
  }
  return gaussian_from_raw(raw, params.dims.latent, params.dims.sigma_floor);
}

Var sample_latent(const Gaussian& g, const Matrix& noise) {
  return ad::add(g.mean, ad::mul(g.std, ad::constant(noise)));
}

Var kl_per_dim(const Gaussian& q, const Gaussian& p) {
  // log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2
  Var var_p = ad::square(p.std);
  Var num = ad::add(ad::square(q.std), ad::square(ad::sub(q.mean, p.mean)));
  Var ratio = ad::mul(num, ad::exp(ad::neg(ad::log(var_p))));
  Var log_term = ad::sub(ad::log(p.std), ad::log(q.std));
  return ad::add_scalar(ad::add(log_term, ad::scale(ratio, 0.5)), -0.5);
}

Var kl_diag_gaussian(const Gaussian& q, const Gaussian& p) { return ad::sum(kl_per_dim(q, p)); }

Gaussian standard_normal(Eigen::Index batch, int latent) {
  return {ad::constant(Matrix::Zero(batch, latent)), ad::constant(Matrix::Ones(batch, latent))};
}

Var dynamics_loss(const Var& z, const Var& predicted_mean) {
  Var sq = ad::row_sum(ad::square(ad::sub(z, predicted_mean)));
  return ad::mean(sq);
}

Var combine_state(const Var& phi, const Var& z, const DynamicsParams& params) {
  return ad::add(phi, params.proj(z));
}

DecoderParams::DecoderParams(const DecoderDims& d, Rng& rng) : dims(d) {
  values = nn::Mlp({d.hidden, d.hidden, d.obs_width}, rng);
  mask = nn::Mlp({d.hidden, d.hidden, d.obs_width}, rng);
  text = nn::Mlp({d.hidden, d.hidden, d.text_width}, rng);
  eta = nn::Mlp({d.hidden, d.hidden, d.hidden}, rng);
}

void DecoderParams::register_parameters(const std::string& prefix,
                                        nn::ParameterList& list) const {
  values.register_parameters(prefix + ".values", list);
  mask.register_parameters(prefix + ".mask", list);
  text.register_parameters(prefix + ".text", list);
  eta.register_parameters(prefix + ".eta", list);
}

namespace {

Var weighted_squared(const Var& pred, const Matrix& target, const Matrix& w) {
  const double n = std::max(1.0, (w.array() > 0.0).cast<double>().sum());
  return ad::scale(ad::weighted_sum(ad::square(ad::sub(pred, ad::constant(target))), w), 1.0 / n);
}

}  // namespace

ReconBreakdown reconstruction_loss(const Var& state, const ReconTargets& t,
                                   const DecoderParams& dec, const ReconWeights& w) {
  ReconBreakdown out;
  Var obs = weighted_squared(dec.values(state), t.values, t.value_weights);
  const double mask_n = std::max(1.0, (t.mask_weights.array() > 0.0).cast<double>().sum());
  Var mask = ad::scale(ad::bce_with_logits(dec.mask(state), t.mask, t.mask_weights), 1.0 / mask_n);
  out.obs = obs.scalar();
  out.mask = mask.scalar();
  Var total = ad::add(ad::scale(obs, w.obs), ad::scale(mask, w.mask));
  if (w.text_terms) {
    Var text = weighted_squared(dec.text(state), t.text, t.text_weights);
    Var eta = weighted_squared(dec.eta(state), t.eta, t.eta_weights);
    out.text = text.scalar();
    out.eta = eta.scalar();
    total = ad::add(total, ad::scale(ad::add(text, eta), w.text));
  }
  out.total = total;
  return out;
}

ProbeReport theorem1_probe(const DynamicsParams& params, const ProbeConfig& config) {
  ad::NoGradGuard no_grad;
  const int a_count = params.dims.actions;
  const int dz = params.dims.latent;
  const int dh = params.dims.hidden;
  Rng rng(mix_seed(config.seed));
  const Matrix readout = nn::init_normal(dh, 1, 1.0 / std::sqrt(static_cast<double>(dh)), rng);

  // Discounted reward-to-go from (z, phi) after taking `first` now.
  auto rollout = [&](const Matrix& z0, const Matrix& phi, int first) {
    Var phi_v = ad::constant(phi);
    Var z = ad::constant(z0);
    double ret = 0.0;
    double disc = 1.0;
    for (int k = 0; k < config.rollout_steps; ++k) {
      const int a = k == 0 ? first : config.followup_action;
      const std::vector<int> act{a};
      z = prior_step(z, phi_v, act, params).mean;
      disc *= config.discount;
      Var s = combine_state(phi_v, z, params);
      ret += disc * (s.value() * readout)(0, 0);
    }
    return ret;
  };

  ProbeReport report;
  for (int i = 0; i < config.states; ++i) {
    const Matrix z0 = nn::init_normal(1, dz, 1.0, rng);
    const Matrix phi = nn::init_normal(1, dh, 1.0, rng);
    Eigen::VectorXd q(a_count);
    for (int a = 0; a < a_count; ++a) q(a) = rollout(z0, phi, a);
    report.max_q_spread = std::max(report.max_q_spread, q.maxCoeff() - q.minCoeff());

    Eigen::VectorXd logits(a_count);
    for (int a = 0; a < a_count; ++a) logits(a) = mnarrl::standard_normal(rng);
    auto expected = [&](const Eigen::VectorXd& l) {
      const Eigen::VectorXd e = (l.array() - l.maxCoeff()).exp();
      return e.dot(q) / e.sum();
    };
    for (int a = 0; a < a_count; ++a) {
      Eigen::VectorXd hi = logits, lo = logits;
      hi(a) += config.fd_step;
      lo(a) -= config.fd_step;
      const double g = (expected(hi) - expected(lo)) / (2.0 * config.fd_step);
      report.max_abs_gradient = std::max(report.max_abs_gradient, std::abs(g));
    }
  }
  return report;
}

}  // namespace mnarrl::belief
