#include "mnarrl/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mnarrl::model {

void ModelConfig::validate() const {
  if (hidden < 1 || latent < 1 || psi_embed < 1 || attention_dim < 1 || heads < 1 ||
      action_embed < 1 || outcome_hidden < 1) {
    throw std::invalid_argument("model: dimensions must be positive");
  }
  if (attention_dim % heads != 0) throw std::invalid_argument("model: attention_dim % heads != 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("model: dropout in [0,1)");
  if (!(sigma_floor > 0.0)) throw std::invalid_argument("model: sigma_floor must be positive");
  for (int w : dynamics_widths) {
    if (w < 1) throw std::invalid_argument("model: dynamics width must be positive");
  }
  for (int w : rl_widths) {
    if (w < 1) throw std::invalid_argument("model: rl width must be positive");
  }
}

DataDims DataDims::from(const sim::SimConfig& c) {
  DataDims d;
  d.n_structured = c.n_structured;
  d.sub_steps = c.sub_steps_per_decision;
  d.n_static = c.n_static;
  d.text_modalities = c.n_text_modalities;
  d.embed_dim = c.text_embed_dim;
  d.max_notes = c.max_notes_per_modality;
  d.actions = c.action_count;
  d.horizon = c.horizon;
  d.sub_step_hours = c.sub_step_hours;
  d.window_hours = c.frequency_window_hours;
  d.discount = c.discount;
  return d;
}

ModelBundle::ModelBundle(const ModelConfig& c, const DataDims& d,
                         const sim::NormalizationStats& s, std::uint64_t seed)
    : config(c), data(d), stats(s) {
  config.validate();
  Rng enc_rng(derive_seed(seed, 1));
  encoder = encoder::EncoderParams(
      {d.n_structured, c.hidden, c.psi_embed, c.psi_embedding, c.mnar_features, c.dropout},
      enc_rng);

  fusion::FusionDims fd;
  fd.hidden = c.hidden;
  fd.text_modalities = d.text_modalities;
  fd.embed_dim = d.embed_dim;
  fd.max_notes = d.max_notes;
  fd.attention_dim = c.attention_dim;
  fd.heads = c.heads;
  fd.doc_factor = c.doc_factor;
  fd.text_channel = c.text_channel;
  Rng fus_rng(derive_seed(seed, 2));
  fusion = fusion::FusionParams(fd, fus_rng);

  belief::DynamicsDims dd;
  dd.latent = c.latent;
  dd.hidden = c.hidden;
  dd.static_features = d.n_static;
  dd.actions = d.actions;
  dd.action_embed = c.action_embed;
  dd.widths = c.dynamics_widths;
  dd.sigma_floor = c.sigma_floor;
  dd.action_conditioning = c.action_conditioning;
  dd.posterior_mode = c.posterior_conditioning;
  Rng dyn_rng(derive_seed(seed, 3));
  dynamics = belief::DynamicsParams(dd, dyn_rng);

  Rng dec_rng(derive_seed(seed, 4));
  decoders = belief::DecoderParams(
      {c.hidden, d.sub_steps * d.n_structured, d.text_modalities * d.embed_dim}, dec_rng);

  Rng rl_rng(derive_seed(seed, 5));
  heads = iql::RLHeads({c.hidden, d.actions, c.rl_widths}, rl_rng);

  Rng out_rng(derive_seed(seed, 6));
  outcome = outcome::OutcomeParams(c.hidden, c.outcome_hidden, 1, out_rng);
}

nn::ParameterList ModelBundle::encoder_parameters() const {
  nn::ParameterList list;
  encoder.register_parameters("encoder", list);
  fusion.register_parameters("fusion", list);
  dynamics.register_parameters("dynamics", list);
  return list;
}

nn::ParameterList ModelBundle::representation_parameters() const {
  nn::ParameterList list = encoder_parameters();
  decoders.register_parameters("decoders", list);
  outcome.register_parameters("outcome", list);
  return list;
}

nn::ParameterList ModelBundle::rl_parameters() const {
  nn::ParameterList list;
  heads.register_parameters("rl", list);
  return list;
}

nn::ParameterList ModelBundle::target_parameters() const {
  nn::ParameterList list;
  heads.register_target("rl", list);
  return list;
}

nn::ParameterList ModelBundle::all_parameters() const {
  nn::ParameterList list = representation_parameters();
  list.extend(rl_parameters());
  list.extend(target_parameters());
  return list;
}

PreparedEpisode prepare_episode(const sim::Episode& episode, const ModelBundle& bundle) {
  const DataDims& d = bundle.data;
  PreparedEpisode p;
  p.source = &episode;
  p.length = episode.length();
  p.structured = encoder::prepare_structured(episode, bundle.stats, d.window_hours, d.sub_step_hours);
  const int ud = d.sub_steps * d.n_structured;
  const int te = d.text_modalities * d.embed_dim;
  p.process = Matrix(p.length, d.text_modalities + 2);
  p.obs_values = Matrix(p.length, ud);
  p.obs_mask = Matrix(p.length, ud);
  p.text_targets = Matrix::Zero(p.length, te);
  p.text_weights = Matrix::Zero(p.length, te);
  p.static_features = episode.static_features.transpose();
  for (int h = 0; h < p.length; ++h) {
    const auto& step = episode.steps[static_cast<std::size_t>(h)];
    p.process.row(h) = fusion::process_features(step, bundle.stats);
    for (int u = 0; u < d.sub_steps; ++u) {
      const int t = h * d.sub_steps + u;
      p.obs_values.row(h).segment(u * d.n_structured, d.n_structured) = p.structured.values.row(t);
      p.obs_mask.row(h).segment(u * d.n_structured, d.n_structured) = p.structured.mask.row(t);
    }
    const Matrix embeds = step.text_embeds();
    for (int j = 0; j < d.text_modalities; ++j) {
      if (step.text_mask(j) > 0.5) {
        p.text_targets.row(h).segment(j * d.embed_dim, d.embed_dim) = embeds.row(j);
        p.text_weights.row(h).segment(j * d.embed_dim, d.embed_dim).setOnes();
      }
    }
  }
  return p;
}

std::vector<PreparedEpisode> prepare_episodes(const std::vector<sim::Episode>& episodes,
                                              std::span<const int> indices,
                                              const ModelBundle& bundle) {
  std::vector<PreparedEpisode> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(prepare_episode(episodes.at(static_cast<std::size_t>(i)), bundle));
  return out;
}

namespace {

Matrix noise_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = standard_normal(rng);
  return m;
}

belief::Gaussian stack(const std::vector<belief::Gaussian>& parts, std::size_t from) {
  std::vector<Var> means, stds;
  for (std::size_t i = from; i < parts.size(); ++i) {
    means.push_back(parts[i].mean);
    stds.push_back(parts[i].std);
  }
  return {ad::concat_rows(means), ad::concat_rows(stds)};
}

}  // namespace

ForwardResult forward(const ModelBundle& bundle, std::span<const PreparedEpisode* const> batch,
                      const ForwardOptions& opt) {
  if (batch.empty()) throw std::invalid_argument("forward: empty batch");
  if ((opt.dropout || opt.sample) && !opt.rng) throw std::invalid_argument("forward: rng required");
  const DataDims& d = bundle.data;
  const int b_count = static_cast<int>(batch.size());
  const int hidden = bundle.config.hidden;
  const int dn = d.n_structured;
  const int psi_cols = 4 * dn;
  int steps = 0;
  for (const auto* ep : batch) steps = std::max(steps, ep->length);

  ForwardResult r;
  r.batch = b_count;
  r.steps = steps;
  r.step_valid = Matrix::Zero(steps, b_count);
  for (int b = 0; b < b_count; ++b) {
    r.step_valid.col(b).head(batch[static_cast<std::size_t>(b)]->length).setOnes();
  }

  const Eigen::RowVectorXd zero_mean = Eigen::RowVectorXd::Zero(dn);
  const double keep = 1.0 - bundle.config.dropout;
  Var enc_state = ad::constant(Matrix::Zero(b_count, hidden));
  Var doc = ad::constant(Matrix::Zero(b_count, hidden));
  Matrix vals(b_count, dn), mask(b_count, dn), last(b_count, dn), deltas(b_count, dn);
  Matrix psi(b_count, psi_cols), process(b_count, d.text_modalities + 2);

  for (int h = 0; h < steps; ++h) {
    Matrix imputed_h(b_count, d.sub_steps * dn);
    for (int u = 0; u < d.sub_steps; ++u) {
      const int t = h * d.sub_steps + u;
      for (int b = 0; b < b_count; ++b) {
        const auto* ep = batch[static_cast<std::size_t>(b)];
        if (h < ep->length) {
          vals.row(b) = ep->structured.values.row(t);
          mask.row(b) = ep->structured.mask.row(t);
          last.row(b) = ep->structured.last_observed.row(t);
          deltas.row(b) = ep->structured.deltas.row(t);
          psi.row(b) = ep->structured.psi.row(t);
        } else {
          vals.row(b).setZero();
          mask.row(b).setZero();
          last.row(b).setZero();
          deltas.row(b).setZero();
          psi.row(b).setZero();
        }
      }
      const auto decay = encoder::decay_factors(ad::constant(deltas), bundle.encoder);
      Var imputed = encoder::impute_inputs(vals, mask, last, decay.input, zero_mean);
      imputed_h.middleCols(u * dn, dn) = imputed.value();
      Var psi_e = encoder::embed_psi(psi, bundle.encoder);
      if (opt.dropout && bundle.config.dropout > 0.0) {
        Matrix drop(b_count, hidden);
        for (Eigen::Index i = 0; i < drop.size(); ++i) {
          drop(i) = uniform01(*opt.rng) < keep ? 1.0 / keep : 0.0;
        }
        enc_state = encoder::grud_step(enc_state, imputed, psi_e, decay.hidden, bundle.encoder, &drop);
      } else {
        enc_state = encoder::grud_step(enc_state, imputed, psi_e, decay.hidden, bundle.encoder);
      }
    }
    r.imputed.push_back(std::move(imputed_h));

    std::vector<const sim::StepObservation*> step_ptrs(static_cast<std::size_t>(b_count), nullptr);
    for (int b = 0; b < b_count; ++b) {
      const auto* ep = batch[static_cast<std::size_t>(b)];
      if (h < ep->length) {
        process.row(b) = ep->process.row(h);
        step_ptrs[static_cast<std::size_t>(b)] = &ep->source->steps[static_cast<std::size_t>(h)];
      } else {
        process.row(b).setZero();
      }
    }
    const auto ds = fusion::doc_process_step(doc, process, bundle.fusion);
    doc = ds.doc;
    const auto keys = fusion::make_text_keys(step_ptrs, bundle.fusion.dims);
    Var text = fusion::cross_attend(enc_state, keys, bundle.fusion);
    r.phi.push_back(fusion::fuse(enc_state, text, doc, bundle.fusion).fused);
    r.eta.push_back(ds.eta);
  }

  const int dz = bundle.config.latent;
  Matrix statics(b_count, d.n_static);
  for (int b = 0; b < b_count; ++b) statics.row(b) = batch[static_cast<std::size_t>(b)]->static_features;
  r.prior.resize(static_cast<std::size_t>(steps));
  r.posterior.resize(static_cast<std::size_t>(steps));
  r.z.push_back(ad::constant(opt.sample ? noise_matrix(b_count, dz, *opt.rng)
                                        : Matrix::Zero(b_count, dz)));
  std::vector<int> actions(static_cast<std::size_t>(b_count));
  for (int h = 1; h < steps; ++h) {
    for (int b = 0; b < b_count; ++b) {
      const auto* ep = batch[static_cast<std::size_t>(b)];
      actions[static_cast<std::size_t>(b)] =
          h - 1 < ep->length ? ep->source->actions[static_cast<std::size_t>(h - 1)] : 0;
    }
    const Var& z_prev = r.z.back();
    r.prior[static_cast<std::size_t>(h)] =
        belief::prior_step(z_prev, r.phi[static_cast<std::size_t>(h - 1)], actions, bundle.dynamics);
    const auto post = belief::posterior(r.phi[static_cast<std::size_t>(h)], statics,
                                        bundle.dynamics, &z_prev, actions);
    r.posterior[static_cast<std::size_t>(h)] = post;
    r.z.push_back(opt.sample ? belief::sample_latent(post, noise_matrix(b_count, dz, *opt.rng))
                             : post.mean);
  }
  for (int h = 0; h < steps; ++h) {
    r.state.push_back(belief::combine_state(r.phi[static_cast<std::size_t>(h)],
                                            r.z[static_cast<std::size_t>(h)], bundle.dynamics));
  }
  return r;
}

OutcomeBatch outcome_rows(std::span<const PreparedEpisode* const> batch, int horizon) {
  OutcomeBatch out;
  std::vector<double> labels;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto* src = batch[b]->source;
    if (src->length() == horizon && src->outcome.has_value()) {
      out.rows.push_back(static_cast<int>(b));
      labels.push_back(static_cast<double>(*src->outcome));
    }
  }
  out.labels = Eigen::Map<Matrix>(labels.data(), static_cast<Eigen::Index>(labels.size()), 1);
  return out;
}

RepresentationLoss representation_loss(const ModelBundle& bundle,
                                       std::span<const PreparedEpisode* const> batch,
                                       const ForwardResult& fwd, const LossWeights& w) {
  const int b_count = fwd.batch;
  const int steps = fwd.steps;
  const int ud = bundle.data.sub_steps * bundle.data.n_structured;
  const int te = bundle.data.text_modalities * bundle.data.embed_dim;
  const int hidden = bundle.config.hidden;
  const int rows = steps * b_count;
  RepresentationLoss out;
  Var states = ad::concat_rows(fwd.state);  // row h*B + b
  Var total = ad::constant_scalar(0.0);

  if (w.recon) {
    belief::ReconTargets t;
    t.values = Matrix::Zero(rows, ud);
    t.value_weights = Matrix::Zero(rows, ud);
    t.mask = Matrix::Zero(rows, ud);
    t.mask_weights = Matrix::Zero(rows, ud);
    t.text = Matrix::Zero(rows, te);
    t.text_weights = Matrix::Zero(rows, te);
    t.eta = Matrix::Zero(rows, hidden);
    t.eta_weights = Matrix::Zero(rows, hidden);
    for (int h = 0; h < steps; ++h) {
      const Matrix& eta = fwd.eta[static_cast<std::size_t>(h)].value();
      for (int b = 0; b < b_count; ++b) {
        const auto* ep = batch[static_cast<std::size_t>(b)];
        if (h >= ep->length) continue;
        const int row = h * b_count + b;
        const auto m = ep->obs_mask.row(h).array();
        t.values.row(row) = (m * ep->obs_values.row(h).array() +
                             (1.0 - m) * fwd.imputed[static_cast<std::size_t>(h)].row(b).array())
                                .matrix();
        t.value_weights.row(row) = (m + (1.0 - m) * w.unobserved_target_weight).matrix();
        t.mask.row(row) = ep->obs_mask.row(h);
        t.mask_weights.row(row).setOnes();
        t.text.row(row) = ep->text_targets.row(h);
        t.text_weights.row(row) = ep->text_weights.row(h);
        t.eta.row(row) = eta.row(b);
        t.eta_weights.row(row).setOnes();
      }
    }
    belief::ReconWeights rw{w.obs, w.mask, w.text, bundle.config.text_channel};
    const auto rec = belief::reconstruction_loss(states, t, bundle.decoders, rw);
    out.recon = rec.total.scalar();
    out.obs = rec.obs;
    out.mask = rec.mask;
    out.text = rec.text;
    out.eta = rec.eta;
    total = ad::add(total, rec.total);
  }

  if (w.dynamics_terms && steps > 1) {
    const auto prior = stack(fwd.prior, 1);
    const auto post = stack(fwd.posterior, 1);
    std::vector<Var> zs(fwd.z.begin() + 1, fwd.z.end());
    Var z = ad::concat_rows(zs);
    Matrix tw = Matrix::Zero((steps - 1) * b_count, 1);
    for (int h = 1; h < steps; ++h) {
      for (int b = 0; b < b_count; ++b) tw((h - 1) * b_count + b, 0) = fwd.step_valid(h, b);
    }
    const double n = tw.sum();
    if (n > 0.0) {
      Var kl_dims = belief::kl_per_dim(post, prior);
      Var kl_mean = ad::matmul(ad::constant(tw.transpose() / n), kl_dims);  // [1 x d_z]
      out.kl_per_dim = kl_mean.value().row(0);
      out.kl = out.kl_per_dim.sum();
      Var kl_term = ad::sum(ad::clamp_min(kl_mean, w.free_bits));
      const Matrix dyn_w = tw.replicate(1, bundle.config.latent) / n;
      Var dyn = ad::weighted_sum(ad::square(ad::sub(z, prior.mean)), dyn_w);
      out.dynamics = dyn.scalar();
      total = ad::add(total, ad::add(ad::scale(dyn, w.dynamics), ad::scale(kl_term, w.kl)));
    }
  }

  if (w.outcome_term) {
    const auto ob = outcome_rows(batch, bundle.data.horizon);
    out.outcome_count = static_cast<int>(ob.rows.size());
    if (!ob.rows.empty()) {
      std::vector<int> idx;
      for (int b : ob.rows) {
        idx.push_back((batch[static_cast<std::size_t>(b)]->length - 1) * b_count + b);
      }
      Var terminal = ad::gather_rows(states, idx);
      Var lo = outcome::outcome_loss(terminal, ob.labels, bundle.outcome);
      out.outcome = lo.scalar();
      total = ad::add(total, ad::scale(lo, w.outcome));
    }
  }
  out.total = total;
  return out;
}

std::vector<Matrix> encode_states(const ModelBundle& bundle,
                                  const std::vector<PreparedEpisode>& episodes, int batch_size) {
  ad::NoGradGuard no_grad;
  std::vector<Matrix> out(episodes.size());
  for (std::size_t start = 0; start < episodes.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(episodes.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const PreparedEpisode*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&episodes[i]);
    const auto fwd = forward(bundle, batch, {});
    for (std::size_t i = start; i < end; ++i) {
      const int b = static_cast<int>(i - start);
      Matrix s(episodes[i].length, bundle.config.hidden);
      for (int h = 0; h < episodes[i].length; ++h) s.row(h) = fwd.state[static_cast<std::size_t>(h)].value().row(b);
      out[i] = std::move(s);
    }
  }
  return out;
}

double step_discount(const ModelBundle& bundle) {
  // One decision step spans exactly one duration unit on the uniform grid,
  // so the semi-MDP discount gamma^duration reduces to gamma.
  const double duration = 1.0;
  return bundle.config.semi_mdp ? std::pow(bundle.data.discount, duration) : bundle.data.discount;
}

std::vector<int> TransitionSet::initial_rows() const {
  std::vector<int> rows;
  for (int i = 0; i < size(); ++i) {
    if (step[static_cast<std::size_t>(i)] == 0) rows.push_back(i);
  }
  return rows;
}

TransitionSet build_transitions(const std::vector<PreparedEpisode>& episodes,
                                const std::vector<Matrix>& states, const ModelBundle& bundle) {
  TransitionSet t;
  int n = 0;
  for (const auto& ep : episodes) n += ep.length;
  const int hidden = bundle.config.hidden;
  t.states = Matrix(n, hidden);
  t.next_states = Matrix(n, hidden);
  t.rewards = Matrix(n, 1);
  t.dones = Matrix(n, 1);
  t.discounts = Matrix::Constant(n, 1, step_discount(bundle));
  int row = 0;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = episodes[e];
    const auto& src = *ep.source;
    for (int h = 0; h < ep.length; ++h, ++row) {
      const auto hs = static_cast<std::size_t>(h);
      t.states.row(row) = states[e].row(h);
      t.next_states.row(row) = states[e].row(h + 1 < ep.length ? h + 1 : h);
      t.actions.push_back(src.actions[hs]);
      t.rewards(row, 0) = src.rewards[hs];
      t.dones(row, 0) = src.dones[hs] ? 1.0 : 0.0;
      t.episode.push_back(static_cast<int>(e));
      t.step.push_back(h);
      t.behavior.push_back(src.behavior_probs[hs].transpose());
    }
  }
  return t;
}

}  // namespace mnarrl::model
