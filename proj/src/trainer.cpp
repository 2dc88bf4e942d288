#include "mnarrl/trainer.hpp"

#include "mnarrl/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace mnarrl::train {

using nlohmann::json;

void TrainConfig::validate() const {
  if (stage1_epochs < 0 || stage2_epochs < 0 || stage3_epochs < 0) {
    throw std::invalid_argument("train: epochs must be >= 0");
  }
  if (!(stage1_lr > 0.0 && stage2_lr > 0.0 && stage3_encoder_lr > 0.0 && stage3_rl_lr > 0.0)) {
    throw std::invalid_argument("train: learning rates must be positive");
  }
  if (batch_size < 1) throw std::invalid_argument("train: batch_size >= 1");
  if (!(grad_clip > 0.0)) throw std::invalid_argument("train: grad_clip must be positive");
  if (patience < 1 || validation_every < 1) {
    throw std::invalid_argument("train: patience and validation_every must be >= 1");
  }
  if (!(anneal_fraction > 0.0 && anneal_fraction <= 1.0)) {
    throw std::invalid_argument("train: anneal_fraction in (0, 1]");
  }
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train: weight_decay >= 0");
  if (!(entropy.relative_drop > 0.0 && entropy.relative_drop < 1.0) || entropy.window < 1 ||
      !(entropy.lr_factor > 0.0) || !(entropy.beta_factor > 0.0) || entropy.max_rollbacks < 0) {
    throw std::invalid_argument("train: invalid entropy monitor settings");
  }
  if (entropy_states < 1) throw std::invalid_argument("train: entropy_states >= 1");
  rl.validate();
}

// ---- entropy monitor ----

EntropyDecision entropy_monitor(std::span<const double> history, double lr, double beta,
                                const EntropyConfig& c) {
  EntropyDecision d;
  if (history.empty()) return d;
  const std::size_t n = history.size();
  const double current = history.back();
  if (current < c.collapse_threshold) {
    d.collapse = true;
    d.reason = "entropy below collapse threshold";
  } else {
    const std::size_t first = n - 1 > static_cast<std::size_t>(c.window) ? n - 1 - static_cast<std::size_t>(c.window) : 0;
    double peak = 0.0;
    for (std::size_t i = first; i + 1 < n; ++i) peak = std::max(peak, history[i]);
    if (peak > 0.0 && current < (1.0 - c.relative_drop) * peak) {
      d.collapse = true;
      d.reason = "entropy dropped by more than the allowed fraction within the window";
    }
  }
  if (!d.collapse) return d;
  for (std::size_t i = n - 1; i-- > 0;) {
    if (history[i] > c.healthy_threshold) {
      d.rollback_epoch = static_cast<int>(i);
      break;
    }
  }
  d.new_lr = lr * c.lr_factor;
  d.new_beta = beta * c.beta_factor;
  return d;
}

bool EarlyStopper::update(double value) {
  if (value > best_) {
    best_ = value;
    stale_ = 0;
    improved_ = true;
  } else {
    ++stale_;
    improved_ = false;
  }
  return stale_ >= patience_;
}

// ---- collapse diagnostics ----

double mutual_information_proxy(const Matrix& means, const Matrix& stds, int max_samples,
                                std::uint64_t seed) {
  const int total = static_cast<int>(means.rows());
  if (total == 0) return 0.0;
  std::vector<int> idx(static_cast<std::size_t>(total));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, 31));
  if (total > max_samples) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(max_samples));
  }
  const int n = static_cast<int>(idx.size());
  const Eigen::Index d = means.cols();
  Matrix mu(n, d), sd(n, d);
  for (int i = 0; i < n; ++i) {
    mu.row(i) = means.row(idx[static_cast<std::size_t>(i)]);
    sd.row(i) = stds.row(idx[static_cast<std::size_t>(i)]);
  }
  const Eigen::VectorXd log_norm = sd.array().log().rowwise().sum();  // sum log sigma per row
  const double half_log_2pi = 0.5 * std::log(2.0 * M_PI);
  double mi = 0.0;
  Eigen::VectorXd logq(n);
  for (int i = 0; i < n; ++i) {
    Eigen::RowVectorXd eps(d);
    for (Eigen::Index k = 0; k < d; ++k) eps(k) = standard_normal(rng);
    const Eigen::RowVectorXd z = mu.row(i).array() + sd.row(i).array() * eps.array();
    for (int j = 0; j < n; ++j) {
      const auto u = ((z - mu.row(j)).array() / sd.row(j).array());
      logq(j) = -0.5 * u.square().sum() - log_norm(j) - static_cast<double>(d) * half_log_2pi;
    }
    const double top = logq.maxCoeff();
    const double log_agg = top + std::log((logq.array() - top).exp().sum()) - std::log(static_cast<double>(n));
    mi += logq(i) - log_agg;
  }
  return mi / static_cast<double>(n);
}

CollapseDiagnostics collapse_diagnostics(const model::ModelBundle& bundle,
                                         const std::vector<model::PreparedEpisode>& episodes,
                                         int mi_samples, std::uint64_t seed) {
  ad::NoGradGuard no_grad;
  const int dz = bundle.config.latent;
  std::vector<Eigen::RowVectorXd> kl_rows, mu_rows, sd_rows;
  for (std::size_t start = 0; start < episodes.size(); start += 256) {
    const std::size_t end = std::min(episodes.size(), start + 256);
    std::vector<const model::PreparedEpisode*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&episodes[i]);
    const auto fwd = model::forward(bundle, batch, {});
    for (int h = 1; h < fwd.steps; ++h) {
      const auto& q = fwd.posterior[static_cast<std::size_t>(h)];
      const auto& p = fwd.prior[static_cast<std::size_t>(h)];
      const Matrix kl = belief::kl_per_dim(q, p).value();
      for (int b = 0; b < fwd.batch; ++b) {
        if (fwd.step_valid(h, b) == 0.0) continue;
        kl_rows.push_back(kl.row(b));
        mu_rows.push_back(q.mean.value().row(b));
        sd_rows.push_back(q.std.value().row(b));
      }
    }
  }
  CollapseDiagnostics out;
  out.latent_dims = dz;
  out.kl_per_dim = Eigen::RowVectorXd::Zero(dz);
  if (kl_rows.empty()) return out;
  for (const auto& r : kl_rows) out.kl_per_dim += r;
  out.kl_per_dim /= static_cast<double>(kl_rows.size());
  out.mean_kl = out.kl_per_dim.sum();
  out.active_dims = static_cast<int>((out.kl_per_dim.array() > kActiveDimThreshold).count());
  Matrix mu(static_cast<Eigen::Index>(mu_rows.size()), dz), sd(mu.rows(), dz);
  for (std::size_t i = 0; i < mu_rows.size(); ++i) {
    mu.row(static_cast<Eigen::Index>(i)) = mu_rows[i];
    sd.row(static_cast<Eigen::Index>(i)) = sd_rows[i];
  }
  out.mutual_information = mutual_information_proxy(mu, sd, mi_samples, seed);
  return out;
}

// ---- helpers ----

Matrix policy_matrix(const model::ModelBundle& bundle, const Matrix& states) {
  return iql::policy_probs(bundle.heads.policy, states);
}

double mean_entropy(const Matrix& probs) {
  if (probs.rows() == 0) return 0.0;
  double h = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) h += iql::policy_entropy(probs.row(i));
  return h / static_cast<double>(probs.rows());
}

ope::FqeDataset fqe_dataset(const model::ModelBundle& bundle, const model::TransitionSet& t) {
  ope::FqeDataset d;
  d.states = t.states;
  d.next_states = t.next_states;
  d.actions = t.actions;
  d.rewards = t.rewards;
  d.dones = t.dones;
  d.discounts = t.discounts;
  d.next_policy = policy_matrix(bundle, t.next_states);
  const auto init = t.initial_rows();
  d.initial_states = Matrix(static_cast<Eigen::Index>(init.size()), t.states.cols());
  for (std::size_t i = 0; i < init.size(); ++i) d.initial_states.row(static_cast<Eigen::Index>(i)) = t.states.row(init[i]);
  d.initial_policy = policy_matrix(bundle, d.initial_states);
  return d;
}

ope::FqeResult run_fqe(const model::ModelBundle& bundle, const model::TransitionSet& t,
                       const FqeSettings& s, std::uint64_t seed) {
  ope::NeuralQ::Options o;
  o.widths = s.widths;
  o.epochs_per_fit = s.epochs_per_fit;
  o.batch_size = s.batch_size;
  o.lr = s.lr;
  ope::NeuralQ q(bundle.config.hidden, bundle.data.actions, o, seed);
  ope::FqeConfig fc;
  fc.iterations = s.iterations;
  return ope::fqe(fqe_dataset(bundle, t), q, fc);
}

namespace {

struct RlLoss {
  ad::Var total;
  double q = 0.0, v = 0.0, pi = 0.0, mean_weight = 0.0;
};

RlLoss rl_losses(const model::ModelBundle& bundle, const ad::Var& states, const Matrix& next_states,
                 std::span<const int> actions, const Matrix& rewards, const Matrix& dones,
                 const Matrix& discounts, double beta, const iql::RLConfig& rl) {
  const int a_count = bundle.data.actions;
  Matrix v_next;
  {
    ad::NoGradGuard no_grad;
    v_next = bundle.heads.v_target(ad::constant(next_states)).value();
  }
  const Matrix y = iql::bootstrap_target(rewards, dones, v_next, discounts);
  ad::Var q1 = iql::q_value(bundle.heads.q1, states, actions, a_count);
  ad::Var q2 = iql::q_value(bundle.heads.q2, states, actions, a_count);
  const auto ql = iql::q_loss(q1, q2, y);
  const Matrix q_min = q1.value().cwiseMin(q2.value());
  ad::Var v = bundle.heads.v(states);
  ad::Var vl = iql::value_loss(q_min, v, rl.tau);
  const Matrix adv = q_min - v.value();
  Matrix weights;
  ad::Var pl = iql::policy_loss(bundle.heads.policy(states), actions, adv, beta, rl.w_max, &weights);
  RlLoss out;
  out.total = ad::add(ad::add(ql.q1, ql.q2), ad::add(vl, pl));
  out.q = ql.q1.scalar() + ql.q2.scalar();
  out.v = vl.scalar();
  out.pi = pl.scalar();
  out.mean_weight = weights.mean();
  return out;
}

std::vector<int> shuffled(int n, Rng& rng) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

json vec_json(const Eigen::RowVectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

// Episodes from the front of the list whose steps cover `states` rows.
std::vector<model::PreparedEpisode> entropy_subset(const std::vector<model::PreparedEpisode>& eps,
                                                   int states) {
  std::vector<model::PreparedEpisode> out;
  int covered = 0;
  for (const auto& e : eps) {
    if (covered >= states) break;
    out.push_back(e);
    covered += e.length;
  }
  return out;
}

Matrix stack_states(const std::vector<Matrix>& per_episode, int limit) {
  int n = 0;
  for (const auto& m : per_episode) n += static_cast<int>(m.rows());
  n = std::min(n, limit);
  Matrix out(n, per_episode.empty() ? 0 : per_episode.front().cols());
  int row = 0;
  for (const auto& m : per_episode) {
    for (Eigen::Index r = 0; r < m.rows() && row < n; ++r) out.row(row++) = m.row(r);
  }
  return out;
}

}  // namespace

// ---- training ----

TrainResult run_training(const sim::Cohort& cohort, const model::ModelConfig& model_config,
                         const TrainConfig& cfg, const std::filesystem::path& out_dir,
                         const json& manifest_extra, const TrainHooks& hooks) {
  cfg.validate();
  const auto train_idx = cohort.indices(sim::Split::kTrain);
  const auto val_idx = cohort.indices(sim::Split::kValidation);
  if (train_idx.empty()) throw std::invalid_argument("cohort has no training split");

  TrainResult result;
  const auto stats = sim::compute_normalization(cohort.episodes, train_idx);
  result.bundle = model::ModelBundle(model_config, model::DataDims::from(cohort.config), stats,
                                     derive_seed(cfg.seed, 100));
  model::ModelBundle& bundle = result.bundle;
  const auto train_eps = model::prepare_episodes(cohort.episodes, train_idx, bundle);
  const auto val_eps = model::prepare_episodes(cohort.episodes, val_idx, bundle);
  const auto entropy_eps = entropy_subset(train_eps, cfg.entropy_states);
  Rng rng(derive_seed(cfg.seed, 200));

  std::ofstream metrics_out;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    metrics_out.open(out_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics_out) throw std::runtime_error("cannot write metrics to " + out_dir.string());
  }
  auto emit = [&](json record) {
    if (metrics_out.is_open()) metrics_out << record.dump() << "\n" << std::flush;
    result.metrics.push_back(std::move(record));
  };
  std::string last_good = "none";
  auto save = [&](const std::string& name, int stage, int epoch, const json& snapshot) {
    if (out_dir.empty()) return;
    json manifest = manifest_extra.is_object() ? manifest_extra : json::object();
    manifest["stage"] = stage;
    manifest["epoch"] = epoch;
    manifest["metrics"] = snapshot;
    const auto path = out_dir / "checkpoints" / name;
    checkpoint::save(path, bundle, manifest);
    result.checkpoints.push_back(path);
    last_good = path.string();
  };
  auto require_finite = [&](double v, int stage, int epoch) {
    if (!std::isfinite(v)) {
      throw NumericFailure("non-finite loss in stage " + std::to_string(stage) + " epoch " +
                           std::to_string(epoch) + "; last good checkpoint: " + last_good);
    }
  };
  auto clip_and_track = [&](const nn::ParameterList& params) {
    const auto c = nn::clip_grad_norm(params, cfg.grad_clip);
    result.max_clipped_grad_norm = std::max(result.max_clipped_grad_norm, c.norm_after);
    return c;
  };

  // ---- Stage 1 ----
  {
    auto params = bundle.representation_parameters();
    nn::AdamW opt(params, {cfg.stage1_lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    const int n = static_cast<int>(train_eps.size());
    const int per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const double total_steps = std::max(1, cfg.stage1_epochs * per_epoch);
    long step = 0;
    json last;
    for (int epoch = 0; epoch < cfg.stage1_epochs; ++epoch) {
      const auto order = shuffled(n, rng);
      double sum_total = 0, sum_obs = 0, sum_mask = 0, sum_text = 0, sum_eta = 0, sum_dyn = 0,
             sum_kl = 0, sum_out = 0, max_norm = 0, kl_weight = 0;
      Eigen::RowVectorXd kl_dims = Eigen::RowVectorXd::Zero(bundle.config.latent);
      for (int start = 0; start < n; start += cfg.batch_size) {
        std::vector<const model::PreparedEpisode*> batch;
        for (int i = start; i < std::min(n, start + cfg.batch_size); ++i) {
          batch.push_back(&train_eps[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
        }
        model::LossWeights w = cfg.weights;
        if (cfg.beta_annealing) {
          const double progress = static_cast<double>(step) / total_steps;
          w.kl = cfg.weights.kl * std::min(1.0, progress / cfg.anneal_fraction);
        }
        if (!cfg.free_bits) w.free_bits = 0.0;
        kl_weight = w.kl;
        const auto fwd = model::forward(bundle, batch, {true, true, &rng});
        const auto loss = model::representation_loss(bundle, batch, fwd, w);
        require_finite(loss.total.scalar(), 1, epoch);
        params.zero_grad();
        ad::backward(loss.total);
        const auto clip = clip_and_track(params);
        max_norm = std::max(max_norm, clip.norm_before);
        opt.step();
        ++step;
        const double bw = static_cast<double>(batch.size()) / n;
        sum_total += bw * loss.total.scalar();
        sum_obs += bw * loss.obs;
        sum_mask += bw * loss.mask;
        sum_text += bw * loss.text;
        sum_eta += bw * loss.eta;
        sum_dyn += bw * loss.dynamics;
        sum_kl += bw * loss.kl;
        sum_out += bw * loss.outcome;
        if (loss.kl_per_dim.size() == kl_dims.size()) kl_dims += bw * loss.kl_per_dim;
      }
      last = {{"stage", 1},
              {"epoch", epoch},
              {"loss", sum_total},
              {"obs", sum_obs},
              {"mask", sum_mask},
              {"text", sum_text},
              {"eta", sum_eta},
              {"dynamics", sum_dyn},
              {"kl", sum_kl},
              {"kl_weight", kl_weight},
              {"outcome", sum_out},
              {"kl_per_dim", vec_json(kl_dims)},
              {"active_dims", (kl_dims.array() > kActiveDimThreshold).count()},
              {"grad_norm_max", max_norm},
              {"lr", opt.lr()}};
      emit(last);
    }
    save("stage1.ckpt", 1, cfg.stage1_epochs, last);
  }

  // ---- Stage 2 ----
  const iql::RLConfig& rl = cfg.rl;
  double beta = rl.beta;
  nn::ParameterList v_online;
  bundle.heads.v.register_parameters("rl.v", v_online);
  auto target = bundle.target_parameters();
  auto rl_params = bundle.rl_parameters();
  auto all_params = bundle.all_parameters();
  EarlyStopper stopper(cfg.patience);
  std::optional<std::vector<Matrix>> best_snapshot;

  auto validate_now = [&](int stage, int epoch) -> std::optional<double> {
    if (val_eps.empty()) return std::nullopt;
    const auto states = model::encode_states(bundle, val_eps);
    const auto t = model::build_transitions(val_eps, states, bundle);
    const double v = run_fqe(bundle, t, cfg.validation_fqe,
                             derive_seed(cfg.seed, 300 + static_cast<std::uint64_t>(stage * 10000 + epoch)))
                         .value;
    require_finite(v, stage, epoch);
    return v;
  };

  {
    result.encoder_checksum_before_stage2 = bundle.representation_parameters().checksum();
    const auto train_states = model::encode_states(bundle, train_eps);
    const auto t = model::build_transitions(train_eps, train_states, bundle);
    const Matrix entropy_states = stack_states(train_states, cfg.entropy_states);
    nn::AdamW opt(rl_params, {cfg.stage2_lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    double lr = cfg.stage2_lr;
    std::vector<double> history;
    std::vector<Matrix> healthy = all_params.snapshot();
    const int n = t.size();
    json last;
    for (int epoch = 0; epoch < cfg.stage2_epochs; ++epoch) {
      const auto order = shuffled(n, rng);
      double sum_q = 0, sum_v = 0, sum_pi = 0, sum_w = 0, max_norm = 0;
      for (int start = 0; start < n; start += cfg.batch_size) {
        const int m = std::min(n, start + cfg.batch_size) - start;
        Matrix s(m, t.states.cols()), s2(m, t.states.cols()), r(m, 1), d(m, 1), g(m, 1);
        std::vector<int> a(static_cast<std::size_t>(m));
        for (int i = 0; i < m; ++i) {
          const int row = order[static_cast<std::size_t>(start + i)];
          s.row(i) = t.states.row(row);
          s2.row(i) = t.next_states.row(row);
          r(i, 0) = t.rewards(row, 0);
          d(i, 0) = t.dones(row, 0);
          g(i, 0) = t.discounts(row, 0);
          a[static_cast<std::size_t>(i)] = t.actions[static_cast<std::size_t>(row)];
        }
        const auto loss = rl_losses(bundle, ad::constant(s), s2, a, r, d, g, beta, rl);
        require_finite(loss.total.scalar(), 2, epoch);
        rl_params.zero_grad();
        ad::backward(loss.total);
        max_norm = std::max(max_norm, clip_and_track(rl_params).norm_before);
        opt.step();
        iql::polyak_update(target, v_online, rl.tau_target);
        const double bw = static_cast<double>(m) / n;
        sum_q += bw * loss.q;
        sum_v += bw * loss.v;
        sum_pi += bw * loss.pi;
        sum_w += bw * loss.mean_weight;
      }
      double entropy = mean_entropy(policy_matrix(bundle, entropy_states));
      if (hooks.entropy_override) entropy = hooks.entropy_override(2, epoch, entropy);
      history.push_back(entropy);
      last = {{"stage", 2},       {"epoch", epoch},  {"loss_q", sum_q},        {"loss_v", sum_v},
              {"loss_pi", sum_pi}, {"mean_weight", sum_w}, {"entropy", entropy}, {"lr", lr},
              {"beta", beta},     {"grad_norm_max", max_norm}};
      const auto decision = entropy_monitor(history, lr, beta, cfg.entropy);
      if (decision.collapse && result.rollbacks < cfg.entropy.max_rollbacks) {
        all_params.restore(healthy);
        opt.reset_state();
        last["event"] = {{"type", "rollback"},
                         {"reason", decision.reason},
                         {"rollback_epoch", decision.rollback_epoch},
                         {"lr_before", lr},
                         {"lr_after", decision.new_lr},
                         {"beta_before", beta},
                         {"beta_after", decision.new_beta}};
        lr = decision.new_lr;
        beta = decision.new_beta;
        opt.set_lr(lr);
        history.resize(static_cast<std::size_t>(decision.rollback_epoch + 1));
        ++result.rollbacks;
      } else if (entropy > cfg.entropy.healthy_threshold) {
        healthy = all_params.snapshot();
      }
      bool stop = false;
      if ((epoch + 1) % cfg.validation_every == 0) {
        if (const auto v = validate_now(2, epoch)) {
          last["val_fqe"] = *v;
          stop = stopper.update(*v);
          if (stopper.improved()) {
            best_snapshot = all_params.snapshot();
            result.best_validation_fqe = *v;
            save("best.ckpt", 2, epoch, last);
          }
        }
      }
      emit(last);
      if (stop) break;
    }
    if (best_snapshot) all_params.restore(*best_snapshot);
    result.encoder_checksum_after_stage2 = bundle.representation_parameters().checksum();
    if (result.encoder_checksum_after_stage2 != result.encoder_checksum_before_stage2) {
      throw std::logic_error("encoder parameters changed during frozen-encoder stage");
    }
    save("stage2.ckpt", 2, cfg.stage2_epochs, last);
  }

  // ---- Stage 3 ----
  {
    auto rep_params = bundle.representation_parameters();
    nn::ParameterList joint = rep_params;
    joint.extend(rl_params);
    nn::AdamW enc_opt(rep_params, {cfg.stage3_encoder_lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    nn::AdamW rl_opt(rl_params, {cfg.stage3_rl_lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    model::LossWeights w = cfg.weights;  // recon + outcome auxiliaries
    w.dynamics = 0.0;
    w.kl = 0.0;
    std::vector<double> history;
    std::vector<Matrix> healthy = all_params.snapshot();
    const int n = static_cast<int>(train_eps.size());
    const double step_disc = model::step_discount(bundle);
    json last;
    for (int epoch = 0; epoch < cfg.stage3_epochs; ++epoch) {
      const auto order = shuffled(n, rng);
      double sum_q = 0, sum_v = 0, sum_pi = 0, sum_recon = 0, sum_out = 0, max_norm = 0;
      Eigen::RowVectorXd kl_dims = Eigen::RowVectorXd::Zero(bundle.config.latent);
      for (int start = 0; start < n; start += cfg.batch_size) {
        std::vector<const model::PreparedEpisode*> batch;
        for (int i = start; i < std::min(n, start + cfg.batch_size); ++i) {
          batch.push_back(&train_eps[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
        }
        const int b_count = static_cast<int>(batch.size());
        const auto fwd = model::forward(bundle, batch, {true, true, &rng});
        const auto rep = model::representation_loss(bundle, batch, fwd, w);
        ad::Var stacked = ad::concat_rows(fwd.state);
        std::vector<int> rows, next_rows, actions;
        std::vector<double> rewards, dones;
        for (int b = 0; b < b_count; ++b) {
          const auto& src = *batch[static_cast<std::size_t>(b)]->source;
          const int len = batch[static_cast<std::size_t>(b)]->length;
          for (int h = 0; h < len; ++h) {
            rows.push_back(h * b_count + b);
            next_rows.push_back((h + 1 < len ? h + 1 : h) * b_count + b);
            actions.push_back(src.actions[static_cast<std::size_t>(h)]);
            rewards.push_back(src.rewards[static_cast<std::size_t>(h)]);
            dones.push_back(src.dones[static_cast<std::size_t>(h)] ? 1.0 : 0.0);
          }
        }
        const auto m = static_cast<Eigen::Index>(rows.size());
        ad::Var s = ad::gather_rows(stacked, rows);
        Matrix s2(m, bundle.config.hidden);
        for (Eigen::Index i = 0; i < m; ++i) s2.row(i) = stacked.value().row(next_rows[static_cast<std::size_t>(i)]);
        const Matrix r = Eigen::Map<const Matrix>(rewards.data(), m, 1);
        const Matrix d = Eigen::Map<const Matrix>(dones.data(), m, 1);
        const Matrix g = Matrix::Constant(m, 1, step_disc);
        const auto rl_loss = rl_losses(bundle, s, s2, actions, r, d, g, beta, rl);
        ad::Var total = ad::add(rl_loss.total, rep.total);
        require_finite(total.scalar(), 3, epoch);
        joint.zero_grad();
        ad::backward(total);
        max_norm = std::max(max_norm, clip_and_track(joint).norm_before);
        enc_opt.step();
        rl_opt.step();
        iql::polyak_update(target, v_online, rl.tau_target);
        const double bw = static_cast<double>(b_count) / n;
        sum_q += bw * rl_loss.q;
        sum_v += bw * rl_loss.v;
        sum_pi += bw * rl_loss.pi;
        sum_recon += bw * rep.recon;
        sum_out += bw * rep.outcome;
        if (rep.kl_per_dim.size() == kl_dims.size()) kl_dims += bw * rep.kl_per_dim;
      }
      const auto ent_states = model::encode_states(bundle, entropy_eps);
      double entropy = mean_entropy(policy_matrix(bundle, stack_states(ent_states, cfg.entropy_states)));
      if (hooks.entropy_override) entropy = hooks.entropy_override(3, epoch, entropy);
      history.push_back(entropy);
      last = {{"stage", 3},
              {"epoch", epoch},
              {"loss_q", sum_q},
              {"loss_v", sum_v},
              {"loss_pi", sum_pi},
              {"recon", sum_recon},
              {"outcome", sum_out},
              {"kl_per_dim", vec_json(kl_dims)},
              {"active_dims", (kl_dims.array() > kActiveDimThreshold).count()},
              {"entropy", entropy},
              {"lr_encoder", enc_opt.lr()},
              {"lr", rl_opt.lr()},
              {"beta", beta},
              {"grad_norm_max", max_norm}};
      const auto decision = entropy_monitor(history, rl_opt.lr(), beta, cfg.entropy);
      if (decision.collapse && result.rollbacks < cfg.entropy.max_rollbacks) {
        all_params.restore(healthy);
        enc_opt.reset_state();
        rl_opt.reset_state();
        last["event"] = {{"type", "rollback"},
                         {"reason", decision.reason},
                         {"rollback_epoch", decision.rollback_epoch},
                         {"lr_before", rl_opt.lr()},
                         {"lr_after", decision.new_lr},
                         {"beta_before", beta},
                         {"beta_after", decision.new_beta}};
        enc_opt.set_lr(enc_opt.lr() * cfg.entropy.lr_factor);
        rl_opt.set_lr(decision.new_lr);
        beta = decision.new_beta;
        history.resize(static_cast<std::size_t>(decision.rollback_epoch + 1));
        ++result.rollbacks;
      } else if (entropy > cfg.entropy.healthy_threshold) {
        healthy = all_params.snapshot();
      }
      bool stop = false;
      if ((epoch + 1) % cfg.validation_every == 0) {
        if (const auto v = validate_now(3, epoch)) {
          last["val_fqe"] = *v;
          stop = stopper.update(*v);
          if (stopper.improved()) {
            best_snapshot = all_params.snapshot();
            result.best_validation_fqe = *v;
            save("best.ckpt", 3, epoch, last);
          }
        }
      }
      emit(last);
      if (stop) break;
    }
    save("stage3.ckpt", 3, cfg.stage3_epochs, last);
    if (best_snapshot) all_params.restore(*best_snapshot);
  }
  result.final_beta = beta;
  return result;
}

}  // namespace mnarrl::train
