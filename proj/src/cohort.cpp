#include "mnarrl/cohort.hpp"

#include "mnarrl/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mnarrl::sim {

namespace {

// Ground-truth process constants. Severity is centred so that a typical
// patient sits a little above 0.3; larger is sicker.
constexpr double kSeverityCentre = 0.3;
constexpr double kInitialMean = 0.3;
constexpr double kInitialStaticLoading = 0.3;
constexpr double kInitialNoise = 0.7;
constexpr double kPersistence = 0.85;
constexpr double kDrift = 0.1;
constexpr double kTransitionNoise = 0.35;
constexpr double kFluidBenefit = 0.12;
constexpr double kFluidThreshold = 0.2;
constexpr double kPressorBenefit = 0.15;
constexpr double kPressorThreshold = 1.0;
constexpr double kDeathBias = -6.0;
constexpr double kDeathSlope = 1.5;
constexpr double kOutcomeBias = -5.0;
constexpr double kOutcomeSlope = 6.5;
constexpr double kClinicianNoise = 0.6;
constexpr double kClinicianFluidThreshold = 0.8;
constexpr double kClinicianPressorThreshold = 1.8;
constexpr double kClinicianGain = 1.2;
constexpr double kValueNoise = 1.0;
constexpr double kNoteNoise = 0.5;

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Action a encodes (fluid, pressor) levels on a square grid.
int grid_side(int action_count) {
  const int side = static_cast<int>(std::lround(std::sqrt(action_count)));
  return side * side == action_count ? side : action_count;
}

struct ActionLevels {
  double fluid = 0.0;
  double pressor = 0.0;
};

ActionLevels action_levels(int action, int action_count) {
  const int side = grid_side(action_count);
  if (side == action_count) {
    // Non-square action spaces: a single treatment-intensity axis.
    return {2.0 * action / std::max(1, action_count - 1), 0.0};
  }
  const double scale = 2.0 / (side - 1);
  return {scale * (action / side), scale * (action % side)};
}

// Additive action effect on the next severity; its sign depends on the
// current severity (treatment helps the sick and harms the well).
double action_effect(int action, int action_count, double severity) {
  const auto lv = action_levels(action, action_count);
  return -kFluidBenefit * lv.fluid * (severity - kFluidThreshold) -
         kPressorBenefit * lv.pressor * (severity - kPressorThreshold);
}

// Per-channel constants derived deterministically from the channel index.
struct ChannelSpec {
  double base_logit;
  double loading;
  double raw_mean;
  double raw_scale;
  int component;
};

ChannelSpec channel_spec(int d, int n_structured, int severity_dim) {
  const bool vital = d < (n_structured + 1) / 2;
  ChannelSpec c{};
  c.base_logit = vital ? 0.0 : -1.7;
  c.loading = ((d % 2 == 0) ? 1.0 : -1.0) * (0.4 + 0.05 * (d % 5));
  c.raw_mean = 20.0 + 7.0 * d;
  c.raw_scale = 1.0 + 0.5 * (d % 4);
  c.component = d % severity_dim;
  return c;
}

double modality_base_logit(int j) { return j == 0 ? 0.4 : -0.85; }

// Note-embedding centres per (modality, severity band), fixed across
// cohorts so that embeddings mean the same thing in every file.
VectorXd note_centre(int modality, int band, int dim) {
  Rng rng(derive_seed(0x7e47c0de, static_cast<std::uint64_t>(modality * 16 + band)));
  VectorXd c(dim);
  for (int k = 0; k < dim; ++k) c(k) = standard_normal(rng);
  return c;
}

int severity_band(double s) {
  if (s < 0.0) return 0;
  if (s < 1.0) return 1;
  return 2;
}

int poisson(Rng& rng, double mean) {
  std::poisson_distribution<int> dist(mean);
  return dist(rng);
}

}  // namespace

void SimConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("SimConfig: " + what);
  };
  if (n_episodes < 0) fail("n_episodes must be >= 0");
  if (horizon < 2) fail("horizon must be >= 2");
  if (sub_steps_per_decision < 1) fail("sub_steps_per_decision must be >= 1");
  if (!(sub_step_hours > 0.0) || !std::isfinite(sub_step_hours))
    fail("sub_step_hours must be positive");
  if (n_structured < 1) fail("n_structured must be >= 1");
  if (n_static < 0) fail("n_static must be >= 0");
  if (n_text_modalities < 0) fail("n_text_modalities must be >= 0");
  if (text_embed_dim < 1) fail("text_embed_dim must be >= 1");
  if (max_notes_per_modality < 1) fail("max_notes_per_modality must be >= 1");
  if (latent_severity_dim < 1) fail("latent_severity_dim must be >= 1");
  if (action_count < 2) fail("action_count must be >= 2");
  if (!std::isfinite(mnar_steepness)) fail("mnar_steepness must be finite");
  if (!std::isfinite(doc_mnar_steepness)) fail("doc_mnar_steepness must be finite");
  if (!(behavior_temperature > 0.0) || !std::isfinite(behavior_temperature))
    fail("behavior_temperature must be positive and finite");
  if (!(discount >= 0.0 && discount < 1.0)) fail("discount must lie in [0, 1)");
  if (density_window_steps < 1) fail("density_window_steps must be >= 1");
  if (!(frequency_window_hours >= sub_step_hours))
    fail("frequency_window_hours must cover at least one sub-step");
}

MatrixXd StepObservation::text_embeds() const {
  const int m = static_cast<int>(text_notes.size());
  const int dim = m > 0 ? static_cast<int>(text_notes[0].cols()) : 0;
  MatrixXd out = MatrixXd::Zero(m, dim);
  for (int j = 0; j < m; ++j) {
    if (text_notes[j].rows() > 0) out.row(j) = text_notes[j].colwise().mean();
  }
  return out;
}

double Episode::total_return(double discount) const {
  double g = 0.0;
  double w = 1.0;
  for (double r : rewards) {
    g += w * r;
    w *= discount;
  }
  return g;
}

std::vector<int> Cohort::indices(Split which) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == which) out.push_back(static_cast<int>(i));
  }
  return out;
}

NormalizationStats compute_normalization(const std::vector<Episode>& episodes,
                                         std::span<const int> indices) {
  if (episodes.empty()) throw std::invalid_argument("compute_normalization: empty");
  const int d = static_cast<int>(episodes.front().steps.front().values.cols());
  VectorXd sum = VectorXd::Zero(d);
  VectorXd sq = VectorXd::Zero(d);
  VectorXd count = VectorXd::Zero(d);
  double rec_sum = 0.0, rec_sq = 0.0, den_sum = 0.0, den_sq = 0.0, steps = 0.0;
  for (int idx : indices) {
    for (const auto& step : episodes.at(static_cast<std::size_t>(idx)).steps) {
      for (Eigen::Index u = 0; u < step.mask.rows(); ++u) {
        for (int k = 0; k < d; ++k) {
          if (step.mask(u, k) > 0.5) {
            const double v = step.values(u, k);
            sum(k) += v;
            sq(k) += v * v;
            count(k) += 1.0;
          }
        }
      }
      rec_sum += step.text_recency;
      rec_sq += step.text_recency * step.text_recency;
      den_sum += step.doc_density;
      den_sq += step.doc_density * step.doc_density;
      steps += 1.0;
    }
  }
  NormalizationStats stats;
  stats.mean = VectorXd::Zero(d);
  stats.stddev = VectorXd::Ones(d);
  for (int k = 0; k < d; ++k) {
    if (count(k) > 0) {
      stats.mean(k) = sum(k) / count(k);
      const double var = std::max(0.0, sq(k) / count(k) - stats.mean(k) * stats.mean(k));
      stats.stddev(k) = std::max(std::sqrt(var), NormalizationStats::kStdFloor);
    }
  }
  if (steps > 0) {
    stats.text_recency_mean = rec_sum / steps;
    stats.text_recency_std = std::max(
        std::sqrt(std::max(0.0, rec_sq / steps - stats.text_recency_mean * stats.text_recency_mean)),
        NormalizationStats::kStdFloor);
    stats.doc_density_mean = den_sum / steps;
    stats.doc_density_std = std::max(
        std::sqrt(std::max(0.0, den_sq / steps - stats.doc_density_mean * stats.doc_density_mean)),
        NormalizationStats::kStdFloor);
  }
  return stats;
}

Episode generate_episode(const SimConfig& config, int index,
                         const SeverityPerturbation& perturbation) {
  const int h_max = config.horizon;
  const int u_max = config.sub_steps_per_decision;
  const int d_count = config.n_structured;
  const int m_count = config.n_text_modalities;
  const int k_dim = config.latent_severity_dim;
  const int a_count = config.action_count;

  Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(index)));
  Episode ep;
  ep.id = static_cast<std::uint64_t>(index);

  ep.static_features = VectorXd::Zero(config.n_static);
  for (int i = 0; i < config.n_static; ++i) {
    ep.static_features(i) = (i == 1) ? (uniform01(rng) < 0.5 ? 1.0 : 0.0)
                                     : standard_normal(rng);
  }
  double static_push = 0.0;
  for (int i = 0; i < config.n_static; ++i) {
    if (i != 1) static_push += kInitialStaticLoading * ep.static_features(i);
  }

  VectorXd severity(k_dim);
  for (int k = 0; k < k_dim; ++k) {
    severity(k) = kInitialMean + static_push + kInitialNoise * standard_normal(rng);
  }

  std::vector<ChannelSpec> channels;
  for (int d = 0; d < d_count; ++d) channels.push_back(channel_spec(d, d_count, k_dim));

  std::vector<std::array<VectorXd, 3>> centres(static_cast<std::size_t>(m_count));
  for (int j = 0; j < m_count; ++j) {
    for (int b = 0; b < 3; ++b) {
      centres[static_cast<std::size_t>(j)][static_cast<std::size_t>(b)] =
          note_centre(j, b, config.text_embed_dim);
    }
  }

  for (int h = 0; h < h_max; ++h) {
    if (h >= perturbation.from_step) severity.array() += perturbation.delta;
    const double overall = severity.mean();
    ep.true_severity.push_back(overall);

    StepObservation obs;
    obs.values = MatrixXd::Constant(u_max, d_count, kUnobserved);
    obs.mask = MatrixXd::Zero(u_max, d_count);
    for (int u = 0; u < u_max; ++u) {
      for (int d = 0; d < d_count; ++d) {
        const auto& ch = channels[static_cast<std::size_t>(d)];
        const double s = severity(ch.component);
        const double p = logistic(ch.base_logit +
                                  config.mnar_steepness * (s - kSeverityCentre));
        const double draw = uniform01(rng);
        const double noise = standard_normal(rng);
        if (draw < p) {
          obs.mask(u, d) = 1.0;
          obs.values(u, d) =
              ch.raw_mean + ch.raw_scale * (ch.loading * s + kValueNoise * noise);
        }
      }
    }

    obs.text_counts.assign(static_cast<std::size_t>(m_count), 0);
    obs.text_mask = VectorXd::Zero(m_count);
    obs.text_notes.resize(static_cast<std::size_t>(m_count));
    const int band = severity_band(overall);
    for (int j = 0; j < m_count; ++j) {
      const double p = logistic(modality_base_logit(j) +
                                config.doc_mnar_steepness * (overall - kSeverityCentre));
      const bool present = uniform01(rng) < p;
      int count = 0;
      if (present) {
        count = std::min(config.max_notes_per_modality,
                         1 + poisson(rng, 0.5 * std::exp(0.4 * overall)));
      }
      MatrixXd notes(count, config.text_embed_dim);
      for (int n = 0; n < count; ++n) {
        for (int k = 0; k < config.text_embed_dim; ++k) {
          notes(n, k) = centres[static_cast<std::size_t>(j)][static_cast<std::size_t>(band)](k) +
                        kNoteNoise * standard_normal(rng);
        }
      }
      obs.text_counts[static_cast<std::size_t>(j)] = count;
      obs.text_mask(j) = count > 0 ? 1.0 : 0.0;
      obs.text_notes[static_cast<std::size_t>(j)] = std::move(notes);
    }
    ep.steps.push_back(std::move(obs));

    // Clinician acts on a noisy reading of severity.
    const double perceived = overall + kClinicianNoise * standard_normal(rng);
    VectorXd scores(a_count);
    for (int a = 0; a < a_count; ++a) {
      const auto lv = action_levels(a, a_count);
      scores(a) = kClinicianGain *
                  (lv.fluid * (perceived - kClinicianFluidThreshold) +
                   lv.pressor * (perceived - kClinicianPressorThreshold)) /
                  config.behavior_temperature;
    }
    VectorXd probs = (scores.array() - scores.maxCoeff()).exp();
    probs /= probs.sum();
    double u = uniform01(rng);
    int action = a_count - 1;
    for (int a = 0; a < a_count; ++a) {
      u -= probs(a);
      if (u < 0.0) {
        action = a;
        break;
      }
    }
    ep.actions.push_back(action);
    ep.behavior_probs.push_back(probs);

    VectorXd next(k_dim);
    for (int k = 0; k < k_dim; ++k) {
      next(k) = kPersistence * severity(k) + kDrift +
                action_effect(action, a_count, severity(k)) +
                kTransitionNoise * standard_normal(rng);
    }
    const double death_p = logistic(kDeathBias + kDeathSlope * next.mean());
    const bool died = uniform01(rng) < death_p;
    const double outcome_draw = uniform01(rng);
    if (died) {
      ep.rewards.push_back(-1.0);
      ep.dones.push_back(1);
      break;
    }
    if (h == h_max - 1) {
      ep.rewards.push_back(1.0);
      ep.dones.push_back(1);
      const double p_out = logistic(kOutcomeBias + kOutcomeSlope * overall);
      ep.outcome = outcome_draw < p_out ? 1 : 0;
      break;
    }
    ep.rewards.push_back(0.0);
    ep.dones.push_back(0);
    severity = next;
  }

  // Derived summaries over the realized fine grid.
  const int len = ep.length();
  MatrixXd masks(len * u_max, d_count);
  Eigen::MatrixXi counts(len, m_count);
  for (int h = 0; h < len; ++h) {
    masks.middleRows(h * u_max, u_max) = ep.steps[static_cast<std::size_t>(h)].mask;
    for (int j = 0; j < m_count; ++j) {
      counts(h, j) = ep.steps[static_cast<std::size_t>(h)].text_counts[static_cast<std::size_t>(j)];
    }
  }
  SummaryGrid grid{config.sub_step_hours, u_max, config.horizon_hours()};
  const auto summaries = compute_summaries(masks, counts, config.density_window_steps,
                                           config.frequency_window_hours, grid);
  for (int h = 0; h < len; ++h) {
    auto& step = ep.steps[static_cast<std::size_t>(h)];
    step.time_gaps = summaries.time_gaps.middleRows(h * u_max, u_max);
    step.text_recency = summaries.text_recency(h);
    step.doc_density = summaries.doc_density(h);
  }
  return ep;
}

std::vector<Episode> generate_cohort(const SimConfig& config) {
  config.validate();
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(config.n_episodes));
  for (int i = 0; i < config.n_episodes; ++i) out.push_back(generate_episode(config, i));
  return out;
}

ObservationSummaries compute_summaries(const MatrixXd& masks,
                                       const Eigen::MatrixXi& counts,
                                       int density_window_steps,
                                       double frequency_window_hours,
                                       const SummaryGrid& grid) {
  if (density_window_steps < 1 || !(frequency_window_hours > 0.0)) {
    throw std::invalid_argument("compute_summaries: windows must be >= 1");
  }
  const Eigen::Index t_count = masks.rows();
  const Eigen::Index d_count = masks.cols();
  const Eigen::Index h_count = counts.rows();
  if (h_count * grid.sub_steps_per_decision != t_count) {
    throw std::invalid_argument("compute_summaries: masks/counts length mismatch");
  }
  const double dt = grid.sub_step_hours;
  const int window = std::max(
      1, static_cast<int>(std::lround(frequency_window_hours / dt)));

  ObservationSummaries out;
  out.time_gaps = MatrixXd::Zero(t_count, d_count);
  out.cumulative = MatrixXd::Zero(t_count, d_count);
  out.missing_rate = MatrixXd::Zero(t_count, d_count);
  out.window_freq = MatrixXd::Zero(t_count, d_count);
  for (Eigen::Index d = 0; d < d_count; ++d) {
    double gap = 0.0;
    double cum = 0.0;
    double in_window = 0.0;
    for (Eigen::Index t = 0; t < t_count; ++t) {
      const bool seen = masks(t, d) > 0.5;
      // Time since last observation grows from admission, resets on a reading.
      gap = seen ? 0.0 : gap + dt;
      cum += seen ? 1.0 : 0.0;
      in_window += seen ? 1.0 : 0.0;
      if (t - window >= 0 && masks(t - window, d) > 0.5) in_window -= 1.0;
      out.time_gaps(t, d) = gap;
      out.cumulative(t, d) = cum;
      out.missing_rate(t, d) = 1.0 - cum / static_cast<double>(t + 1);
      out.window_freq(t, d) = in_window / frequency_window_hours;
    }
  }

  out.text_recency = VectorXd::Zero(h_count);
  out.doc_density = VectorXd::Zero(h_count);
  const double step_hours = dt * grid.sub_steps_per_decision;
  double recency = grid.recency_cap_hours;
  for (Eigen::Index h = 0; h < h_count; ++h) {
    const int notes = counts.row(h).sum();
    recency = notes > 0 ? 0.0 : std::min(recency + step_hours, grid.recency_cap_hours);
    out.text_recency(h) = recency;
    double total = 0.0;
    for (Eigen::Index u = h - density_window_steps + 1; u <= h; ++u) {
      if (u >= 0) total += counts.row(u).sum();
    }
    out.doc_density(h) = total / density_window_steps;
  }
  return out;
}

std::vector<std::vector<int>> split_indices(int n, std::span<const double> fractions,
                                            std::uint64_t seed) {
  if (fractions.empty()) throw std::invalid_argument("split: no fractions");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw std::invalid_argument("split: fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split: fractions must sum to 1");
  if (n < static_cast<int>(fractions.size())) {
    throw std::invalid_argument("split: fewer episodes than splits");
  }
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x5911));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<int>> groups(fractions.size());
  std::size_t offset = 0;
  for (std::size_t g = 0; g < fractions.size(); ++g) {
    const std::size_t size =
        g + 1 < fractions.size()
            ? static_cast<std::size_t>(std::floor(fractions[g] * n + 1e-9))
            : static_cast<std::size_t>(n) - offset;
    groups[g].assign(order.begin() + static_cast<std::ptrdiff_t>(offset),
                     order.begin() + static_cast<std::ptrdiff_t>(offset + size));
    std::sort(groups[g].begin(), groups[g].end());
    offset += size;
  }
  return groups;
}

void split_cohort(Cohort& cohort, std::span<const double> fractions,
                  std::uint64_t seed) {
  if (fractions.size() > 3) throw std::invalid_argument("split: at most 3 groups");
  const auto groups =
      split_indices(static_cast<int>(cohort.episodes.size()), fractions, seed);
  cohort.split.assign(cohort.episodes.size(), Split::kTrain);
  // Two groups are train/test; three are train/validation/test.
  for (std::size_t g = 0; g < groups.size(); ++g) {
    Split label = static_cast<Split>(g);
    if (groups.size() == 2 && g == 1) label = Split::kTest;
    for (int i : groups[g]) cohort.split[static_cast<std::size_t>(i)] = label;
  }
}

}  // namespace mnarrl::sim
