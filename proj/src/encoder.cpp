#include "mnarrl/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace mnarrl::encoder {

EncoderParams::EncoderParams(const EncoderDims& d, Rng& rng) : dims(d) {
  const int n = d.n_structured;
  std::uniform_real_distribution<double> small(0.0, 0.1);
  hidden_decay_weight = ad::parameter(Matrix::Constant(1, 1, small(rng)));
  hidden_decay_bias = ad::parameter(Matrix::Zero(1, 1));
  Matrix w(1, n);
  for (int k = 0; k < n; ++k) w(0, k) = small(rng);
  input_decay_weight = ad::parameter(w);
  input_decay_bias = ad::parameter(Matrix::Zero(1, n));
  if (d.psi_mode == PsiEmbedding::kMlp) {
    psi_mlp = nn::Mlp({4 * n, d.psi_embed, d.psi_embed}, rng);
  }
  const int p = psi_width();
  gates = nn::Linear(n + d.hidden + p, 2 * d.hidden, rng);
  candidate = nn::Linear(n + d.hidden + p, d.hidden, rng);
}

int EncoderParams::psi_width() const {
  return dims.psi_mode == PsiEmbedding::kMlp ? dims.psi_embed : 4 * dims.n_structured;
}

void EncoderParams::register_parameters(const std::string& prefix,
                                        nn::ParameterList& list) const {
  list.add(prefix + ".hidden_decay.weight", hidden_decay_weight);
  list.add(prefix + ".hidden_decay.bias", hidden_decay_bias);
  list.add(prefix + ".input_decay.weight", input_decay_weight);
  list.add(prefix + ".input_decay.bias", input_decay_bias);
  if (dims.psi_mode == PsiEmbedding::kMlp) psi_mlp.register_parameters(prefix + ".psi_mlp", list);
  gates.register_parameters(prefix + ".gates", list);
  candidate.register_parameters(prefix + ".candidate", list);
}

DecayFactors decay_factors(const Var& deltas, const EncoderParams& params) {
  const Eigen::Index d = deltas.cols();
  Var mean_delta = ad::scale(ad::row_sum(deltas), 1.0 / static_cast<double>(d));
  Var hidden_pre = ad::linear(mean_delta, params.hidden_decay_weight, params.hidden_decay_bias);
  Var input_pre = ad::add_row(ad::mul_row(deltas, params.input_decay_weight),
                              params.input_decay_bias);
  return {ad::exp(ad::neg(ad::relu(hidden_pre))), ad::exp(ad::neg(ad::relu(input_pre)))};
}

Var impute_inputs(const Matrix& values, const Matrix& mask, const Matrix& last_observed,
                  const Var& input_decay, const Eigen::RowVectorXd& mean) {
  // y_hat = m*y + (1-m)*mu + (1-m)*xi*(y_last - mu)
  const Matrix unobserved = (1.0 - mask.array()).matrix();
  Matrix base = mask.cwiseProduct(values);
  base += (unobserved.array().rowwise() * mean.array()).matrix();
  Matrix spread = last_observed;
  spread.rowwise() -= mean;
  spread = spread.cwiseProduct(unobserved);
  return ad::add(ad::constant(base), ad::mul(input_decay, ad::constant(spread)));
}

Eigen::VectorXd mnar_features(const Matrix& history, const Eigen::VectorXd& delta_t,
                              double window_hours, double sub_step_hours) {
  const Eigen::Index t = history.rows();
  const Eigen::Index d = history.cols();
  if (t < 1) throw std::invalid_argument("mnar_features: t must be >= 1");
  if (delta_t.size() != d) throw std::invalid_argument("mnar_features: delta size");
  const int window = std::max(1, static_cast<int>(std::lround(window_hours / sub_step_hours)));
  Eigen::VectorXd out(4 * d);
  for (Eigen::Index k = 0; k < d; ++k) {
    const double count = history.col(k).sum();
    const Eigen::Index start = std::max<Eigen::Index>(0, t - window);
    const double recent = history.col(k).segment(start, t - start).sum();
    out(k) = delta_t(k);
    out(d + k) = count;
    out(2 * d + k) = 1.0 - count / static_cast<double>(t);
    out(3 * d + k) = recent / window_hours;
  }
  return out;
}

Matrix transform_psi(const Matrix& psi, int n) {
  Matrix out = psi;
  out.leftCols(2 * n) = psi.leftCols(2 * n).array().log1p().matrix();
  return out;
}

Var embed_psi(const Matrix& psi, const EncoderParams& params) {
  if (!params.dims.use_mnar_features) {
    return ad::constant(Matrix::Zero(psi.rows(), params.psi_width()));
  }
  if (params.dims.psi_mode == PsiEmbedding::kLinear) return ad::constant(psi);
  return ad::relu(params.psi_mlp(ad::constant(psi)));
}

Var grud_step(const Var& previous, const Var& imputed, const Var& psi_embedded,
              const Var& hidden_decay, const EncoderParams& params,
              const Matrix* dropout_mask) {
  if (!previous.value().allFinite() || !imputed.value().allFinite() ||
      !psi_embedded.value().allFinite()) {
    throw std::invalid_argument("grud_step: non-finite input");
  }
  const int hidden = params.dims.hidden;
  Var decayed = ad::mul_col(previous, hidden_decay);
  Var gate_pre = params.gates(ad::concat_cols({imputed, decayed, psi_embedded}));
  Var gates = ad::sigmoid(gate_pre);
  Var reset = ad::slice_cols(gates, 0, hidden);
  Var update = ad::slice_cols(gates, hidden, hidden);
  Var cand = ad::tanh(
      params.candidate(ad::concat_cols({imputed, ad::mul(reset, decayed), psi_embedded})));
  if (dropout_mask) cand = ad::mul(cand, ad::constant(*dropout_mask));
  return ad::add(ad::mul(ad::one_minus(update), decayed), ad::mul(update, cand));
}

StructuredInputs prepare_structured(const sim::Episode& episode,
                                    const sim::NormalizationStats& stats,
                                    double window_hours, double sub_step_hours) {
  if (episode.steps.empty()) throw std::invalid_argument("prepare_structured: empty episode");
  const int u_count = static_cast<int>(episode.steps.front().values.rows());
  const int d = static_cast<int>(episode.steps.front().values.cols());
  const int len = episode.length();
  for (const auto& step : episode.steps) {
    if (step.values.rows() == 0 || step.values.rows() != u_count) {
      throw std::invalid_argument("prepare_structured: decision step without observation times");
    }
  }
  const int t_count = len * u_count;
  StructuredInputs in;
  in.sub_steps = u_count;
  in.values = Matrix::Zero(t_count, d);
  in.mask = Matrix::Zero(t_count, d);
  in.last_observed = Matrix::Zero(t_count, d);
  in.deltas = Matrix::Zero(t_count, d);
  Eigen::RowVectorXd last = Eigen::RowVectorXd::Zero(d);
  for (int h = 0; h < len; ++h) {
    const auto& step = episode.steps[static_cast<std::size_t>(h)];
    for (int u = 0; u < u_count; ++u) {
      const int t = h * u_count + u;
      in.last_observed.row(t) = last;
      for (int k = 0; k < d; ++k) {
        in.deltas(t, k) = step.time_gaps(u, k);
        if (step.mask(u, k) > 0.5) {
          const double z = (step.values(u, k) - stats.mean(k)) / stats.stddev(k);
          in.values(t, k) = z;
          in.mask(t, k) = 1.0;
          last(k) = z;
        }
      }
    }
  }
  const Eigen::MatrixXi no_text(len, 0);
  sim::SummaryGrid grid{sub_step_hours, u_count, 0.0};
  const auto s = sim::compute_summaries(in.mask, no_text, 1, window_hours, grid);
  Matrix psi(t_count, 4 * d);
  psi << in.deltas, s.cumulative, s.missing_rate, s.window_freq;
  in.psi = transform_psi(psi, d);
  return in;
}

Matrix encode_structured(const StructuredInputs& in, const EncoderParams& params) {
  ad::NoGradGuard no_grad;
  const int hidden = params.dims.hidden;
  const Eigen::Index t_count = in.values.rows();
  const Eigen::Index steps = t_count / in.sub_steps;
  const Eigen::RowVectorXd zero_mean = Eigen::RowVectorXd::Zero(in.values.cols());
  Matrix out(steps, hidden);
  Var state = ad::constant(Matrix::Zero(1, hidden));
  for (Eigen::Index t = 0; t < t_count; ++t) {
    Var deltas = ad::constant(in.deltas.row(t));
    const auto decay = decay_factors(deltas, params);
    Var imputed = impute_inputs(in.values.row(t), in.mask.row(t), in.last_observed.row(t),
                                decay.input, zero_mean);
    Var psi = embed_psi(in.psi.row(t), params);
    state = grud_step(state, imputed, psi, decay.hidden, params);
    if ((t + 1) % in.sub_steps == 0) out.row(t / in.sub_steps) = state.value().row(0);
  }
  return out;
}

Matrix encode_structured(const sim::Episode& episode, const EncoderParams& params,
                         const sim::NormalizationStats& stats, double window_hours,
                         double sub_step_hours) {
  return encode_structured(prepare_structured(episode, stats, window_hours, sub_step_hours),
                           params);
}

}  // namespace mnarrl::encoder
