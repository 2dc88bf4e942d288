#include "mnarrl/fusion.hpp"

#include <stdexcept>

namespace mnarrl::fusion {

FusionParams::FusionParams(const FusionDims& d, Rng& rng) : dims(d) {
  if (d.attention_dim % d.heads != 0) {
    throw std::invalid_argument("fusion: attention_dim must divide by heads");
  }
  doc_mlp = nn::Mlp({d.process_width(), d.hidden, d.hidden}, rng);
  doc_gru = nn::GruCell(d.hidden, d.hidden, rng);
  query = nn::Linear(d.hidden, d.attention_dim, rng);
  key = nn::Linear(d.embed_dim, d.attention_dim, rng);
  value = nn::Linear(d.embed_dim, d.attention_dim, rng);
  output = nn::Linear(d.attention_dim, d.hidden, rng);
  missing_embedding = ad::parameter(nn::init_normal(d.text_modalities, d.embed_dim, 0.1, rng));
  const double bound = 1.0 / std::sqrt(static_cast<double>(d.hidden));
  doc_projection = ad::parameter(nn::init_uniform(d.hidden, d.hidden, bound, rng));
  gate = nn::Linear(3 * d.hidden, d.hidden, rng);
  norm = nn::LayerNorm(d.hidden);
}

void FusionParams::register_parameters(const std::string& prefix,
                                       nn::ParameterList& list) const {
  doc_mlp.register_parameters(prefix + ".doc_mlp", list);
  doc_gru.register_parameters(prefix + ".doc_gru", list);
  query.register_parameters(prefix + ".query", list);
  key.register_parameters(prefix + ".key", list);
  value.register_parameters(prefix + ".value", list);
  output.register_parameters(prefix + ".output", list);
  list.add(prefix + ".missing_embedding", missing_embedding);
  list.add(prefix + ".doc_projection", doc_projection);
  gate.register_parameters(prefix + ".gate", list);
  norm.register_parameters(prefix + ".norm", list);
}

Eigen::RowVectorXd process_features(const sim::StepObservation& step,
                                    const sim::NormalizationStats& stats) {
  const Eigen::Index m = step.text_mask.size();
  Eigen::RowVectorXd out(m + 2);
  out.head(m) = step.text_mask.transpose();
  out(m) = (step.text_recency - stats.text_recency_mean) / stats.text_recency_std;
  out(m + 1) = (step.doc_density - stats.doc_density_mean) / stats.doc_density_std;
  return out;
}

DocStep doc_process_step(const Var& previous_doc, const Matrix& process,
                         const FusionParams& params) {
  Var eta = params.doc_mlp(ad::constant(process));
  if (!params.dims.doc_factor) {
    return {eta, ad::constant(Matrix::Zero(process.rows(), params.dims.hidden))};
  }
  return {eta, params.doc_gru(previous_doc, eta)};
}

TextKeys make_text_keys(const std::vector<const sim::StepObservation*>& steps,
                        const FusionDims& dims) {
  const int b_count = static_cast<int>(steps.size());
  const int slots = dims.key_slots();
  TextKeys keys;
  keys.embeddings = Matrix::Zero(b_count * slots, dims.embed_dim);
  keys.missing_select = Matrix::Zero(b_count * slots, dims.text_modalities);
  keys.key_mask = Matrix::Zero(b_count, slots);
  for (int b = 0; b < b_count; ++b) {
    const sim::StepObservation* step = steps[static_cast<std::size_t>(b)];
    for (int j = 0; j < dims.text_modalities; ++j) {
      const int base = j * dims.max_notes;
      const int count = step ? std::min(step->text_counts[static_cast<std::size_t>(j)], dims.max_notes) : 0;
      if (count == 0) {
        keys.missing_select(b * slots + base, j) = 1.0;
        keys.key_mask(b, base) = 1.0;
        continue;
      }
      const auto& notes = step->text_notes[static_cast<std::size_t>(j)];
      for (int n = 0; n < count; ++n) {
        keys.embeddings.row(b * slots + base + n) = notes.row(n);
        keys.key_mask(b, base + n) = 1.0;
      }
    }
  }
  return keys;
}

Var cross_attend(const Var& structured, const TextKeys& keys, const FusionParams& params,
                 Matrix* weights_out) {
  if (!params.dims.text_channel) {
    return ad::constant(Matrix::Zero(structured.rows(), params.dims.hidden));
  }
  Var rows = ad::add(ad::constant(keys.embeddings),
                     ad::matmul(ad::constant(keys.missing_select), params.missing_embedding));
  Var q = params.query(structured);
  Var k = params.key(rows);
  Var v = params.value(rows);
  Var attended = ad::multi_head_attention(q, k, v, keys.key_mask, params.dims.heads, weights_out);
  return params.output(attended);
}

FuseResult fuse(const Var& structured, const Var& text, const Var& doc,
                const FusionParams& params) {
  Var text_hat = ad::add(text, ad::matmul(doc, params.doc_projection));
  Var g = ad::sigmoid(params.gate(ad::concat_cols({structured, text_hat, doc})));
  Var mixed = ad::add(structured, ad::mul(g, ad::sub(text_hat, structured)));
  return {params.norm(mixed), g};
}

}  // namespace mnarrl::fusion
