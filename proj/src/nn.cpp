#include "mnarrl/nn.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace mnarrl::nn {

void ParameterList::add(std::string name, Var var) {
  items_.push_back({std::move(name), std::move(var)});
}

void ParameterList::extend(const ParameterList& other) {
  for (const auto& p : other.items_) items_.push_back(p);
}

std::size_t ParameterList::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += static_cast<std::size_t>(p.var.value().size());
  return n;
}

void ParameterList::zero_grad() {
  for (auto& p : items_) p.var.zero_grad();
}

std::uint64_t ParameterList::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : items_) {
    const Matrix& m = p.var.value();
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    const std::size_t n = static_cast<std::size_t>(m.size()) * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::vector<Matrix> ParameterList::snapshot() const {
  std::vector<Matrix> out;
  out.reserve(items_.size());
  for (const auto& p : items_) out.push_back(p.var.value());
  return out;
}

void ParameterList::restore(const std::vector<Matrix>& values) {
  if (values.size() != items_.size()) {
    throw std::invalid_argument("ParameterList::restore: count mismatch");
  }
  for (std::size_t i = 0; i < items_.size(); ++i) {
    auto& dst = items_[i].var.mutable_value();
    if (dst.rows() != values[i].rows() || dst.cols() != values[i].cols()) {
      throw std::invalid_argument("ParameterList::restore: shape mismatch for " +
                                  items_[i].name);
    }
    dst = values[i];
  }
}

Matrix init_uniform(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

Matrix init_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

Linear::Linear(int in, int out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = ad::parameter(init_uniform(in, out, bound, rng));
  bias = ad::parameter(init_uniform(1, out, bound, rng));
}

void Linear::register_parameters(const std::string& prefix,
                                 ParameterList& list) const {
  list.add(prefix + ".weight", weight);
  list.add(prefix + ".bias", bias);
}

Mlp::Mlp(const std::vector<int>& widths, Rng& rng) {
  if (widths.size() < 2) throw std::invalid_argument("Mlp: need >= 2 widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    layers_.emplace_back(widths[i], widths[i + 1], rng);
  }
}

Var Mlp::operator()(const Var& x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size()) h = ad::relu(h);
  }
  return h;
}

void Mlp::register_parameters(const std::string& prefix,
                              ParameterList& list) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].register_parameters(prefix + "." + std::to_string(i), list);
  }
}

GruCell::GruCell(int input, int hidden_size, Rng& rng)
    : input_gates(input, 3 * hidden_size, rng),
      hidden_gates(hidden_size, 3 * hidden_size, rng),
      hidden(hidden_size) {
  // Uniform(+-1/sqrt(hidden)) for both maps, matching the usual GRU init.
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_size));
  input_gates.weight.mutable_value() = init_uniform(input, 3 * hidden_size, bound, rng);
  input_gates.bias.mutable_value() = init_uniform(1, 3 * hidden_size, bound, rng);
}

Var GruCell::operator()(const Var& h, const Var& x) const {
  Var gi = input_gates(x);
  Var gh = hidden_gates(h);
  Var r = ad::sigmoid(ad::add(ad::slice_cols(gi, 0, hidden),
                              ad::slice_cols(gh, 0, hidden)));
  Var z = ad::sigmoid(ad::add(ad::slice_cols(gi, hidden, hidden),
                              ad::slice_cols(gh, hidden, hidden)));
  Var n = ad::tanh(ad::add(ad::slice_cols(gi, 2 * hidden, hidden),
                           ad::mul(r, ad::slice_cols(gh, 2 * hidden, hidden))));
  return ad::add(ad::mul(ad::one_minus(z), n), ad::mul(z, h));
}

void GruCell::register_parameters(const std::string& prefix,
                                  ParameterList& list) const {
  input_gates.register_parameters(prefix + ".input", list);
  hidden_gates.register_parameters(prefix + ".hidden", list);
}

LayerNorm::LayerNorm(int dim)
    : gamma(ad::parameter(Matrix::Ones(1, dim))),
      beta(ad::parameter(Matrix::Zero(1, dim))) {}

void LayerNorm::register_parameters(const std::string& prefix,
                                    ParameterList& list) const {
  list.add(prefix + ".gamma", gamma);
  list.add(prefix + ".beta", beta);
}

double grad_norm(const ParameterList& params) {
  double sq = 0.0;
  for (const auto& p : params.items()) {
    if (p.var.has_grad()) sq += p.var.grad().squaredNorm();
  }
  return std::sqrt(sq);
}

ClipResult clip_grad_norm(const ParameterList& params, double max_norm) {
  ClipResult result;
  result.norm_before = grad_norm(params);
  if (result.norm_before > max_norm && result.norm_before > 0.0) {
    const double factor = max_norm / result.norm_before;
    for (const auto& p : params.items()) {
      if (p.var.has_grad()) {
        Var v = p.var;
        v.mutable_grad() *= factor;
      }
    }
  }
  result.norm_after = grad_norm(params);
  return result;
}

AdamW::AdamW(ParameterList params, Options options)
    : params_(std::move(params)), options_(options) {
  reset_state();
}

void AdamW::reset_state() {
  m_.clear();
  v_.clear();
  for (const auto& p : params_.items()) {
    m_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
    v_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
  }
  step_count_ = 0;
}

void AdamW::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_count_));
  const auto& items = params_.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    Var p = items[i].var;
    if (!p.has_grad()) continue;
    Matrix& w = p.mutable_value();
    w *= 1.0 - options_.lr * options_.weight_decay;
    const Matrix& g = p.grad();
    m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * g;
    v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * g.cwiseProduct(g);
    w.array() -= options_.lr * (m_[i].array() / bc1) /
                 ((v_[i].array() / bc2).sqrt() + options_.eps);
  }
}

}  // namespace mnarrl::nn
