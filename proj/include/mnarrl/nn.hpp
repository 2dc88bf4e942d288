#pragma once

// Layers, parameter registry, and the optimizer used by every trainable head.

#include "mnarrl/ad.hpp"
#include "mnarrl/rng.hpp"

#include <string>
#include <utility>
#include <vector>

namespace mnarrl::nn {

using ad::Matrix;
using ad::Var;

struct NamedParameter {
  std::string name;
  Var var;
};

// Ordered list of named parameters. Order is registration order and is
// what checkpoints and checksums iterate over.
class ParameterList {
 public:
  void add(std::string name, Var var);
  void extend(const ParameterList& other);
  const std::vector<NamedParameter>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();
  // FNV-1a over the raw bytes of every parameter value.
  std::uint64_t checksum() const;
  std::vector<Matrix> snapshot() const;
  void restore(const std::vector<Matrix>& values);

 private:
  std::vector<NamedParameter> items_;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
Matrix init_uniform(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng);
Matrix init_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, Rng& rng);
  Var operator()(const Var& x) const { return ad::linear(x, weight, bias); }
  void register_parameters(const std::string& prefix, ParameterList& list) const;
  int in_features() const { return static_cast<int>(weight.rows()); }
  int out_features() const { return static_cast<int>(weight.cols()); }

  Var weight;  // [in x out]
  Var bias;    // [1 x out]
};

// Linear layers with ReLU between them (none after the last).
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::vector<int>& widths, Rng& rng);
  Var operator()(const Var& x) const;
  void register_parameters(const std::string& prefix, ParameterList& list) const;
  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  std::vector<Linear> layers_;
};

// Standard GRU cell: h' = (1 - z) * n + z * h.
class GruCell {
 public:
  GruCell() = default;
  GruCell(int input, int hidden, Rng& rng);
  Var operator()(const Var& h, const Var& x) const;
  void register_parameters(const std::string& prefix, ParameterList& list) const;

  Linear input_gates;   // x -> [r, z, n]
  Linear hidden_gates;  // h -> [r, z, n]
  int hidden = 0;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int dim);
  Var operator()(const Var& x) const { return ad::layer_norm_rows(x, gamma, beta); }
  void register_parameters(const std::string& prefix, ParameterList& list) const;

  Var gamma;
  Var beta;
};

struct ClipResult {
  double norm_before = 0.0;
  double norm_after = 0.0;
};

// Rescales all gradients so their global L2 norm is at most max_norm.
ClipResult clip_grad_norm(const ParameterList& params, double max_norm);
double grad_norm(const ParameterList& params);

// Adam with decoupled weight decay.
class AdamW {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
  };

  AdamW() = default;
  AdamW(ParameterList params, Options options);
  void step();
  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }
  const ParameterList& parameters() const { return params_; }
  void reset_state();

 private:
  ParameterList params_;
  Options options_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long step_count_ = 0;
};

}  // namespace mnarrl::nn
