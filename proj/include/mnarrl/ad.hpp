#pragma once

// Minimal reverse-mode automatic differentiation over dense Eigen matrices.
//
// Every value is a 2-D matrix laid out as [batch rows x feature columns].
// Operations build a graph of shared nodes; backward() walks it in reverse
// topological order. Parameters are leaf nodes created with parameter().

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace mnarrl::ad {

using Matrix = Eigen::MatrixXd;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Matrix& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  // Direct access for optimizers and parameter loading. Never call on
  // intermediate results that are still referenced by a live graph.
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() { return node_->grad; }
  bool has_grad() const { return node_->grad.size() > 0; }
  void zero_grad() { node_->grad.resize(0, 0); }

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const { return node_->value(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Gradient recording is on by default; the guard disables it on this thread.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Var constant(Matrix value);
Var constant_scalar(double value);
Var parameter(Matrix value);
Var detach(const Var& x);

// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must be 1x1.
void backward(const Var& loss);

// Elementwise, identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var minimum(const Var& a, const Var& b);

// Broadcasting: row vector is [1 x m], column vector is [n x 1].
Var add_row(const Var& a, const Var& row);
Var mul_row(const Var& a, const Var& row);
Var add_col(const Var& a, const Var& col);
Var mul_col(const Var& a, const Var& col);

Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var one_minus(const Var& a);
Var neg(const Var& a);

Var matmul(const Var& a, const Var& b);
// x [n x in] * w [in x out] + b [1 x out]
Var linear(const Var& x, const Var& w, const Var& b);

Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var softplus(const Var& a);
// max(a, floor) with zero gradient below the floor.
Var clamp_min(const Var& a, double floor);

Var concat_cols(std::span<const Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var gather_rows(const Var& a, std::span<const int> rows);
// out(i) = a(i, index[i]); result [n x 1].
Var pick(const Var& a, std::span<const int> index);

Var sum(const Var& a);
Var mean(const Var& a);
Var row_sum(const Var& a);   // [n x 1]
Var col_mean(const Var& a);  // [1 x m]
// sum(w .* a) with a constant weight matrix of the same shape.
Var weighted_sum(const Var& a, const Matrix& w);

Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta,
                    double eps = 1e-5);

// sum(w .* (softplus(x) - t .* x)): binary cross-entropy on logits.
Var bce_with_logits(const Var& logits, const Matrix& targets,
                    const Matrix& weights);

// Multi-head attention with one query row per sample.
//   query  [B x d], keys/values [B*S x d] (sample b owns rows b*S..b*S+S-1),
//   key_mask [B x S] with 1 for valid keys. Every sample needs >= 1 valid key.
// Returns the concatenated head outputs [B x d]; weights_out, if given,
// receives the attention weights [B x heads*S].
Var multi_head_attention(const Var& query, const Var& keys, const Var& values,
                         const Matrix& key_mask, int heads,
                         Matrix* weights_out = nullptr);

}  // namespace mnarrl::ad
