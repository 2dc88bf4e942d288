#include "mnarrl/ad.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace mnarrl::ad {

namespace {

thread_local bool g_grad_enabled = true;

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

// Builds a result node; records the backward closure only if some input
// requires a gradient and recording is enabled.
Var make(Matrix value, std::initializer_list<Var> inputs,
         std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (const auto& in : inputs) node->inputs.push_back(in.node());
      node->backward_fn = std::move(fn);
    }
  }
  return Var(std::move(node));
}

Var make_n(Matrix value, std::span<const Var> inputs,
           std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->inputs.push_back(in.node());
      node->backward_fn = std::move(fn);
    }
  }
  return Var(std::move(node));
}

inline void acc(Node& self, std::size_t i, const Matrix& g) {
  auto& in = self.inputs[i];
  if (in->requires_grad) in->accumulate(g);
}
inline bool wants(Node& self, std::size_t i) {
  return self.inputs[i]->requires_grad;
}
inline const Matrix& val(Node& self, std::size_t i) {
  return self.inputs[i]->value;
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var constant_scalar(double value) {
  return constant(Matrix::Constant(1, 1, value));
}

Var parameter(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Var detach(const Var& x) { return constant(x.value()); }

void backward(const Var& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw std::invalid_argument("backward: loss must be 1x1");
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad.size() > 0) {
      node->backward_fn(*node);
      // Intermediate gradients are no longer needed once propagated.
      node->grad.resize(0, 0);
    }
  }
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make(a.value() + b.value(), {a, b}, [](Node& self) {
    acc(self, 0, self.grad);
    acc(self, 1, self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make(a.value() - b.value(), {a, b}, [](Node& self) {
    acc(self, 0, self.grad);
    if (wants(self, 1)) acc(self, 1, -self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  return make(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    if (wants(self, 0)) acc(self, 0, self.grad.cwiseProduct(val(self, 1)));
    if (wants(self, 1)) acc(self, 1, self.grad.cwiseProduct(val(self, 0)));
  });
}

Var minimum(const Var& a, const Var& b) {
  check_same_shape(a, b, "minimum");
  Matrix out = a.value().cwiseMin(b.value());
  return make(std::move(out), {a, b}, [](Node& self) {
    const Matrix& x = val(self, 0);
    const Matrix& y = val(self, 1);
    Matrix pick_a = (x.array() <= y.array()).cast<double>().matrix();
    if (wants(self, 0)) acc(self, 0, self.grad.cwiseProduct(pick_a));
    if (wants(self, 1)) {
      acc(self, 1,
          self.grad.cwiseProduct((1.0 - pick_a.array()).matrix()));
    }
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("add_row: shape mismatch");
  }
  Matrix out = a.value().rowwise() + row.value().row(0);
  return make(std::move(out), {a, row}, [](Node& self) {
    acc(self, 0, self.grad);
    if (wants(self, 1)) acc(self, 1, self.grad.colwise().sum());
  });
}

Var mul_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("mul_row: shape mismatch");
  }
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return make(std::move(out), {a, row}, [](Node& self) {
    const Matrix& x = val(self, 0);
    const Matrix& r = val(self, 1);
    if (wants(self, 0)) {
      Matrix g = self.grad.array().rowwise() * r.row(0).array();
      acc(self, 0, g);
    }
    if (wants(self, 1)) {
      acc(self, 1, self.grad.cwiseProduct(x).colwise().sum());
    }
  });
}

Var add_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw std::invalid_argument("add_col: shape mismatch");
  }
  Matrix out = a.value().colwise() + col.value().col(0);
  return make(std::move(out), {a, col}, [](Node& self) {
    acc(self, 0, self.grad);
    if (wants(self, 1)) acc(self, 1, self.grad.rowwise().sum());
  });
}

Var mul_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw std::invalid_argument("mul_col: shape mismatch");
  }
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  return make(std::move(out), {a, col}, [](Node& self) {
    const Matrix& x = val(self, 0);
    const Matrix& c = val(self, 1);
    if (wants(self, 0)) {
      Matrix g = self.grad.array().colwise() * c.col(0).array();
      acc(self, 0, g);
    }
    if (wants(self, 1)) {
      acc(self, 1, self.grad.cwiseProduct(x).rowwise().sum());
    }
  });
}

Var scale(const Var& a, double s) {
  return make(a.value() * s, {a},
              [s](Node& self) { acc(self, 0, self.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  Matrix out = a.value().array() + s;
  return make(std::move(out), {a},
              [](Node& self) { acc(self, 0, self.grad); });
}

Var one_minus(const Var& a) {
  Matrix out = 1.0 - a.value().array();
  return make(std::move(out), {a},
              [](Node& self) { acc(self, 0, -self.grad); });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimension mismatch");
  }
  return make(a.value() * b.value(), {a, b}, [](Node& self) {
    if (wants(self, 0)) acc(self, 0, self.grad * val(self, 1).transpose());
    if (wants(self, 1)) acc(self, 1, val(self, 0).transpose() * self.grad);
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw std::invalid_argument("linear: shape mismatch");
  }
  Matrix out = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return make(std::move(out), {x, w, b}, [](Node& self) {
    if (wants(self, 0)) acc(self, 0, self.grad * val(self, 1).transpose());
    if (wants(self, 1)) acc(self, 1, val(self, 0).transpose() * self.grad);
    if (wants(self, 2)) acc(self, 2, self.grad.colwise().sum());
  });
}

Var sigmoid(const Var& a) {
  Matrix out = a.value().unaryExpr([](double x) { return stable_sigmoid(x); });
  auto result = make(out, {a}, nullptr);
  if (result.requires_grad()) {
    result.node()->backward_fn = [](Node& self) {
      const Matrix& y = self.value;
      acc(self, 0,
          (self.grad.array() * y.array() * (1.0 - y.array())).matrix());
    };
  }
  return result;
}

Var tanh(const Var& a) {
  Matrix out = a.value().array().tanh();
  auto result = make(std::move(out), {a}, nullptr);
  if (result.requires_grad()) {
    result.node()->backward_fn = [](Node& self) {
      const Matrix& y = self.value;
      acc(self, 0,
          (self.grad.array() * (1.0 - y.array().square())).matrix());
    };
  }
  return result;
}

Var relu(const Var& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return make(std::move(out), {a}, [](Node& self) {
    const Matrix& x = val(self, 0);
    acc(self, 0,
        (self.grad.array() * (x.array() > 0.0).cast<double>()).matrix());
  });
}

Var exp(const Var& a) {
  Matrix out = a.value().array().exp();
  auto result = make(std::move(out), {a}, nullptr);
  if (result.requires_grad()) {
    result.node()->backward_fn = [](Node& self) {
      acc(self, 0, self.grad.cwiseProduct(self.value));
    };
  }
  return result;
}

Var log(const Var& a) {
  Matrix out = a.value().array().log();
  return make(std::move(out), {a}, [](Node& self) {
    acc(self, 0, self.grad.cwiseQuotient(val(self, 0)));
  });
}

Var square(const Var& a) {
  Matrix out = a.value().array().square();
  return make(std::move(out), {a}, [](Node& self) {
    acc(self, 0, 2.0 * self.grad.cwiseProduct(val(self, 0)));
  });
}

Var softplus(const Var& a) {
  Matrix out = a.value().unaryExpr([](double x) { return stable_softplus(x); });
  return make(std::move(out), {a}, [](Node& self) {
    Matrix s =
        val(self, 0).unaryExpr([](double x) { return stable_sigmoid(x); });
    acc(self, 0, self.grad.cwiseProduct(s));
  });
}

Var clamp_min(const Var& a, double floor) {
  Matrix out = a.value().cwiseMax(floor);
  return make(std::move(out), {a}, [floor](Node& self) {
    const Matrix& x = val(self, 0);
    acc(self, 0,
        (self.grad.array() * (x.array() > floor).cast<double>()).matrix());
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: rows");
    widths.push_back(p.cols());
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return make_n(std::move(out), parts, [widths](Node& self) {
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (wants(self, i)) acc(self, i, self.grad.middleCols(off, widths[i]));
      off += widths[i];
    }
  });
}

Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("slice_cols");
  }
  Matrix out = a.value().middleCols(start, count);
  return make(std::move(out), {a}, [start, count](Node& self) {
    const Matrix& x = val(self, 0);
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    g.middleCols(start, count) = self.grad;
    acc(self, 0, g);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  std::vector<Eigen::Index> heights;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: cols");
    heights.push_back(p.rows());
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
  }
  return make_n(std::move(out), parts, [heights](Node& self) {
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < heights.size(); ++i) {
      if (wants(self, i)) acc(self, i, self.grad.middleRows(off, heights[i]));
      off += heights[i];
    }
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw std::out_of_range("slice_rows");
  }
  Matrix out = a.value().middleRows(start, count);
  return make(std::move(out), {a}, [start, count](Node& self) {
    const Matrix& x = val(self, 0);
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    g.middleRows(start, count) = self.grad;
    acc(self, 0, g);
  });
}

Var gather_rows(const Var& a, std::span<const int> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw std::out_of_range("gather");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return make(std::move(out), {a}, [idx](Node& self) {
    const Matrix& x = val(self, 0);
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      g.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    }
    acc(self, 0, g);
  });
}

Var pick(const Var& a, std::span<const int> index) {
  if (static_cast<Eigen::Index>(index.size()) != a.rows()) {
    throw std::invalid_argument("pick: index size");
  }
  Matrix out(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const int j = index[static_cast<std::size_t>(i)];
    if (j < 0 || j >= a.cols()) throw std::out_of_range("pick");
    out(i, 0) = a.value()(i, j);
  }
  std::vector<int> idx(index.begin(), index.end());
  return make(std::move(out), {a}, [idx](Node& self) {
    const Matrix& x = val(self, 0);
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      g(i, idx[static_cast<std::size_t>(i)]) = self.grad(i, 0);
    }
    acc(self, 0, g);
  });
}

Var sum(const Var& a) {
  return make(Matrix::Constant(1, 1, a.value().sum()), {a}, [](Node& self) {
    const Matrix& x = val(self, 0);
    acc(self, 0, Matrix::Constant(x.rows(), x.cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return make(Matrix::Constant(1, 1, a.value().sum() / n), {a},
              [n](Node& self) {
                const Matrix& x = val(self, 0);
                acc(self, 0,
                    Matrix::Constant(x.rows(), x.cols(), self.grad(0, 0) / n));
              });
}

Var row_sum(const Var& a) {
  Matrix out = a.value().rowwise().sum();
  return make(std::move(out), {a}, [](Node& self) {
    const Matrix& x = val(self, 0);
    Matrix g = self.grad.col(0).replicate(1, x.cols());
    acc(self, 0, g);
  });
}

Var col_mean(const Var& a) {
  const double n = static_cast<double>(a.rows());
  Matrix out = a.value().colwise().sum() / n;
  return make(std::move(out), {a}, [n](Node& self) {
    const Matrix& x = val(self, 0);
    Matrix g = (self.grad.row(0) / n).replicate(x.rows(), 1);
    acc(self, 0, g);
  });
}

Var weighted_sum(const Var& a, const Matrix& w) {
  if (w.rows() != a.rows() || w.cols() != a.cols()) {
    throw std::invalid_argument("weighted_sum: shape mismatch");
  }
  return make(Matrix::Constant(1, 1, a.value().cwiseProduct(w).sum()), {a},
              [w](Node& self) { acc(self, 0, w * self.grad(0, 0)); });
}

Var softmax_rows(const Var& a) {
  Matrix out = a.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double m = out.row(i).maxCoeff();
    out.row(i) = (out.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  auto result = make(std::move(out), {a}, nullptr);
  if (result.requires_grad()) {
    result.node()->backward_fn = [](Node& self) {
      const Matrix& y = self.value;
      Eigen::VectorXd dot = self.grad.cwiseProduct(y).rowwise().sum();
      Matrix g = y.cwiseProduct(
          (self.grad.colwise() - dot).eval());
      acc(self, 0, g);
    };
  }
  return result;
}

Var log_softmax_rows(const Var& a) {
  Matrix out = a.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double m = out.row(i).maxCoeff();
    const double lse = m + std::log((out.row(i).array() - m).exp().sum());
    out.row(i).array() -= lse;
  }
  auto result = make(std::move(out), {a}, nullptr);
  if (result.requires_grad()) {
    result.node()->backward_fn = [](Node& self) {
      Matrix p = self.value.array().exp();
      Eigen::VectorXd gsum = self.grad.rowwise().sum();
      Matrix g = self.grad - (p.array().colwise() * gsum.array()).matrix();
      acc(self, 0, g);
    };
  }
  return result;
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta,
                    double eps) {
  const Eigen::Index n = x.rows();
  const Eigen::Index m = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != m || beta.rows() != 1 ||
      beta.cols() != m) {
    throw std::invalid_argument("layer_norm_rows: shape mismatch");
  }
  Matrix xhat(n, m);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return make(std::move(out), {x, gamma, beta},
              [xhat, inv_std](Node& self) {
                const Matrix& g = self.grad;
                const Matrix& gam = val(self, 1);
                if (wants(self, 0)) {
                  Matrix gx_hat = g.array().rowwise() * gam.row(0).array();
                  const double m_cols = static_cast<double>(g.cols());
                  Matrix gx(g.rows(), g.cols());
                  for (Eigen::Index i = 0; i < g.rows(); ++i) {
                    const double s1 = gx_hat.row(i).sum();
                    const double s2 = gx_hat.row(i).dot(xhat.row(i));
                    gx.row(i) = (inv_std(i) / m_cols) *
                                (m_cols * gx_hat.row(i).array() - s1 -
                                 xhat.row(i).array() * s2);
                  }
                  acc(self, 0, gx);
                }
                if (wants(self, 1)) {
                  acc(self, 1, g.cwiseProduct(xhat).colwise().sum());
                }
                if (wants(self, 2)) acc(self, 2, g.colwise().sum());
              });
}

Var bce_with_logits(const Var& logits, const Matrix& targets,
                    const Matrix& weights) {
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols() ||
      weights.rows() != logits.rows() || weights.cols() != logits.cols()) {
    throw std::invalid_argument("bce_with_logits: shape mismatch");
  }
  const Matrix& x = logits.value();
  double total = 0.0;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      total += weights(i, j) *
               (stable_softplus(x(i, j)) - targets(i, j) * x(i, j));
    }
  }
  return make(Matrix::Constant(1, 1, total), {logits},
              [targets, weights](Node& self) {
                const Matrix& z = val(self, 0);
                Matrix s = z.unaryExpr(
                    [](double v) { return stable_sigmoid(v); });
                Matrix g = weights.cwiseProduct(s - targets) * self.grad(0, 0);
                acc(self, 0, g);
              });
}

Var multi_head_attention(const Var& query, const Var& keys, const Var& values,
                         const Matrix& key_mask, int heads,
                         Matrix* weights_out) {
  const Eigen::Index batch = query.rows();
  const Eigen::Index dim = query.cols();
  const Eigen::Index slots = key_mask.cols();
  if (heads <= 0 || dim % heads != 0) {
    throw std::invalid_argument("attention: dim must divide by heads");
  }
  if (key_mask.rows() != batch || keys.rows() != batch * slots ||
      values.rows() != batch * slots || keys.cols() != dim ||
      values.cols() != dim) {
    throw std::invalid_argument("attention: shape mismatch");
  }
  const Eigen::Index hd = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const Matrix& q = query.value();
  const Matrix& k = keys.value();
  const Matrix& v = values.value();

  Matrix weights = Matrix::Zero(batch, heads * slots);
  Matrix out = Matrix::Zero(batch, dim);
  for (Eigen::Index b = 0; b < batch; ++b) {
    bool any = false;
    for (Eigen::Index s = 0; s < slots; ++s) any = any || key_mask(b, s) > 0;
    if (!any) throw std::invalid_argument("attention: sample without keys");
    for (Eigen::Index h = 0; h < heads; ++h) {
      double max_score = -std::numeric_limits<double>::infinity();
      Eigen::VectorXd score(slots);
      for (Eigen::Index s = 0; s < slots; ++s) {
        if (key_mask(b, s) > 0) {
          score(s) = inv_sqrt * q.row(b).segment(h * hd, hd).dot(
                                    k.row(b * slots + s).segment(h * hd, hd));
          max_score = std::max(max_score, score(s));
        }
      }
      double z = 0.0;
      for (Eigen::Index s = 0; s < slots; ++s) {
        if (key_mask(b, s) > 0) {
          const double e = std::exp(score(s) - max_score);
          weights(b, h * slots + s) = e;
          z += e;
        }
      }
      for (Eigen::Index s = 0; s < slots; ++s) {
        const double a = weights(b, h * slots + s) / z;
        weights(b, h * slots + s) = a;
        if (a != 0.0) {
          out.row(b).segment(h * hd, hd) +=
              a * v.row(b * slots + s).segment(h * hd, hd);
        }
      }
    }
  }
  if (weights_out) *weights_out = weights;

  return make(std::move(out), {query, keys, values},
              [weights, heads, slots, hd, inv_sqrt](Node& self) {
                const Matrix& g = self.grad;
                const Matrix& qv = val(self, 0);
                const Matrix& kv = val(self, 1);
                const Matrix& vv = val(self, 2);
                const Eigen::Index nb = qv.rows();
                Matrix gq = Matrix::Zero(qv.rows(), qv.cols());
                Matrix gk = Matrix::Zero(kv.rows(), kv.cols());
                Matrix gv = Matrix::Zero(vv.rows(), vv.cols());
                Eigen::VectorXd galpha(slots);
                for (Eigen::Index b = 0; b < nb; ++b) {
                  for (Eigen::Index h = 0; h < heads; ++h) {
                    const auto go = g.row(b).segment(h * hd, hd);
                    double dot = 0.0;
                    for (Eigen::Index s = 0; s < slots; ++s) {
                      const double a = weights(b, h * slots + s);
                      galpha(s) = go.dot(vv.row(b * slots + s).segment(h * hd, hd));
                      dot += a * galpha(s);
                      if (a != 0.0) {
                        gv.row(b * slots + s).segment(h * hd, hd) += a * go;
                      }
                    }
                    for (Eigen::Index s = 0; s < slots; ++s) {
                      const double a = weights(b, h * slots + s);
                      if (a == 0.0) continue;
                      const double gs = a * (galpha(s) - dot) * inv_sqrt;
                      gq.row(b).segment(h * hd, hd) +=
                          gs * kv.row(b * slots + s).segment(h * hd, hd);
                      gk.row(b * slots + s).segment(h * hd, hd) +=
                          gs * qv.row(b).segment(h * hd, hd);
                    }
                  }
                }
                if (wants(self, 0)) acc(self, 0, gq);
                if (wants(self, 1)) acc(self, 1, gk);
                if (wants(self, 2)) acc(self, 2, gv);
              });
}

}  // namespace mnarrl::ad
