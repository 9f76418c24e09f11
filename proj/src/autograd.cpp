#include "hsdial/autograd.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace hsdial::ag {

Var parameter(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

bool needs_grad(const Var& v) { return v && v->requires_grad; }

Var Tape::constant(Matrix value) const {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

Var Tape::make(Matrix value, bool inputs_need_grad, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (record_ && inputs_need_grad) {
    n->requires_grad = true;
    Node* self = n.get();
    n->backward = [self, f = std::move(bw)]() { f(*self); };
    nodes_.push_back(n);
  }
  return n;
}

void Tape::backward(const Var& root) {
  if (root->value.size() != 1) {
    throw std::invalid_argument("backward(root) requires a scalar root");
  }
  backward(root, Matrix::Ones(1, 1));
}

void Tape::backward(const Var& root, const Matrix& seed) {
  if (!root->requires_grad) return;
  root->accumulate(seed);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.backward && n.grad.size() != 0) n.backward();
  }
}

Var matmul(Tape& t, const Var& a, const Var& b) {
  return t.make(a->value * b->value, needs_grad(a) || needs_grad(b), [a, b](Node& out) {
    if (a->requires_grad) a->accumulate(out.grad * b->value.transpose());
    if (b->requires_grad) b->accumulate(a->value.transpose() * out.grad);
  });
}

Var matmul_nt(Tape& t, const Var& a, const Var& b) {
  return t.make(a->value * b->value.transpose(), needs_grad(a) || needs_grad(b), [a, b](Node& out) {
    if (a->requires_grad) a->accumulate(out.grad * b->value);
    if (b->requires_grad) b->accumulate(out.grad.transpose() * a->value);
  });
}

Var add(Tape& t, const Var& a, const Var& b) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols()) {
    throw std::invalid_argument("add: shape mismatch");
  }
  return t.make(a->value + b->value, needs_grad(a) || needs_grad(b), [a, b](Node& out) {
    if (a->requires_grad) a->accumulate(out.grad);
    if (b->requires_grad) b->accumulate(out.grad);
  });
}

Var add_row(Tape& t, const Var& a, const Var& row) {
  Matrix v = a->value;
  v.rowwise() += row->value.row(0);
  return t.make(std::move(v), needs_grad(a) || needs_grad(row), [a, row](Node& out) {
    if (a->requires_grad) a->accumulate(out.grad);
    if (row->requires_grad) row->accumulate(out.grad.colwise().sum());
  });
}

Var scale(Tape& t, const Var& a, double s) {
  return t.make(a->value * s, needs_grad(a), [a, s](Node& out) { a->accumulate(out.grad * s); });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Tape& t, const Var& a) {
  Matrix v = a->value.unaryExpr([](double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  });
  return t.make(std::move(v), needs_grad(a), [a](Node& out) {
    Matrix d = a->value.unaryExpr([](double x) {
      const double th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    });
    a->accumulate(out.grad.cwiseProduct(d));
  });
}

Var layer_norm(Tape& t, const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Eigen::Index n = x->value.cols();
  const Eigen::Index r = x->value.rows();
  Matrix xhat(r, n);
  Eigen::VectorXd inv_std(r);
  for (Eigen::Index i = 0; i < r; ++i) {
    const double mu = x->value.row(i).mean();
    const double var = (x->value.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x->value.row(i).array() - mu) * inv_std(i);
  }
  Matrix y = xhat.array().rowwise() * gamma->value.row(0).array();
  y.rowwise() += beta->value.row(0);
  const bool rg = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
  return t.make(std::move(y), rg, [x, gamma, beta, xhat, inv_std, n](Node& out) {
    const Matrix& dy = out.grad;
    if (gamma->requires_grad) gamma->accumulate(dy.cwiseProduct(xhat).colwise().sum());
    if (beta->requires_grad) beta->accumulate(dy.colwise().sum());
    if (x->requires_grad) {
      Matrix dxhat = dy.array().rowwise() * gamma->value.row(0).array();
      Matrix dx(dy.rows(), n);
      for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const double s1 = dxhat.row(i).sum();
        const double s2 = dxhat.row(i).dot(xhat.row(i));
        dx.row(i) = (static_cast<double>(n) * dxhat.row(i).array() - s1 - xhat.row(i).array() * s2) *
                    (inv_std(i) / static_cast<double>(n));
      }
      x->accumulate(dx);
    }
  });
}

Var embed(Tape& t, const Var& table, std::span<const int> ids) {
  Matrix v(static_cast<Eigen::Index>(ids.size()), table->value.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table->value.rows()) throw std::out_of_range("embed: id out of range");
    v.row(static_cast<Eigen::Index>(i)) = table->value.row(ids[i]);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return t.make(std::move(v), needs_grad(table), [table, idv = std::move(idv)](Node& out) {
    Matrix g = Matrix::Zero(table->value.rows(), table->value.cols());
    for (std::size_t i = 0; i < idv.size(); ++i) g.row(idv[i]) += out.grad.row(static_cast<Eigen::Index>(i));
    table->accumulate(g);
  });
}

Var rows(Tape& t, const Var& a, std::size_t begin, std::size_t count) {
  const auto b = static_cast<Eigen::Index>(begin);
  const auto c = static_cast<Eigen::Index>(count);
  if (b + c > a->value.rows()) throw std::out_of_range("rows: slice out of range");
  return t.make(a->value.middleRows(b, c), needs_grad(a), [a, b, c](Node& out) {
    Matrix g = Matrix::Zero(a->value.rows(), a->value.cols());
    g.middleRows(b, c) = out.grad;
    a->accumulate(g);
  });
}

Var attention(Tape& t, const Var& q, const Var& k, const Var& v, int heads, bool causal) {
  const Eigen::Index tq = q->value.rows();
  const Eigen::Index tk = k->value.rows();
  const Eigen::Index d = q->value.cols();
  if (d % heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
  if (causal && tq != tk) throw std::invalid_argument("attention: causal mask needs square scores");
  const Eigen::Index dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Matrix> probs(static_cast<std::size_t>(heads));
  Matrix outv(tq, d);
  for (int h = 0; h < heads; ++h) {
    const Eigen::Index c0 = h * dh;
    Matrix s = (q->value.middleCols(c0, dh) * k->value.middleCols(c0, dh).transpose()) * inv;
    if (causal) {
      for (Eigen::Index i = 0; i < tq; ++i)
        for (Eigen::Index j = i + 1; j < tk; ++j) s(i, j) = -std::numeric_limits<double>::infinity();
    }
    Matrix p = softmax_rows(s);
    outv.middleCols(c0, dh) = p * v->value.middleCols(c0, dh);
    probs[static_cast<std::size_t>(h)] = std::move(p);
  }
  const bool rg = needs_grad(q) || needs_grad(k) || needs_grad(v);
  return t.make(std::move(outv), rg, [q, k, v, heads, dh, inv, probs = std::move(probs)](Node& out) {
    Matrix dq = Matrix::Zero(q->value.rows(), q->value.cols());
    Matrix dk = Matrix::Zero(k->value.rows(), k->value.cols());
    Matrix dv = Matrix::Zero(v->value.rows(), v->value.cols());
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * dh;
      const Matrix& p = probs[static_cast<std::size_t>(h)];
      const Matrix go = out.grad.middleCols(c0, dh);
      dv.middleCols(c0, dh) = p.transpose() * go;
      Matrix dp = go * v->value.middleCols(c0, dh).transpose();
      Eigen::VectorXd rs = (dp.cwiseProduct(p)).rowwise().sum();
      Matrix ds = p.cwiseProduct(dp.colwise() - rs) * inv;
      dq.middleCols(c0, dh) = ds * k->value.middleCols(c0, dh);
      dk.middleCols(c0, dh) = ds.transpose() * q->value.middleCols(c0, dh);
    }
    if (q->requires_grad) q->accumulate(dq);
    if (k->requires_grad) k->accumulate(dk);
    if (v->requires_grad) v->accumulate(dv);
  });
}

Var log_softmax_pick(Tape& t, const Var& logits, std::span<const int> targets) {
  const Eigen::Index r = logits->value.rows();
  if (static_cast<Eigen::Index>(targets.size()) != r) {
    throw std::invalid_argument("log_softmax_pick: one target per row required");
  }
  Matrix lsm = log_softmax_rows(logits->value);
  Matrix outv(r, 1);
  for (Eigen::Index i = 0; i < r; ++i) outv(i, 0) = lsm(i, targets[static_cast<std::size_t>(i)]);
  std::vector<int> tg(targets.begin(), targets.end());
  return t.make(std::move(outv), needs_grad(logits), [logits, lsm, tg = std::move(tg)](Node& out) {
    Matrix g = -lsm.array().exp();
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      g.row(i) *= out.grad(i, 0);
      g(i, tg[static_cast<std::size_t>(i)]) += out.grad(i, 0);
    }
    logits->accumulate(g);
  });
}

Var sum(Tape& t, const Var& a) {
  Matrix v(1, 1);
  v(0, 0) = a->value.sum();
  return t.make(std::move(v), needs_grad(a), [a](Node& out) {
    a->accumulate(Matrix::Constant(a->value.rows(), a->value.cols(), out.grad(0, 0)));
  });
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(i).array() - m).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

}  // namespace hsdial::ag
