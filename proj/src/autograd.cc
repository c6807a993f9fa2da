#include "hiphop/autograd.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace hiphop::ag {

const Matrix& Var::value() const { return graph->value(id); }

Var Graph::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::parameter(const Matrix* storage) {
  if (auto it = external_ids_.find(storage); it != external_ids_.end()) return {this, it->second};
  external_ids_[storage] = static_cast<int>(nodes_.size());
  Node n;
  n.external = storage;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::constant_ref(const Matrix* storage) {
  if (auto it = external_ids_.find(storage); it != external_ids_.end()) return {this, it->second};
  external_ids_[storage] = static_cast<int>(nodes_.size());
  Node n;
  n.external = storage;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::record(Matrix value, const std::vector<Var>& inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& v : inputs) {
    if (v.graph != this) throw std::logic_error("autograd: input from another graph");
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
}

const Matrix& Graph::value(int id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.value;
}

const Matrix& Graph::grad_of(const Matrix* storage) const {
  static const Matrix kEmpty;
  auto it = external_ids_.find(storage);
  return it == external_ids_.end() ? kEmpty : nodes_[it->second].grad;
}

Matrix& Graph::grad_ref(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) {
    const Matrix& v = value(id);
    n.grad = Matrix::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

void Graph::backward(Var scalar) {
  const Matrix& v = value(scalar.id);
  if (v.rows() != 1 || v.cols() != 1) throw std::logic_error("autograd: backward needs a scalar");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  grad_ref(scalar.id)(0, 0) = 1.0;
  for (int id = scalar.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.backward && n.grad.size() > 0) n.backward(*this, id);
  }
}

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string("autograd ") + op + ": shape mismatch " +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) throw std::invalid_argument("autograd matmul: inner dimension mismatch");
  return a.graph->record(av * bv, {a, b}, [a, b](Graph& g, int self) {
    const Matrix& go = g.grad({&g, self});
    if (g.requires_grad(a.id)) g.grad_ref(a.id).noalias() += go * g.value(b.id).transpose();
    if (g.requires_grad(b.id)) g.grad_ref(b.id).noalias() += g.value(a.id).transpose() * go;
  });
}

Var matmul_nt(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols()) throw std::invalid_argument("autograd matmul_nt: inner dimension mismatch");
  return a.graph->record(av * bv.transpose(), {a, b}, [a, b](Graph& g, int self) {
    const Matrix& go = g.grad({&g, self});
    if (g.requires_grad(a.id)) g.grad_ref(a.id).noalias() += go * g.value(b.id);
    if (g.requires_grad(b.id)) g.grad_ref(b.id).noalias() += go.transpose() * g.value(a.id);
  });
}

Var spmm(std::shared_ptr<const SparseMatrix> s, Var b) {
  const Matrix& bv = b.value();
  if (s->cols() != bv.rows()) throw std::invalid_argument("autograd spmm: dimension mismatch");
  Matrix out = (*s) * bv;
  return b.graph->record(std::move(out), {b}, [s, b](Graph& g, int self) {
    g.grad_ref(b.id).noalias() += s->transpose() * g.grad({&g, self});
  });
}

Var add(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "add");
  return a.graph->record(a.value() + b.value(), {a, b}, [a, b](Graph& g, int self) {
    const Matrix& go = g.grad({&g, self});
    if (g.requires_grad(a.id)) g.grad_ref(a.id) += go;
    if (g.requires_grad(b.id)) g.grad_ref(b.id) += go;
  });
}

Var sub(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "sub");
  return a.graph->record(a.value() - b.value(), {a, b}, [a, b](Graph& g, int self) {
    const Matrix& go = g.grad({&g, self});
    if (g.requires_grad(a.id)) g.grad_ref(a.id) += go;
    if (g.requires_grad(b.id)) g.grad_ref(b.id) -= go;
  });
}

Var mul(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "mul");
  return a.graph->record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Graph& g, int self) {
    const Matrix& go = g.grad({&g, self});
    if (g.requires_grad(a.id)) g.grad_ref(a.id) += go.cwiseProduct(g.value(b.id));
    if (g.requires_grad(b.id)) g.grad_ref(b.id) += go.cwiseProduct(g.value(a.id));
  });
}

Var scale(Var a, double s) {
  return a.graph->record(a.value() * s, {a}, [a, s](Graph& g, int self) {
    g.grad_ref(a.id) += g.grad({&g, self}) * s;
  });
}

Var add_row(Var a, Var row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) throw std::invalid_argument("autograd add_row: shape mismatch");
  Matrix out = av.rowwise() + rv.row(0);
  return a.graph->record(std::move(out), {a, row}, [a, row](Graph& g, int self) {
    const Matrix& go = g.grad({&g, self});
    if (g.requires_grad(a.id)) g.grad_ref(a.id) += go;
    if (g.requires_grad(row.id)) g.grad_ref(row.id) += go.colwise().sum();
  });
}

Var mul_row(Var a, Var row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) throw std::invalid_argument("autograd mul_row: shape mismatch");
  Matrix out = av.array().rowwise() * rv.row(0).array();
  return a.graph->record(std::move(out), {a, row}, [a, row](Graph& g, int self) {
    const Matrix& go = g.grad({&g, self});
    if (g.requires_grad(a.id)) {
      g.grad_ref(a.id).array() += go.array().rowwise() * g.value(row.id).row(0).array();
    }
    if (g.requires_grad(row.id)) g.grad_ref(row.id) += go.cwiseProduct(g.value(a.id)).colwise().sum();
  });
}

Var mul_col(Var a, Var col) {
  const Matrix& av = a.value();
  const Matrix& cv = col.value();
  if (cv.cols() != 1 || cv.rows() != av.rows()) throw std::invalid_argument("autograd mul_col: shape mismatch");
  Matrix out = av.array().colwise() * cv.col(0).array();
  return a.graph->record(std::move(out), {a, col}, [a, col](Graph& g, int self) {
    const Matrix& go = g.grad({&g, self});
    if (g.requires_grad(a.id)) {
      g.grad_ref(a.id).array() += go.array().colwise() * g.value(col.id).col(0).array();
    }
    if (g.requires_grad(col.id)) g.grad_ref(col.id) += go.cwiseProduct(g.value(a.id)).rowwise().sum();
  });
}

Var relu(Var a) {
  return a.graph->record(a.value().unaryExpr([](double x) { return x < 0.0 ? 0.0 : x; }), {a}, [a](Graph& g, int self) {
    const Matrix& go = g.grad({&g, self});
    g.grad_ref(a.id).array() += (g.value(a.id).array() > 0.0).select(go.array(), 0.0);
  });
}

Var sigmoid(Var a) {
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return a.graph->record(std::move(out), {a}, [a](Graph& g, int self) {
    const Matrix& y = g.value(self);
    g.grad_ref(a.id).array() += g.grad({&g, self}).array() * y.array() * (1.0 - y.array());
  });
}

Var softmax_rows(Var a) {
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    double mx = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return a.graph->record(std::move(out), {a}, [a](Graph& g, int self) {
    const Matrix& y = g.value(self);
    const Matrix& go = g.grad({&g, self});
    Matrix& gi = g.grad_ref(a.id);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      double dot = go.row(r).dot(y.row(r));
      gi.row(r).array() += y.row(r).array() * (go.row(r).array() - dot);
    }
  });
}

Var l2_normalize_rows(Var a) {
  const Matrix& av = a.value();
  Matrix out = Matrix::Zero(av.rows(), av.cols());
  Eigen::VectorXd norms(av.rows());
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    norms[r] = av.row(r).norm();
    // Only exact zero rows stay zero; NaN must keep propagating.
    if (norms[r] != 0) out.row(r) = av.row(r) / norms[r];
  }
  return a.graph->record(std::move(out), {a}, [a, norms](Graph& g, int self) {
    const Matrix& y = g.value(self);
    const Matrix& go = g.grad({&g, self});
    Matrix& gi = g.grad_ref(a.id);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      if (norms[r] == 0) continue;
      double dot = go.row(r).dot(y.row(r));
      gi.row(r) += (go.row(r) - dot * y.row(r)) / norms[r];
    }
  });
}

Var gather_rows(Var a, std::vector<int> index) {
  const Matrix& av = a.value();
  Matrix out(static_cast<Eigen::Index>(index.size()), av.cols());
  for (size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= av.rows()) throw std::out_of_range("autograd gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = av.row(index[i]);
  }
  return a.graph->record(std::move(out), {a}, [a, index = std::move(index)](Graph& g, int self) {
    const Matrix& go = g.grad({&g, self});
    Matrix& gi = g.grad_ref(a.id);
    for (size_t i = 0; i < index.size(); ++i) gi.row(index[i]) += go.row(static_cast<Eigen::Index>(i));
  });
}

Var overlay_rows(Var base, Var rows, std::vector<int> index) {
  Matrix out = base.value();
  const Matrix& rv = rows.value();
  if (rv.rows() != static_cast<Eigen::Index>(index.size()) || rv.cols() != out.cols()) {
    throw std::invalid_argument("autograd overlay_rows: shape mismatch");
  }
  for (size_t i = 0; i < index.size(); ++i) out.row(index[i]) = rv.row(static_cast<Eigen::Index>(i));
  return base.graph->record(std::move(out), {base, rows},
                            [base, rows, index = std::move(index)](Graph& g, int self) {
                              const Matrix& go = g.grad({&g, self});
                              if (g.requires_grad(base.id)) {
                                Matrix& gb = g.grad_ref(base.id);
                                gb += go;
                                for (int r : index) gb.row(r).setZero();
                              }
                              if (g.requires_grad(rows.id)) {
                                Matrix& gr = g.grad_ref(rows.id);
                                for (size_t i = 0; i < index.size(); ++i) {
                                  gr.row(static_cast<Eigen::Index>(i)) += go.row(index[i]);
                                }
                              }
                            });
}

Var segment_sum(Var a, std::vector<int> offsets) {
  const Matrix& av = a.value();
  const Eigen::Index segs = static_cast<Eigen::Index>(offsets.size()) - 1;
  Matrix out = Matrix::Zero(segs, av.cols());
  for (Eigen::Index s = 0; s < segs; ++s) {
    for (int r = offsets[s]; r < offsets[s + 1]; ++r) out.row(s) += av.row(r);
  }
  return a.graph->record(std::move(out), {a}, [a, offsets = std::move(offsets)](Graph& g, int self) {
    const Matrix& go = g.grad({&g, self});
    Matrix& gi = g.grad_ref(a.id);
    for (size_t s = 0; s + 1 < offsets.size(); ++s) {
      for (int r = offsets[s]; r < offsets[s + 1]; ++r) gi.row(r) += go.row(static_cast<Eigen::Index>(s));
    }
  });
}

Var segment_softmax(Var a, std::vector<int> offsets) {
  Matrix out = a.value();
  for (size_t s = 0; s + 1 < offsets.size(); ++s) {
    int lo = offsets[s], len = offsets[s + 1] - offsets[s];
    if (len == 0) continue;
    auto block = out.middleRows(lo, len);
    for (Eigen::Index c = 0; c < block.cols(); ++c) {
      double mx = block.col(c).maxCoeff();
      block.col(c) = (block.col(c).array() - mx).exp().matrix();
      block.col(c) /= block.col(c).sum();
    }
  }
  return a.graph->record(std::move(out), {a}, [a, offsets = std::move(offsets)](Graph& g, int self) {
    const Matrix& y = g.value(self);
    const Matrix& go = g.grad({&g, self});
    Matrix& gi = g.grad_ref(a.id);
    for (size_t s = 0; s + 1 < offsets.size(); ++s) {
      int lo = offsets[s], len = offsets[s + 1] - offsets[s];
      if (len == 0) continue;
      for (Eigen::Index c = 0; c < y.cols(); ++c) {
        auto yc = y.col(c).segment(lo, len);
        auto gc = go.col(c).segment(lo, len);
        double dot = yc.dot(gc);
        gi.col(c).segment(lo, len).array() += yc.array() * (gc.array() - dot);
      }
    }
  });
}

Var column(Var a, int j) {
  Matrix out = a.value().col(j);
  return a.graph->record(std::move(out), {a}, [a, j](Graph& g, int self) {
    g.grad_ref(a.id).col(j) += g.grad({&g, self}).col(0);
  });
}

Var max_elementwise(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("autograd max_elementwise: no inputs");
  Matrix out = parts[0].value();
  std::vector<int> arg(static_cast<size_t>(out.size()), 0);
  for (size_t p = 1; p < parts.size(); ++p) {
    const Matrix& v = parts[p].value();
    check_same_shape(out, v, "max_elementwise");
    for (Eigen::Index i = 0; i < out.size(); ++i) {
      if (v.data()[i] > out.data()[i]) {
        out.data()[i] = v.data()[i];
        arg[static_cast<size_t>(i)] = static_cast<int>(p);
      }
    }
  }
  std::vector<int> ids;
  for (const Var& v : parts) ids.push_back(v.id);
  return parts[0].graph->record(std::move(out), parts,
                                [ids, arg = std::move(arg)](Graph& g, int self) {
                                  const Matrix& go = g.grad({&g, self});
                                  for (size_t p = 0; p < ids.size(); ++p) {
                                    if (!g.requires_grad(ids[p])) continue;
                                    Matrix& gi = g.grad_ref(ids[p]);
                                    for (Eigen::Index i = 0; i < go.size(); ++i) {
                                      if (arg[static_cast<size_t>(i)] == static_cast<int>(p)) gi.data()[i] += go.data()[i];
                                    }
                                  }
                                });
}

Var rowwise_dot(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "rowwise_dot");
  Matrix out = a.value().cwiseProduct(b.value()).rowwise().sum();
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, int self) {
    const Matrix& go = g.grad({&g, self});
    if (g.requires_grad(a.id)) g.grad_ref(a.id).array() += g.value(b.id).array().colwise() * go.col(0).array();
    if (g.requires_grad(b.id)) g.grad_ref(b.id).array() += g.value(a.id).array().colwise() * go.col(0).array();
  });
}

Var concat_cols(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows()) throw std::invalid_argument("autograd concat_cols: row mismatch");
  Matrix out(av.rows(), av.cols() + bv.cols());
  out << av, bv;
  const Eigen::Index ca = av.cols(), cb = bv.cols();
  return a.graph->record(std::move(out), {a, b}, [a, b, ca, cb](Graph& g, int self) {
    const Matrix& go = g.grad({&g, self});
    if (g.requires_grad(a.id)) g.grad_ref(a.id) += go.leftCols(ca);
    if (g.requires_grad(b.id)) g.grad_ref(b.id) += go.rightCols(cb);
  });
}

Var gather_entries(Var a, std::vector<std::vector<int>> index) {
  const Matrix& av = a.value();
  if (static_cast<Eigen::Index>(index.size()) != av.rows()) {
    throw std::invalid_argument("autograd gather_entries: one index row per input row required");
  }
  const Eigen::Index width = index.empty() ? 0 : static_cast<Eigen::Index>(index[0].size());
  Matrix out(av.rows(), width);
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    if (static_cast<Eigen::Index>(index[r].size()) != width) {
      throw std::invalid_argument("autograd gather_entries: ragged index");
    }
    for (Eigen::Index t = 0; t < width; ++t) out(r, t) = av(r, index[r][t]);
  }
  return a.graph->record(std::move(out), {a}, [a, index = std::move(index)](Graph& g, int self) {
    const Matrix& go = g.grad({&g, self});
    Matrix& gi = g.grad_ref(a.id);
    for (size_t r = 0; r < index.size(); ++r) {
      for (size_t t = 0; t < index[r].size(); ++t) {
        gi(static_cast<Eigen::Index>(r), index[r][t]) += go(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(t));
      }
    }
  });
}

Var topk_softmax_rows(Var a, int k, bool exclude_diagonal) {
  const Matrix& av = a.value();
  Matrix out = Matrix::Zero(av.rows(), av.cols());
  std::vector<std::vector<int>> chosen(static_cast<size_t>(av.rows()));
  std::vector<int> cols;
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    cols.clear();
    for (Eigen::Index c = 0; c < av.cols(); ++c) {
      if (!(exclude_diagonal && c == r)) cols.push_back(static_cast<int>(c));
    }
    size_t take = std::min(cols.size(), static_cast<size_t>(std::max(k, 0)));
    std::partial_sort(cols.begin(), cols.begin() + static_cast<std::ptrdiff_t>(take), cols.end(),
                      [&](int x, int y) { return av(r, x) != av(r, y) ? av(r, x) > av(r, y) : x < y; });
    cols.resize(take);
    if (cols.empty()) continue;
    double mx = av(r, cols[0]);
    double z = 0;
    for (int c : cols) z += std::exp(av(r, c) - mx);
    for (int c : cols) out(r, c) = std::exp(av(r, c) - mx) / z;
    chosen[static_cast<size_t>(r)] = cols;
  }
  return a.graph->record(std::move(out), {a}, [a, chosen = std::move(chosen)](Graph& g, int self) {
    const Matrix& y = g.value(self);
    const Matrix& go = g.grad({&g, self});
    Matrix& gi = g.grad_ref(a.id);
    for (size_t r = 0; r < chosen.size(); ++r) {
      const auto ri = static_cast<Eigen::Index>(r);
      double dot = 0;
      for (int c : chosen[r]) dot += go(ri, c) * y(ri, c);
      for (int c : chosen[r]) gi(ri, c) += y(ri, c) * (go(ri, c) - dot);
    }
  });
}

Var sum_all(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph->record(std::move(out), {a}, [a](Graph& g, int self) {
    g.grad_ref(a.id).array() += g.grad({&g, self})(0, 0);
  });
}

Var info_nce(Var logits) {
  const Matrix& l = logits.value();
  const Eigen::Index rows = l.rows();
  Matrix soft(rows, l.cols());
  double total = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    double mx = l.row(r).maxCoeff();
    soft.row(r) = (l.row(r).array() - mx).exp().matrix();
    double z = soft.row(r).sum();
    soft.row(r) /= z;
    total += -(l(r, 0) - mx - std::log(z));
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(rows);
  return logits.graph->record(std::move(out), {logits}, [logits, soft](Graph& g, int self) {
    const double go = g.grad({&g, self})(0, 0) / static_cast<double>(soft.rows());
    Matrix& gi = g.grad_ref(logits.id);
    gi += go * soft;
    gi.col(0).array() -= go;
  });
}

Var info_nce_raw_positive(Var logits, Var pos_raw) {
  const Matrix& l = logits.value();
  const Matrix& p = pos_raw.value();
  const Eigen::Index rows = l.rows();
  Eigen::VectorXd denom(rows);
  double total = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    double d = p(r, 0);
    for (Eigen::Index c = 1; c < l.cols(); ++c) d += std::exp(l(r, c));
    denom[r] = d;
    total += -(l(r, 0) - std::log(d));
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(rows);
  return logits.graph->record(std::move(out), {logits, pos_raw}, [logits, pos_raw, denom](Graph& g, int self) {
    const Matrix& l = g.value(logits.id);
    const double go = g.grad({&g, self})(0, 0) / static_cast<double>(l.rows());
    for (Eigen::Index r = 0; r < l.rows(); ++r) {
      if (g.requires_grad(logits.id)) {
        Matrix& gl = g.grad_ref(logits.id);
        gl(r, 0) -= go;
        for (Eigen::Index c = 1; c < l.cols(); ++c) gl(r, c) += go * std::exp(l(r, c)) / denom[r];
      }
      if (g.requires_grad(pos_raw.id)) g.grad_ref(pos_raw.id)(r, 0) += go / denom[r];
    }
  });
}

Var binary_cross_entropy(Var probs, std::vector<int> targets, double eps) {
  const Matrix& p = probs.value();
  if (static_cast<Eigen::Index>(targets.size()) != p.rows()) {
    throw std::invalid_argument("autograd binary_cross_entropy: one target per row required");
  }
  double total = 0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      double q = std::clamp(p(r, c), eps, 1.0 - eps);
      total -= c == targets[r] ? std::log(q) : std::log(1.0 - q);
    }
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(p.rows());
  return probs.graph->record(std::move(out), {probs}, [probs, targets = std::move(targets), eps](Graph& g, int self) {
    const Matrix& p = g.value(probs.id);
    const double go = g.grad({&g, self})(0, 0) / static_cast<double>(p.rows());
    Matrix& gi = g.grad_ref(probs.id);
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        double q = p(r, c);
        if (q < eps || q > 1.0 - eps) continue;
        gi(r, c) += c == targets[r] ? -go / q : go / (1.0 - q);
      }
    }
  });
}

Var categorical_cross_entropy(Var probs, std::vector<int> targets, double eps) {
  const Matrix& p = probs.value();
  if (static_cast<Eigen::Index>(targets.size()) != p.rows()) {
    throw std::invalid_argument("autograd categorical_cross_entropy: one target per row required");
  }
  double total = 0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) total -= std::log(std::clamp(p(r, targets[r]), eps, 1.0 - eps));
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(p.rows());
  return probs.graph->record(std::move(out), {probs}, [probs, targets = std::move(targets), eps](Graph& g, int self) {
    const Matrix& p = g.value(probs.id);
    const double go = g.grad({&g, self})(0, 0) / static_cast<double>(p.rows());
    Matrix& gi = g.grad_ref(probs.id);
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      double q = p(r, targets[r]);
      if (q < eps || q > 1.0 - eps) continue;
      gi(r, targets[r]) -= go / q;
    }
  });
}

}  // namespace hiphop::ag
