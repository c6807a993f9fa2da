#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices. A Graph
// records one forward pass; backward() walks the tape in reverse creation
// order. Parameters are referenced, not copied, and receive gradients
// through Graph::grad().

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

namespace hiphop::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

class Graph;

struct Var {
  Graph* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

class Graph {
 public:
  using Backward = std::function<void(Graph&, int self)>;

  Var constant(Matrix value);
  // Repeated calls with the same storage return the same node, so gradients
  // of shared parameters accumulate in one place.
  Var parameter(const Matrix* storage);
  // Referenced like a parameter but never differentiated.
  Var constant_ref(const Matrix* storage);
  // Gradient reaching `storage` in the last backward(); empty if none.
  const Matrix& grad_of(const Matrix* storage) const;

  // Adds an op output. `inputs` decide whether the node needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Matrix value, const std::vector<Var>& inputs, Backward backward);

  const Matrix& value(int id) const;
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  // Gradient of the last backward() target, or an empty matrix if none flowed.
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
  Matrix& grad_ref(int id);
  bool has_grad(int id) const { return nodes_[id].grad.size() > 0; }

  void backward(Var scalar);
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Matrix*, int> external_ids_;
};

Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);
// Constant sparse left operand.
Var spmm(std::shared_ptr<const SparseMatrix> s, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// Broadcast a 1 x c row over every row of a.
Var add_row(Var a, Var row);
Var mul_row(Var a, Var row);
// Broadcast an r x 1 column over every column of a.
Var mul_col(Var a, Var col);
Var relu(Var a);
Var sigmoid(Var a);
Var softmax_rows(Var a);
// Zero rows map to zero rows with zero gradient.
Var l2_normalize_rows(Var a);
Var gather_rows(Var a, std::vector<int> index);
// Rows replaced: out = base with out.row(index[i]) = rows.row(i).
Var overlay_rows(Var base, Var rows, std::vector<int> index);
// Rows [offsets[s], offsets[s+1]) summed into output row s.
Var segment_sum(Var a, std::vector<int> offsets);
// Softmax down each column inside each row segment.
Var segment_softmax(Var a, std::vector<int> offsets);
Var column(Var a, int j);
Var max_elementwise(const std::vector<Var>& parts);
Var rowwise_dot(Var a, Var b);
Var concat_cols(Var a, Var b);
// out(i, t) = a(i, index[i][t]); every row of index has the same length.
Var gather_entries(Var a, std::vector<std::vector<int>> index);
// Per row: softmax over the k largest entries (diagonal excluded when
// `exclude_diagonal`), zero elsewhere. Ties prefer the lower column.
Var topk_softmax_rows(Var a, int k, bool exclude_diagonal);
Var sum_all(Var a);

// Mean over rows of -log softmax(logits)[0].
Var info_nce(Var logits);
// Mean over rows of -(l0 - log(pos + sum_{t>0} exp(l_t))): the denominator
// carries the raw positive similarity instead of its exponential.
Var info_nce_raw_positive(Var logits, Var pos_raw);
// Mean over rows of the full-vocabulary binary cross entropy of clamped probs.
Var binary_cross_entropy(Var probs, std::vector<int> targets, double eps);
// Mean over rows of -log p_target with the same clamp.
Var categorical_cross_entropy(Var probs, std::vector<int> targets, double eps);

}  // namespace hiphop::ag
