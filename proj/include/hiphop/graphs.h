#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <filesystem>
#include <span>
#include <vector>

#include "hiphop/data.h"

namespace hiphop {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

// Directed transition graph of one session. Node order is first appearance.
struct SessionGraph {
  std::vector<ItemId> nodes;
  // alias[p] is the node index of the item at position p.
  std::vector<int> alias;
  // adj_in(i, j): weight of edge j -> i, normalized over i's incoming edges.
  Eigen::MatrixXd adj_in;
  // adj_out(i, j): weight of edge i -> j, normalized over i's outgoing edges.
  Eigen::MatrixXd adj_out;
  // Raw transition counts, raw(i, j) = occurrences of j -> i.
  Eigen::MatrixXd raw_in;

  int num_nodes() const { return static_cast<int>(nodes.size()); }
  bool has_incoming(int node) const;
};

SessionGraph build_session_graph(std::span<const ItemId> session);

// |A ∩ B| / |A ∪ B| on deduplicated sets; 0 when both are empty.
double jaccard(std::span<const ItemId> a, std::span<const ItemId> b);

enum class SimilarityScope { kGlobal, kLocal };

struct SimilarityGraph {
  int m = 0;
  SimilarityScope scope = SimilarityScope::kGlobal;
  int k = 0;
  // Symmetric before truncation; no diagonal.
  SparseMatrix weights;
  // D^-1 W; all-zero rows stay zero.
  SparseMatrix normalized;
};

// The item set a session contributes under the given scope: all items for
// global, the last min(k, l) positions for local.
std::vector<ItemId> scoped_item_set(std::span<const ItemId> session, SimilarityScope scope, int k);

SimilarityGraph build_similarity_graph(const std::vector<std::vector<ItemId>>& sessions,
                                       SimilarityScope scope, int k = 0);

SparseMatrix row_normalize(const SparseMatrix& w);

SimilarityGraph truncate_topk_neighbors(const SimilarityGraph& graph, int cap);

// Coordinate-list text, one "i j weight" line per stored entry.
void write_coo(const SimilarityGraph& graph, const std::filesystem::path& path);

}  // namespace hiphop
