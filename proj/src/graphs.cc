#include "hiphop/graphs.h"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

namespace hiphop {

bool SessionGraph::has_incoming(int node) const { return raw_in.row(node).sum() > 0.0; }

SessionGraph build_session_graph(std::span<const ItemId> session) {
  SessionGraph g;
  std::unordered_map<ItemId, int> index;
  for (ItemId item : session) {
    auto [it, inserted] = index.emplace(item, static_cast<int>(g.nodes.size()));
    if (inserted) g.nodes.push_back(item);
    g.alias.push_back(it->second);
  }
  const int n = g.num_nodes();
  g.raw_in = Eigen::MatrixXd::Zero(n, n);
  for (size_t p = 1; p < g.alias.size(); ++p) g.raw_in(g.alias[p], g.alias[p - 1]) += 1.0;

  g.adj_in = g.raw_in;
  for (int i = 0; i < n; ++i) {
    double s = g.adj_in.row(i).sum();
    if (s > 0) g.adj_in.row(i) /= s;
  }
  g.adj_out = g.raw_in.transpose();
  for (int i = 0; i < n; ++i) {
    double s = g.adj_out.row(i).sum();
    if (s > 0) g.adj_out.row(i) /= s;
  }
  return g;
}

namespace {

std::vector<ItemId> sorted_unique(std::span<const ItemId> items) {
  std::vector<ItemId> out(items.begin(), items.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace

double jaccard(std::span<const ItemId> a, std::span<const ItemId> b) {
  auto sa = sorted_unique(a);
  auto sb = sorted_unique(b);
  if (sa.empty() && sb.empty()) return 0.0;
  std::vector<ItemId> common;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(common));
  double inter = static_cast<double>(common.size());
  double uni = static_cast<double>(sa.size() + sb.size()) - inter;
  return inter / uni;
}

std::vector<ItemId> scoped_item_set(std::span<const ItemId> session, SimilarityScope scope, int k) {
  if (scope == SimilarityScope::kLocal) {
    size_t take = std::min(static_cast<size_t>(k), session.size());
    return sorted_unique(session.subspan(session.size() - take));
  }
  return sorted_unique(session);
}

SparseMatrix row_normalize(const SparseMatrix& w) {
  SparseMatrix out = w;
  for (int r = 0; r < out.outerSize(); ++r) {
    double s = 0;
    for (SparseMatrix::InnerIterator it(out, r); it; ++it) s += it.value();
    if (s <= 0) continue;
    for (SparseMatrix::InnerIterator it(out, r); it; ++it) it.valueRef() /= s;
  }
  return out;
}

SimilarityGraph build_similarity_graph(const std::vector<std::vector<ItemId>>& sessions,
                                       SimilarityScope scope, int k) {
  if (scope == SimilarityScope::kLocal && k < 1) {
    throw std::invalid_argument("local similarity graph requires k >= 1");
  }
  SimilarityGraph g;
  g.m = static_cast<int>(sessions.size());
  g.scope = scope;
  g.k = scope == SimilarityScope::kLocal ? k : 0;

  std::vector<std::vector<ItemId>> sets;
  sets.reserve(sessions.size());
  for (const auto& s : sessions) sets.push_back(scoped_item_set(s, scope, k));

  // Inverted index turns the pairwise loop into intersection counting over
  // sessions that share at least one item.
  std::unordered_map<ItemId, std::vector<int>> postings;
  for (int i = 0; i < g.m; ++i) {
    for (ItemId item : sets[i]) postings[item].push_back(i);
  }
  std::vector<Eigen::Triplet<double>> triplets;
  std::vector<int> counts(g.m, 0);
  std::vector<int> touched;
  for (int a = 0; a < g.m; ++a) {
    touched.clear();
    for (ItemId item : sets[a]) {
      for (int b : postings[item]) {
        if (b <= a) continue;
        if (counts[b]++ == 0) touched.push_back(b);
      }
    }
    for (int b : touched) {
      double inter = static_cast<double>(counts[b]);
      double uni = static_cast<double>(sets[a].size() + sets[b].size()) - inter;
      double w = inter / uni;
      triplets.emplace_back(a, b, w);
      triplets.emplace_back(b, a, w);
      counts[b] = 0;
    }
  }
  g.weights.resize(g.m, g.m);
  g.weights.setFromTriplets(triplets.begin(), triplets.end());
  g.weights.makeCompressed();
  g.normalized = row_normalize(g.weights);
  return g;
}

SimilarityGraph truncate_topk_neighbors(const SimilarityGraph& graph, int cap) {
  if (cap < 1) throw std::invalid_argument("neighbor cap must be >= 1");
  SimilarityGraph out = graph;
  std::vector<Eigen::Triplet<double>> triplets;
  std::vector<std::pair<int, double>> row;
  for (int r = 0; r < graph.weights.outerSize(); ++r) {
    row.clear();
    for (SparseMatrix::InnerIterator it(graph.weights, r); it; ++it) row.emplace_back(it.col(), it.value());
    std::stable_sort(row.begin(), row.end(), [](const auto& x, const auto& y) {
      return x.second != y.second ? x.second > y.second : x.first < y.first;
    });
    if (row.size() > static_cast<size_t>(cap)) row.resize(cap);
    for (const auto& [c, v] : row) triplets.emplace_back(r, c, v);
  }
  out.weights.setZero();
  out.weights.resize(graph.m, graph.m);
  out.weights.setFromTriplets(triplets.begin(), triplets.end());
  out.weights.makeCompressed();
  out.normalized = row_normalize(out.weights);
  return out;
}

void write_coo(const SimilarityGraph& graph, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  char buf[64];
  for (int r = 0; r < graph.weights.outerSize(); ++r) {
    for (SparseMatrix::InnerIterator it(graph.weights, r); it; ++it) {
      std::snprintf(buf, sizeof(buf), "%.17g", it.value());
      out << r << ' ' << it.col() << ' ' << buf << '\n';
    }
  }
}

}  // namespace hiphop
