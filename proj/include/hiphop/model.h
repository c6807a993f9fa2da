#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hiphop/autograd.h"
#include "hiphop/data.h"
#include "hiphop/graphs.h"
#include "hiphop/semantic.h"
#include "json.hpp"

namespace hiphop {

enum class GatePlacement {
  // softmax(ReLU(W1 h' + W2 h_intent + b) ⊙ w0)
  kPreSoftmax,
  // softmax(ReLU(W1 h' + W2 h_intent + b)) ⊙ w0
  kPostSoftmax,
};

struct ModelConfig {
  int dim = 100;
  int gnn_steps = 1;
  int num_intents = 4;
  int local_k = 3;
  int top_k = 12;
  double dropout = 0.2;
  double cosine_scale = 12.0;
  // Ablation switches.
  bool multi_intent = true;
  bool global_sim = true;
  bool local_sim = true;
  bool use_semantic = false;
  // Denoising parameters shared by the global and local paths.
  bool tie_denoise = true;
  GatePlacement gate = GatePlacement::kPreSoftmax;
  // Per-row neighbor cap for the batch similarity graphs; 0 keeps all.
  int neighbor_cap = 0;
  // 0 means 4 * dim.
  int projector_hidden = 0;
  // Keep the projector (hence the semantic rows) at its initial value.
  bool freeze_semantic = false;

  void validate() const;
};

nlohmann::ordered_json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

// Learnable tensors plus the hyperparameters that shape them.
class Model {
 public:
  Model(ModelConfig config, size_t n_items, std::optional<SemanticTable> semantic, uint64_t seed);

  const ModelConfig& config() const { return config_; }
  size_t n_items() const { return n_items_; }
  const std::optional<SemanticTable>& semantic() const { return semantic_; }

  std::map<std::string, Matrix>& params() { return params_; }
  const std::map<std::string, Matrix>& params() const { return params_; }
  const Matrix& param(const std::string& name) const { return params_.at(name); }
  bool trainable(const std::string& name) const;

  // h^(0) table with semantic rows projected, outside of any graph.
  Matrix item_table() const;

  void save(const std::filesystem::path& dir, const nlohmann::ordered_json& run_info = {}) const;
  static Model load(const std::filesystem::path& dir);

 private:
  Model() = default;
  ModelConfig config_;
  size_t n_items_ = 0;
  std::optional<SemanticTable> semantic_;
  std::map<std::string, Matrix> params_;
};

// Everything the forward pass needs from a batch that does not depend on
// parameters: stacked session graphs and batch similarity graphs.
struct PreparedBatch {
  int size = 0;
  std::vector<std::vector<ItemId>> sessions;
  std::vector<ItemId> node_items;
  std::shared_ptr<const ag::SparseMatrix> adjacency;
  // 1 for nodes with incoming edges, 0 for pass-through nodes.
  Matrix has_incoming;
  std::vector<int> position_node;
  std::vector<int> offsets;
  std::vector<int> last_position;
  std::vector<int> position_session;
  Matrix inv_length;
  std::shared_ptr<const ag::SparseMatrix> global_norm;
  std::shared_ptr<const ag::SparseMatrix> local_norm;
  std::vector<std::vector<ItemId>> item_sets;
  std::vector<int> targets;
};

PreparedBatch prepare_batch(const std::vector<std::vector<ItemId>>& sessions, const ModelConfig& config,
                            std::vector<int> targets = {});
PreparedBatch prepare_batch(const std::vector<const Session*>& examples, const ModelConfig& config);

struct ForwardVars {
  ag::Var item_table;
  ag::Var h_items;
  ag::Var h_sequence;
  ag::Var h_intent;
  ag::Var h_global_conv;
  ag::Var h_local_conv;
  ag::Var h_g;
  ag::Var h_l;
  ag::Var h_fused;
  ag::Var h_similarity;
  ag::Var h_session;
  ag::Var logits;
  ag::Var probs;
};

// Dropout draws from `rng` when training; evaluation passes rng == nullptr.
ForwardVars forward(ag::Graph& graph, const Model& model, const PreparedBatch& batch, bool training,
                    std::mt19937_64* rng);

// Per-session values of one forward pass, rows follow the batch.
struct SessionForward {
  Matrix h_items;
  Matrix h_sequence;
  Matrix h_intent;
  Matrix h_g;
  Matrix h_l;
  Matrix h_fused;
  Matrix h_similarity;
  Matrix h_session;
  Matrix logits;
  Matrix probs;
};

SessionForward forward_values(const Model& model, const PreparedBatch& batch);

// Building blocks, shared by the batch forward and the standalone helpers
// below.
namespace ops {

ag::Var gnn_step(ag::Var h, std::shared_ptr<const ag::SparseMatrix> adjacency, ag::Var weight,
                 ag::Var has_incoming);
struct Readout {
  ag::Var h_sequence;
  ag::Var alpha;
};
Readout soft_attention(ag::Var h_items, const std::vector<int>& offsets, const std::vector<int>& last_position,
                       const std::vector<int>& position_session, ag::Var q, ag::Var w_last, ag::Var w_item,
                       ag::Var bias);
ag::Var multi_intent(ag::Var h_items, const std::vector<int>& offsets, ag::Var queries);
ag::Var mean_pool(ag::Var h_items, const std::vector<int>& offsets, ag::Var inv_length);
struct Gate {
  ag::Var output;
  ag::Var alpha;
};
Gate intent_gate(ag::Var h_prime, ag::Var h_intent, ag::Var w1, ag::Var w2, ag::Var bias, ag::Var w0,
                 GatePlacement placement);
ag::Var similarity_aggregate(ag::Var h_fused, int k);
ag::Var cosine_logits(ag::Var h_session, ag::Var item_table, double scale);

}  // namespace ops

// Standalone value-level forms of the individual stages.
Matrix gnn_propagate(const SessionGraph& graph, const Matrix& h0, const Matrix& weight, int steps);
struct ReadoutResult {
  Eigen::RowVectorXd h_sequence;
  Eigen::VectorXd alpha;
};
ReadoutResult soft_attention_readout(const Matrix& h_items, const Matrix& q, const Matrix& w_last,
                                     const Matrix& w_item, const Matrix& bias);
Eigen::RowVectorXd multi_intent(const Matrix& h_items, const Matrix& queries);
Matrix session_sim_conv(const Matrix& h_pooled, const SimilarityGraph& graph);
struct GateResult {
  Eigen::RowVectorXd output;
  Eigen::RowVectorXd alpha;
};
GateResult intent_guided_attention(const Eigen::RowVectorXd& h_prime, const Eigen::RowVectorXd& h_intent,
                                   const Matrix& w1, const Matrix& w2, const Matrix& bias, const Matrix& w0,
                                   GatePlacement placement = GatePlacement::kPreSoftmax);
Matrix fuse_and_aggregate(const Matrix& h_sequence, const Matrix& h_g, const Matrix& h_l, int k,
                          double dropout = 0.0, std::mt19937_64* rng = nullptr);
// Throws std::invalid_argument on a zero-norm session vector.
Eigen::RowVectorXd score_items(const Eigen::RowVectorXd& h_session, const Matrix& item_table, double scale = 1.0);

}  // namespace hiphop
