#include "hiphop/model.h"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace hiphop {

using nlohmann::json;
using nlohmann::ordered_json;

void ModelConfig::validate() const {
  if (dim < 1) throw std::invalid_argument("dim must be >= 1");
  if (gnn_steps < 1) throw std::invalid_argument("gnn_steps (T) must be >= 1");
  if (num_intents < 1) throw std::invalid_argument("num_intents (M) must be >= 1");
  if (local_k < 1) throw std::invalid_argument("local_k must be >= 1");
  if (top_k < 1) throw std::invalid_argument("top_k (K) must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0, 1)");
  if (cosine_scale <= 0.0) throw std::invalid_argument("cosine_scale must be > 0");
  if (neighbor_cap < 0) throw std::invalid_argument("neighbor_cap must be >= 0");
}

ordered_json to_json(const ModelConfig& c) {
  ordered_json j;
  j["dim"] = c.dim;
  j["gnn_steps"] = c.gnn_steps;
  j["num_intents"] = c.num_intents;
  j["local_k"] = c.local_k;
  j["top_k"] = c.top_k;
  j["dropout"] = c.dropout;
  j["cosine_scale"] = c.cosine_scale;
  j["multi_intent"] = c.multi_intent;
  j["global_sim"] = c.global_sim;
  j["local_sim"] = c.local_sim;
  j["use_semantic"] = c.use_semantic;
  j["tie_denoise"] = c.tie_denoise;
  j["gate"] = c.gate == GatePlacement::kPreSoftmax ? "pre_softmax" : "post_softmax";
  j["neighbor_cap"] = c.neighbor_cap;
  j["projector_hidden"] = c.projector_hidden;
  j["freeze_semantic"] = c.freeze_semantic;
  return j;
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  const ordered_json known = to_json(ModelConfig{});
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("unknown model config key '" + key + "'");
  }
  c.dim = j.value("dim", c.dim);
  c.gnn_steps = j.value("gnn_steps", c.gnn_steps);
  c.num_intents = j.value("num_intents", c.num_intents);
  c.local_k = j.value("local_k", c.local_k);
  c.top_k = j.value("top_k", c.top_k);
  c.dropout = j.value("dropout", c.dropout);
  c.cosine_scale = j.value("cosine_scale", c.cosine_scale);
  c.multi_intent = j.value("multi_intent", c.multi_intent);
  c.global_sim = j.value("global_sim", c.global_sim);
  c.local_sim = j.value("local_sim", c.local_sim);
  c.use_semantic = j.value("use_semantic", c.use_semantic);
  c.tie_denoise = j.value("tie_denoise", c.tie_denoise);
  if (j.contains("gate")) {
    std::string g = j["gate"].get<std::string>();
    if (g == "pre_softmax") {
      c.gate = GatePlacement::kPreSoftmax;
    } else if (g == "post_softmax") {
      c.gate = GatePlacement::kPostSoftmax;
    } else {
      throw std::invalid_argument("gate must be pre_softmax or post_softmax");
    }
  }
  c.neighbor_cap = j.value("neighbor_cap", c.neighbor_cap);
  c.projector_hidden = j.value("projector_hidden", c.projector_hidden);
  c.freeze_semantic = j.value("freeze_semantic", c.freeze_semantic);
  c.validate();
  return c;
}

namespace {

Matrix uniform(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

const char* const kDenoiseNames[] = {"w1", "w2", "bias", "w0"};

}  // namespace

Model::Model(ModelConfig config, size_t n_items, std::optional<SemanticTable> semantic, uint64_t seed)
    : config_(config), n_items_(n_items) {
  config_.validate();
  if (n_items == 0) throw std::invalid_argument("model needs at least one item");
  if (config_.use_semantic) {
    if (!semantic) throw std::invalid_argument("use_semantic set but no semantic table supplied");
    if (semantic->num_items() != n_items) {
      throw std::invalid_argument("semantic table covers " + std::to_string(semantic->num_items()) +
                                  " items, catalog has " + std::to_string(n_items));
    }
    semantic_ = std::move(semantic);
  }
  const int d = config_.dim;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  std::mt19937_64 rng(seed);

  params_["item_embedding"] = init_learned_table(n_items, d, rng);
  params_["gnn.weight"] = uniform(d, d, bound, rng);
  params_["readout.q"] = uniform(1, d, bound, rng);
  params_["readout.w_last"] = uniform(d, d, bound, rng);
  params_["readout.w_item"] = uniform(d, d, bound, rng);
  params_["readout.bias"] = uniform(1, d, bound, rng);
  params_["intent.queries"] = uniform(config_.num_intents, d, bound, rng);
  for (const char* prefix : {"denoise.", "denoise_local."}) {
    if (std::string(prefix) == "denoise_local." && config_.tie_denoise) continue;
    params_[std::string(prefix) + "w1"] = uniform(d, d, bound, rng);
    params_[std::string(prefix) + "w2"] = uniform(d, d, bound, rng);
    params_[std::string(prefix) + "bias"] = uniform(1, d, bound, rng);
    params_[std::string(prefix) + "w0"] = uniform(1, d, bound, rng);
  }
  if (semantic_) {
    int hidden = config_.projector_hidden > 0 ? config_.projector_hidden : 4 * d;
    SpaceProjector p = SpaceProjector::init(semantic_->dim_raw, hidden, d, rng);
    params_["projector.w1"] = std::move(p.w1);
    params_["projector.b1"] = std::move(p.b1);
    params_["projector.w2"] = std::move(p.w2);
    params_["projector.b2"] = std::move(p.b2);
  }
}

bool Model::trainable(const std::string& name) const {
  if (config_.freeze_semantic && name.rfind("projector.", 0) == 0) return false;
  return true;
}

Matrix Model::item_table() const {
  if (!semantic_) return params_.at("item_embedding");
  SpaceProjector p{params_.at("projector.w1"), params_.at("projector.b1"), params_.at("projector.w2"),
                   params_.at("projector.b2")};
  return compose_item_table(params_.at("item_embedding"), &*semantic_, &p);
}

void Model::save(const std::filesystem::path& dir, const ordered_json& run_info) const {
  std::filesystem::create_directories(dir / "params");
  ordered_json manifest;
  manifest["schema_version"] = 1;
  manifest["format"] = "hiphop-checkpoint";
  manifest["n_items"] = n_items_;
  manifest["model"] = to_json(config_);
  ordered_json plist = ordered_json::array();
  for (const auto& [name, m] : params_) {
    std::string file = "params/" + name + ".f32";
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + (dir / file).string());
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      float v = static_cast<float>(m.data()[i]);
      out.write(reinterpret_cast<const char*>(&v), sizeof(float));
    }
    plist.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"file", file}});
  }
  manifest["params"] = std::move(plist);
  if (semantic_) {
    write_semantic_table(*semantic_, dir / "semantic.bin");
    manifest["semantic"] = "semantic.bin";
  } else {
    manifest["semantic"] = nullptr;
  }
  if (!run_info.is_null()) manifest["run"] = run_info;
  std::ofstream(dir / "model.json", std::ios::trunc) << manifest.dump(2) << '\n';
}

Model Model::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw std::runtime_error("no checkpoint at " + dir.string() + " (model.json missing)");
  json manifest = json::parse(in);
  if (manifest.value("schema_version", 0) != 1) throw std::runtime_error("unsupported checkpoint schema");
  Model m;
  m.config_ = model_config_from_json(manifest.at("model"));
  m.n_items_ = manifest.at("n_items").get<size_t>();
  if (!manifest.at("semantic").is_null()) {
    m.semantic_ = read_semantic_table(dir / manifest["semantic"].get<std::string>());
  }
  for (const auto& p : manifest.at("params")) {
    auto rows = p.at("shape")[0].get<Eigen::Index>();
    auto cols = p.at("shape")[1].get<Eigen::Index>();
    Matrix mat(rows, cols);
    auto path = dir / p.at("file").get<std::string>();
    std::ifstream blob(path, std::ios::binary);
    if (!blob) throw std::runtime_error("missing parameter blob " + path.string());
    for (Eigen::Index i = 0; i < mat.size(); ++i) {
      float v;
      if (!blob.read(reinterpret_cast<char*>(&v), sizeof(float))) {
        throw std::runtime_error("truncated parameter blob " + path.string());
      }
      mat.data()[i] = v;
    }
    m.params_[p.at("name").get<std::string>()] = std::move(mat);
  }
  return m;
}

PreparedBatch prepare_batch(const std::vector<std::vector<ItemId>>& sessions, const ModelConfig& config,
                            std::vector<int> targets) {
  if (sessions.empty()) throw std::invalid_argument("empty batch");
  PreparedBatch b;
  b.size = static_cast<int>(sessions.size());
  b.sessions = sessions;
  b.targets = std::move(targets);
  std::vector<Eigen::Triplet<double>> adj;
  std::vector<double> incoming;
  b.offsets.push_back(0);
  b.inv_length.resize(b.size, 1);
  for (int s = 0; s < b.size; ++s) {
    const auto& items = sessions[s];
    if (items.empty()) throw std::invalid_argument("batch contains an empty session");
    SessionGraph g = build_session_graph(items);
    const int base = static_cast<int>(b.node_items.size());
    for (int i = 0; i < g.num_nodes(); ++i) {
      b.node_items.push_back(g.nodes[i]);
      incoming.push_back(g.has_incoming(i) ? 1.0 : 0.0);
      for (int j = 0; j < g.num_nodes(); ++j) {
        if (g.adj_in(i, j) != 0.0) adj.emplace_back(base + i, base + j, g.adj_in(i, j));
      }
    }
    for (int node : g.alias) {
      b.position_node.push_back(base + node);
      b.position_session.push_back(s);
    }
    b.offsets.push_back(static_cast<int>(b.position_node.size()));
    b.last_position.push_back(b.offsets.back() - 1);
    b.inv_length(s, 0) = 1.0 / static_cast<double>(items.size());
    b.item_sets.push_back(scoped_item_set(items, SimilarityScope::kGlobal, 0));
  }
  const int n_nodes = static_cast<int>(b.node_items.size());
  auto a = std::make_shared<ag::SparseMatrix>(n_nodes, n_nodes);
  a->setFromTriplets(adj.begin(), adj.end());
  b.adjacency = a;
  b.has_incoming = Eigen::Map<Matrix>(incoming.data(), n_nodes, 1);

  auto build = [&](SimilarityScope scope) {
    SimilarityGraph g = build_similarity_graph(sessions, scope, config.local_k);
    if (config.neighbor_cap > 0) g = truncate_topk_neighbors(g, config.neighbor_cap);
    return std::make_shared<const ag::SparseMatrix>(std::move(g.normalized));
  };
  if (config.global_sim) b.global_norm = build(SimilarityScope::kGlobal);
  if (config.local_sim) b.local_norm = build(SimilarityScope::kLocal);
  return b;
}

PreparedBatch prepare_batch(const std::vector<const Session*>& examples, const ModelConfig& config) {
  std::vector<std::vector<ItemId>> sessions;
  std::vector<int> targets;
  for (const Session* s : examples) {
    sessions.push_back(s->items);
    targets.push_back(s->target.value_or(-1));
  }
  return prepare_batch(sessions, config, std::move(targets));
}

namespace ops {

ag::Var gnn_step(ag::Var h, std::shared_ptr<const ag::SparseMatrix> adjacency, ag::Var weight,
                 ag::Var has_incoming) {
  ag::Graph& g = *h.graph;
  ag::Var updated = ag::relu(ag::matmul_nt(ag::spmm(std::move(adjacency), h), weight));
  ag::Var keep = g.constant((1.0 - has_incoming.value().array()).matrix());
  return ag::add(ag::mul_col(updated, has_incoming), ag::mul_col(h, keep));
}

Readout soft_attention(ag::Var h_items, const std::vector<int>& offsets, const std::vector<int>& last_position,
                       const std::vector<int>& position_session, ag::Var q, ag::Var w_last, ag::Var w_item,
                       ag::Var bias) {
  ag::Var last = ag::gather_rows(h_items, last_position);
  ag::Var last_term = ag::gather_rows(ag::matmul_nt(last, w_last), position_session);
  ag::Var hidden = ag::sigmoid(ag::add_row(ag::add(last_term, ag::matmul_nt(h_items, w_item)), bias));
  ag::Var alpha = ag::segment_softmax(ag::matmul_nt(hidden, q), offsets);
  return {ag::segment_sum(ag::mul_col(h_items, alpha), offsets), alpha};
}

ag::Var multi_intent(ag::Var h_items, const std::vector<int>& offsets, ag::Var queries) {
  ag::Var alpha = ag::segment_softmax(ag::matmul_nt(h_items, queries), offsets);
  std::vector<ag::Var> per_intent;
  for (Eigen::Index m = 0; m < queries.rows(); ++m) {
    per_intent.push_back(ag::segment_sum(ag::mul_col(h_items, ag::column(alpha, static_cast<int>(m))), offsets));
  }
  return ag::max_elementwise(per_intent);
}

ag::Var mean_pool(ag::Var h_items, const std::vector<int>& offsets, ag::Var inv_length) {
  return ag::mul_col(ag::segment_sum(h_items, offsets), inv_length);
}

Gate intent_gate(ag::Var h_prime, ag::Var h_intent, ag::Var w1, ag::Var w2, ag::Var bias, ag::Var w0,
                 GatePlacement placement) {
  ag::Var z = ag::relu(ag::add_row(ag::add(ag::matmul_nt(h_prime, w1), ag::matmul_nt(h_intent, w2)), bias));
  ag::Var alpha = placement == GatePlacement::kPreSoftmax ? ag::softmax_rows(ag::mul_row(z, w0))
                                                          : ag::mul_row(ag::softmax_rows(z), w0);
  return {ag::mul(alpha, h_prime), alpha};
}

ag::Var similarity_aggregate(ag::Var h_fused, int k) {
  ag::Var unit = ag::l2_normalize_rows(h_fused);
  ag::Var weights = ag::topk_softmax_rows(ag::matmul_nt(unit, unit), k, true);
  return ag::matmul(weights, h_fused);
}

ag::Var cosine_logits(ag::Var h_session, ag::Var item_table, double scale) {
  return ag::scale(ag::matmul_nt(ag::l2_normalize_rows(h_session), ag::l2_normalize_rows(item_table)), scale);
}

}  // namespace ops

ForwardVars forward(ag::Graph& graph, const Model& model, const PreparedBatch& batch, bool training,
                    std::mt19937_64* rng) {
  const ModelConfig& c = model.config();
  auto p = [&](const std::string& name) {
    const Matrix* m = &model.param(name);
    return model.trainable(name) ? graph.parameter(m) : graph.constant_ref(m);
  };
  ForwardVars f;

  f.item_table = p("item_embedding");
  if (model.semantic() && !model.semantic()->present_items.empty()) {
    const SemanticTable& sem = *model.semantic();
    ag::Var raw = graph.constant_ref(&sem.raw);
    ag::Var hidden = ag::relu(ag::add_row(ag::matmul_nt(raw, p("projector.w1")), p("projector.b1")));
    ag::Var projected = ag::add_row(ag::matmul_nt(hidden, p("projector.w2")), p("projector.b2"));
    f.item_table = ag::overlay_rows(f.item_table, projected,
                                    std::vector<int>(sem.present_items.begin(), sem.present_items.end()));
  }

  ag::Var h = ag::gather_rows(f.item_table, std::vector<int>(batch.node_items.begin(), batch.node_items.end()));
  ag::Var has_in = graph.constant_ref(&batch.has_incoming);
  ag::Var gnn_w = p("gnn.weight");
  for (int t = 0; t < c.gnn_steps; ++t) h = ops::gnn_step(h, batch.adjacency, gnn_w, has_in);

  f.h_items = ag::gather_rows(h, batch.position_node);
  f.h_sequence = ops::soft_attention(f.h_items, batch.offsets, batch.last_position, batch.position_session,
                                     p("readout.q"), p("readout.w_last"), p("readout.w_item"), p("readout.bias"))
                     .h_sequence;

  ag::Var fused = f.h_sequence;
  if (c.global_sim || c.local_sim) {
    f.h_intent = c.multi_intent ? ops::multi_intent(f.h_items, batch.offsets, p("intent.queries"))
                                : ops::mean_pool(f.h_items, batch.offsets, graph.constant_ref(&batch.inv_length));
    ag::Var pooled = ag::segment_sum(f.h_items, batch.offsets);
    auto gate = [&](ag::Var h_prime, const std::string& prefix) {
      return ops::intent_gate(h_prime, f.h_intent, p(prefix + kDenoiseNames[0]), p(prefix + kDenoiseNames[1]),
                              p(prefix + kDenoiseNames[2]), p(prefix + kDenoiseNames[3]), c.gate)
          .output;
    };
    if (c.global_sim) {
      f.h_global_conv = ag::spmm(batch.global_norm, pooled);
      f.h_g = gate(f.h_global_conv, "denoise.");
      fused = ag::add(fused, f.h_g);
    }
    if (c.local_sim) {
      f.h_local_conv = ag::spmm(batch.local_norm, pooled);
      f.h_l = gate(f.h_local_conv, c.tie_denoise ? "denoise." : "denoise_local.");
      fused = ag::add(fused, f.h_l);
    }
  }
  f.h_fused = fused;
  f.h_similarity = ops::similarity_aggregate(f.h_fused, c.top_k);
  if (training && c.dropout > 0.0 && rng != nullptr) {
    std::bernoulli_distribution keep(1.0 - c.dropout);
    Matrix mask(f.h_similarity.rows(), f.h_similarity.cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? 1.0 / (1.0 - c.dropout) : 0.0;
    f.h_similarity = ag::mul(f.h_similarity, graph.constant(std::move(mask)));
  }
  f.h_session = ag::add(f.h_sequence, f.h_similarity);
  f.logits = ops::cosine_logits(f.h_session, f.item_table, c.cosine_scale);
  f.probs = ag::softmax_rows(f.logits);
  return f;
}

SessionForward forward_values(const Model& model, const PreparedBatch& batch) {
  ag::Graph graph;
  ForwardVars f = forward(graph, model, batch, false, nullptr);
  SessionForward out;
  const Eigen::Index b = batch.size, d = model.config().dim;
  auto or_zero = [&](const ag::Var& v) { return v.valid() ? Matrix(v.value()) : Matrix(Matrix::Zero(b, d)); };
  out.h_items = f.h_items.value();
  out.h_sequence = f.h_sequence.value();
  out.h_intent = or_zero(f.h_intent);
  out.h_g = or_zero(f.h_g);
  out.h_l = or_zero(f.h_l);
  out.h_fused = f.h_fused.value();
  out.h_similarity = f.h_similarity.value();
  out.h_session = f.h_session.value();
  out.logits = f.logits.value();
  out.probs = f.probs.value();
  return out;
}

Matrix gnn_propagate(const SessionGraph& graph, const Matrix& h0, const Matrix& weight, int steps) {
  if (h0.rows() != graph.num_nodes()) throw std::invalid_argument("gnn_propagate: h0 rows must match graph nodes");
  if (steps < 1) throw std::invalid_argument("gnn_propagate: steps must be >= 1");
  ag::Graph g;
  auto adj = std::make_shared<ag::SparseMatrix>(graph.adj_in.sparseView());
  Matrix incoming(graph.num_nodes(), 1);
  for (int i = 0; i < graph.num_nodes(); ++i) incoming(i, 0) = graph.has_incoming(i) ? 1.0 : 0.0;
  ag::Var h = g.constant(h0);
  ag::Var w = g.constant(weight);
  ag::Var has_in = g.constant(incoming);
  for (int t = 0; t < steps; ++t) h = ops::gnn_step(h, adj, w, has_in);
  return h.value();
}

ReadoutResult soft_attention_readout(const Matrix& h_items, const Matrix& q, const Matrix& w_last,
                                     const Matrix& w_item, const Matrix& bias) {
  if (h_items.rows() < 1) throw std::invalid_argument("soft_attention_readout: empty session");
  ag::Graph g;
  const int len = static_cast<int>(h_items.rows());
  auto r = ops::soft_attention(g.constant(h_items), {0, len}, {len - 1}, std::vector<int>(len, 0), g.constant(q),
                               g.constant(w_last), g.constant(w_item), g.constant(bias));
  return {r.h_sequence.value().row(0), r.alpha.value().col(0)};
}

Eigen::RowVectorXd multi_intent(const Matrix& h_items, const Matrix& queries) {
  if (h_items.rows() < 1) throw std::invalid_argument("multi_intent: empty session");
  if (queries.rows() < 1) throw std::invalid_argument("multi_intent: need at least one intent query");
  ag::Graph g;
  return ops::multi_intent(g.constant(h_items), {0, static_cast<int>(h_items.rows())}, g.constant(queries))
      .value()
      .row(0);
}

Matrix session_sim_conv(const Matrix& h_pooled, const SimilarityGraph& graph) {
  if (h_pooled.rows() != graph.m) {
    throw std::invalid_argument("session_sim_conv: " + std::to_string(h_pooled.rows()) + " session vectors for a " +
                                std::to_string(graph.m) + "-session graph");
  }
  return graph.normalized * h_pooled;
}

GateResult intent_guided_attention(const Eigen::RowVectorXd& h_prime, const Eigen::RowVectorXd& h_intent,
                                   const Matrix& w1, const Matrix& w2, const Matrix& bias, const Matrix& w0,
                                   GatePlacement placement) {
  if (h_prime.size() != h_intent.size()) throw std::invalid_argument("intent_guided_attention: width mismatch");
  ag::Graph g;
  auto r = ops::intent_gate(g.constant(Matrix(h_prime)), g.constant(Matrix(h_intent)), g.constant(w1),
                            g.constant(w2), g.constant(bias), g.constant(w0), placement);
  return {r.output.value().row(0), r.alpha.value().row(0)};
}

Matrix fuse_and_aggregate(const Matrix& h_sequence, const Matrix& h_g, const Matrix& h_l, int k, double dropout,
                          std::mt19937_64* rng) {
  if (k < 1) throw std::invalid_argument("fuse_and_aggregate: K must be >= 1");
  ag::Graph g;
  ag::Var fused = ag::add(ag::add(g.constant(h_sequence), g.constant(h_g)), g.constant(h_l));
  Matrix out = ops::similarity_aggregate(fused, k).value();
  if (dropout > 0.0 && rng != nullptr) {
    std::bernoulli_distribution keep(1.0 - dropout);
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = keep(*rng) ? out.data()[i] / (1.0 - dropout) : 0.0;
  }
  return out;
}

Eigen::RowVectorXd score_items(const Eigen::RowVectorXd& h_session, const Matrix& item_table, double scale) {
  if (h_session.norm() == 0.0) throw std::invalid_argument("score_items: zero-norm session representation");
  ag::Graph g;
  ag::Var logits = ops::cosine_logits(g.constant(Matrix(h_session)), g.constant(item_table), scale);
  return ag::softmax_rows(logits).value().row(0);
}

}  // namespace hiphop
