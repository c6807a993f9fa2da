#include "hiphop/eval.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace hiphop {

int rank_target(std::span<const double> scores, int target) {
  if (target < 0 || static_cast<size_t>(target) >= scores.size()) {
    throw std::out_of_range("target " + std::to_string(target) + " outside score vector of size " +
                            std::to_string(scores.size()));
  }
  const double t = scores[target];
  int rank = 1;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (static_cast<int>(i) != target && scores[i] >= t) ++rank;
  }
  return rank;
}

Metrics compute_metrics(std::span<const int> ranks, int k) {
  if (ranks.empty()) throw std::invalid_argument("compute_metrics: no ranks");
  if (k < 1) throw std::invalid_argument("compute_metrics: k must be >= 1");
  double hits = 0.0, rr = 0.0;
  for (int r : ranks) {
    if (r < 1) throw std::invalid_argument("compute_metrics: ranks are 1-based");
    if (r <= k) {
      hits += 1.0;
      rr += 1.0 / r;
    }
  }
  Metrics m;
  m.k = k;
  m.n_examples = static_cast<int64_t>(ranks.size());
  m.hr = 100.0 * hits / static_cast<double>(ranks.size());
  m.mrr = 100.0 * rr / static_cast<double>(ranks.size());
  return m;
}

std::vector<int> rank_examples(const Model& model, const std::vector<const Session*>& examples, int batch_size) {
  std::vector<int> ranks;
  ranks.reserve(examples.size());
  for (const auto& members : make_batches(examples, batch_size)) {
    PreparedBatch batch = prepare_batch(members, model.config());
    SessionForward f = forward_values(model, batch);
    for (int i = 0; i < batch.size; ++i) {
      if (batch.targets[i] < 0) throw std::invalid_argument("evaluation example without a target");
      Eigen::RowVectorXd row = f.logits.row(i);
      ranks.push_back(rank_target(std::span<const double>(row.data(), row.size()), batch.targets[i]));
    }
  }
  return ranks;
}

Metrics evaluate_model(const Model& model, const std::vector<Session>& examples, int k, int batch_size,
                       std::vector<int>* ranks) {
  std::vector<const Session*> ptrs;
  for (const Session& s : examples) ptrs.push_back(&s);
  std::vector<int> r = rank_examples(model, ptrs, batch_size);
  Metrics m = compute_metrics(r, k);
  if (ranks != nullptr) *ranks = std::move(r);
  return m;
}

namespace {

int target_of(const Session& s) {
  if (!s.target) throw std::invalid_argument("test example without a target");
  return *s.target;
}

std::vector<double> popularity(const std::vector<Session>& train, size_t n_items) {
  std::vector<double> pop(n_items, 0.0);
  for (const auto& session : reconstruct_sessions(train)) {
    for (ItemId i : session) pop.at(i) += 1.0;
  }
  return pop;
}

}  // namespace

std::vector<int> pop_ranks(const std::vector<Session>& train, const std::vector<Session>& test, size_t n_items) {
  std::vector<double> pop = popularity(train, n_items);
  std::vector<int> ranks;
  for (const Session& s : test) ranks.push_back(rank_target(pop, target_of(s)));
  return ranks;
}

std::vector<int> s_pop_ranks(const std::vector<Session>& train, const std::vector<Session>& test,
                             size_t n_items) {
  std::vector<double> pop = popularity(train, n_items);
  // Popularity enters below one click so it only breaks ties.
  const double max_pop = pop.empty() ? 0.0 : *std::max_element(pop.begin(), pop.end());
  std::vector<double> scores(n_items);
  for (size_t i = 0; i < n_items; ++i) scores[i] = pop[i] / (max_pop + 1.0);
  std::vector<int> ranks;
  for (const Session& s : test) {
    for (ItemId i : s.items) scores.at(i) += 1.0;
    ranks.push_back(rank_target(scores, target_of(s)));
    for (ItemId i : s.items) scores[i] -= 1.0;
  }
  return ranks;
}

ItemKnn::ItemKnn(const std::vector<Session>& train, size_t n_items, int neighbors)
    : n_items_(n_items), neighbors_(neighbors), sessions_of_(n_items) {
  if (neighbors < 1) throw std::invalid_argument("item-knn needs at least one neighbor");
  for (auto session : reconstruct_sessions(train)) {
    std::sort(session.begin(), session.end());
    session.erase(std::unique(session.begin(), session.end()), session.end());
    for (ItemId i : session) sessions_of_.at(i).push_back(static_cast<int>(sets_.size()));
    sets_.push_back(std::move(session));
  }
}

const std::vector<double>& ItemKnn::scores(ItemId q) {
  auto it = cache_.find(q);
  if (it != cache_.end()) return it->second;
  if (q < 0 || static_cast<size_t>(q) >= n_items_) throw std::out_of_range("item-knn query outside the catalog");
  std::vector<double> co(n_items_, 0.0);
  for (int s : sessions_of_[q]) {
    for (ItemId j : sets_[s]) co[j] += 1.0;
  }
  std::vector<std::pair<double, ItemId>> cand;
  const double nq = static_cast<double>(sessions_of_[q].size());
  for (size_t j = 0; j < n_items_; ++j) {
    if (static_cast<ItemId>(j) == q || co[j] == 0.0) continue;
    cand.emplace_back(co[j] / std::sqrt(nq * static_cast<double>(sessions_of_[j].size())), static_cast<ItemId>(j));
  }
  std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  if (cand.size() > static_cast<size_t>(neighbors_)) cand.resize(neighbors_);
  std::vector<double> scores(n_items_, 0.0);
  for (const auto& [sim, j] : cand) scores[j] = sim;
  return cache_.emplace(q, std::move(scores)).first->second;
}

std::vector<int> item_knn_ranks(const std::vector<Session>& train, const std::vector<Session>& test,
                                size_t n_items, int neighbors) {
  ItemKnn knn(train, n_items, neighbors);
  std::vector<int> ranks;
  for (const Session& s : test) {
    if (s.items.empty()) throw std::invalid_argument("test example with an empty prefix");
    ranks.push_back(rank_target(knn.scores(s.items.back()), target_of(s)));
  }
  return ranks;
}

Metrics baseline_pop(const std::vector<Session>& train, const std::vector<Session>& test, size_t n_items, int k) {
  return compute_metrics(pop_ranks(train, test, n_items), k);
}

Metrics baseline_s_pop(const std::vector<Session>& train, const std::vector<Session>& test, size_t n_items,
                       int k) {
  return compute_metrics(s_pop_ranks(train, test, n_items), k);
}

Metrics baseline_item_knn(const std::vector<Session>& train, const std::vector<Session>& test, size_t n_items,
                          int k, int neighbors) {
  return compute_metrics(item_knn_ranks(train, test, n_items, neighbors), k);
}

Variant parse_variant(const std::string& name) {
  std::string key;
  for (char c : name) {
    if (std::isalnum(static_cast<unsigned char>(c))) key += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  static const std::map<std::string, Variant> kNames = {
      {"full", Variant::kFull},
      {"womultiintent", Variant::kNoMultiIntent},
      {"wointersim", Variant::kNoInterSim},
      {"woglobalsim", Variant::kNoGlobalSim},
      {"wolocalsim", Variant::kNoLocalSim},
      {"wocontrastive", Variant::kNoContrastive},
      {"wosemantic", Variant::kNoSemantic},
  };
  auto it = kNames.find(key);
  if (it == kNames.end()) {
    throw std::invalid_argument("unknown ablation variant '" + name +
                                "' (expected w/o MultiIntent, w/o InterSim, w/o GlobalSim, w/o LocalSim, "
                                "w/o Contrastive or w/o Semantic)");
  }
  return it->second;
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "HIPHOP";
    case Variant::kNoMultiIntent: return "w/o MultiIntent";
    case Variant::kNoInterSim: return "w/o InterSim";
    case Variant::kNoGlobalSim: return "w/o GlobalSim";
    case Variant::kNoLocalSim: return "w/o LocalSim";
    case Variant::kNoContrastive: return "w/o Contrastive";
    case Variant::kNoSemantic: return "w/o Semantic";
  }
  return "?";
}

void apply_variant(Variant v, ModelConfig& model, TrainConfig& train) {
  switch (v) {
    case Variant::kFull: break;
    case Variant::kNoMultiIntent: model.multi_intent = false; break;
    case Variant::kNoInterSim:
      model.global_sim = false;
      model.local_sim = false;
      break;
    case Variant::kNoGlobalSim: model.global_sim = false; break;
    case Variant::kNoLocalSim: model.local_sim = false; break;
    case Variant::kNoContrastive: train.lambda = 0.0; break;
    case Variant::kNoSemantic: model.use_semantic = false; break;
  }
}

std::vector<AblationRow> run_ablation(const ModelConfig& model, const TrainConfig& train,
                                      const std::vector<std::string>& variants, const VariantRunner& run) {
  std::vector<Variant> parsed;
  for (const auto& name : variants) parsed.push_back(parse_variant(name));
  std::vector<AblationRow> rows;
  rows.push_back({variant_name(Variant::kFull), run(model, train)});
  for (Variant v : parsed) {
    if (v == Variant::kFull) continue;
    ModelConfig m = model;
    TrainConfig t = train;
    apply_variant(v, m, t);
    rows.push_back({variant_name(v), run(m, t)});
  }
  return rows;
}

namespace {

std::string fixed2(double x) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(2);
  s << x;
  return s.str();
}

}  // namespace

std::string metrics_markdown(const std::vector<AblationRow>& rows) {
  if (rows.empty()) return {};
  const int k = rows.front().metrics.k;
  std::ostringstream out;
  out << "| Method | HR@" << k << " | MRR@" << k << " |\n|---|---|---|\n";
  for (const auto& r : rows) out << "| " << r.name << " | " << fixed2(r.metrics.hr) << " | " << fixed2(r.metrics.mrr) << " |\n";
  return out.str();
}

std::string metrics_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "method,k,hr,mrr,n\n";
  for (const auto& r : rows) {
    out << '"' << r.name << "\"," << r.metrics.k << ',' << fixed2(r.metrics.hr) << ',' << fixed2(r.metrics.mrr)
        << ',' << r.metrics.n_examples << '\n';
  }
  return out.str();
}

void write_rank_dump(const std::filesystem::path& path, const std::vector<Session>& examples,
                     const std::vector<int>& ranks) {
  if (examples.size() != ranks.size()) throw std::invalid_argument("rank dump: size mismatch");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (size_t i = 0; i < ranks.size(); ++i) {
    nlohmann::ordered_json j;
    j["session"] = examples[i].key;
    j["items"] = examples[i].items;
    j["target"] = examples[i].target.value_or(-1);
    j["rank"] = ranks[i];
    out << j.dump() << '\n';
  }
}

}  // namespace hiphop
