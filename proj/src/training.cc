#include "hiphop/training.h"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "hiphop/eval.h"

namespace hiphop {

using nlohmann::json;
using nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (lr <= 0.0) throw std::invalid_argument("lr must be > 0");
  if (lr_decay <= 0.0 || lr_decay > 1.0) throw std::invalid_argument("lr_decay must be in (0, 1]");
  if (lr_decay_every < 1) throw std::invalid_argument("lr_decay_every must be >= 1");
  if (l2 < 0.0) throw std::invalid_argument("l2 must be >= 0");
  if (batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");
  if (epochs_max < 1) throw std::invalid_argument("epochs_max must be >= 1");
  if (patience < 1) throw std::invalid_argument("patience must be >= 1");
  if (lambda < 0.0) throw std::invalid_argument("lambda must be >= 0");
  if (n_neg < 1) throw std::invalid_argument("n_neg must be >= 1");
  if (!(tau_end > 0.0 && tau_end <= tau_start)) throw std::invalid_argument("need 0 < tau_end <= tau_start");
  if (clip_norm < 0.0) throw std::invalid_argument("clip_norm must be >= 0 (0 disables)");
  if (valid_fraction <= 0.0 || valid_fraction >= 1.0) throw std::invalid_argument("valid_fraction must be in (0, 1)");
  if (reservoir_batches < -1) throw std::invalid_argument("reservoir_batches must be >= -1");
  if (eval_k < 1) throw std::invalid_argument("eval_k must be >= 1");
  if (eps <= 0.0 || eps >= 0.5) throw std::invalid_argument("eps must be in (0, 0.5)");
}

ordered_json to_json(const TrainConfig& c) {
  ordered_json j;
  j["lr"] = c.lr;
  j["lr_decay"] = c.lr_decay;
  j["lr_decay_every"] = c.lr_decay_every;
  j["l2"] = c.l2;
  j["batch_size"] = c.batch_size;
  j["epochs_max"] = c.epochs_max;
  j["patience"] = c.patience;
  j["lambda"] = c.lambda;
  j["n_neg"] = c.n_neg;
  j["tau_start"] = c.tau_start;
  j["tau_end"] = c.tau_end;
  j["seed"] = c.seed;
  j["loss"] = c.loss == PredictionLossKind::kBinary ? "binary" : "categorical";
  j["strict_infonce"] = c.strict_infonce;
  j["clip_norm"] = c.clip_norm;
  j["valid_fraction"] = c.valid_fraction;
  j["reservoir_batches"] = c.reservoir_batches;
  j["eval_k"] = c.eval_k;
  j["eps"] = c.eps;
  return j;
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  const ordered_json known = to_json(TrainConfig{});
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("unknown train config key '" + key + "'");
  }
  c.lr = j.value("lr", c.lr);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.lr_decay_every = j.value("lr_decay_every", c.lr_decay_every);
  c.l2 = j.value("l2", c.l2);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs_max = j.value("epochs_max", c.epochs_max);
  c.patience = j.value("patience", c.patience);
  c.lambda = j.value("lambda", c.lambda);
  c.n_neg = j.value("n_neg", c.n_neg);
  c.tau_start = j.value("tau_start", c.tau_start);
  c.tau_end = j.value("tau_end", c.tau_end);
  c.seed = j.value("seed", c.seed);
  if (j.contains("loss")) {
    std::string loss = j["loss"].get<std::string>();
    if (loss == "binary") {
      c.loss = PredictionLossKind::kBinary;
    } else if (loss == "categorical") {
      c.loss = PredictionLossKind::kCategorical;
    } else {
      throw std::invalid_argument("loss must be binary or categorical, got " + loss);
    }
  }
  c.strict_infonce = j.value("strict_infonce", c.strict_infonce);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.valid_fraction = j.value("valid_fraction", c.valid_fraction);
  c.reservoir_batches = j.value("reservoir_batches", c.reservoir_batches);
  c.eval_k = j.value("eval_k", c.eval_k);
  c.eps = j.value("eps", c.eps);
  c.validate();
  return c;
}

void NegativeReservoir::push(std::vector<Entry> batch) {
  if (capacity_batches == 0) return;
  batches.push_back(std::move(batch));
  while (capacity_batches > 0 && static_cast<int>(batches.size()) > capacity_batches) batches.pop_front();
}

std::vector<const NegativeReservoir::Entry*> NegativeReservoir::entries() const {
  std::vector<const Entry*> out;
  for (const auto& b : batches) {
    for (const auto& e : b) out.push_back(&e);
  }
  return out;
}

namespace {

bool disjoint(const std::vector<ItemId>& a, const std::vector<ItemId>& b) {
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i == *j) return false;
    if (*i < *j) {
      ++i;
    } else {
      ++j;
    }
  }
  return true;
}

Eigen::RowVectorXd unit(const Eigen::RowVectorXd& v) {
  double n = v.norm();
  return n > 0.0 ? Eigen::RowVectorXd(v / n) : Eigen::RowVectorXd(Eigen::RowVectorXd::Zero(v.size()));
}

bool all_finite(double x) { return std::isfinite(x); }

}  // namespace

HardNegatives sample_hard_negatives(const std::vector<std::vector<ItemId>>& item_sets, const Matrix& fused,
                                    int n_neg, const NegativeReservoir* reservoir, std::mt19937_64& rng) {
  const int b = static_cast<int>(item_sets.size());
  if (b < 2) throw std::invalid_argument("hard negative sampling needs a batch of at least 2 sessions");
  if (fused.rows() != b) throw std::invalid_argument("fused embeddings do not match the batch");
  if (n_neg < 1) throw std::invalid_argument("n_neg must be >= 1");

  std::vector<Eigen::RowVectorXd> units(b);
  for (int i = 0; i < b; ++i) units[i] = unit(fused.row(i));
  std::vector<const NegativeReservoir::Entry*> pool;
  if (reservoir != nullptr) pool = reservoir->entries();

  HardNegatives out;
  out.index.resize(b);
  std::uniform_int_distribution<int> other(0, b - 2);
  for (int i = 0; i < b; ++i) {
    std::vector<std::pair<double, int>> ranked;
    for (int j = 0; j < b; ++j) {
      if (j != i && disjoint(item_sets[i], item_sets[j])) ranked.emplace_back(units[i].dot(units[j]), j);
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
    auto& chosen = out.index[i];
    for (size_t t = 0; t < ranked.size() && static_cast<int>(chosen.size()) < n_neg; ++t) {
      chosen.push_back(ranked[t].second);
    }
    if (static_cast<int>(chosen.size()) < n_neg && !pool.empty()) {
      std::vector<int> eligible;
      for (size_t r = 0; r < pool.size(); ++r) {
        if (disjoint(item_sets[i], pool[r]->items)) eligible.push_back(static_cast<int>(r));
      }
      std::shuffle(eligible.begin(), eligible.end(), rng);
      for (size_t t = 0; t < eligible.size() && static_cast<int>(chosen.size()) < n_neg; ++t) {
        chosen.push_back(b + eligible[t]);
        ++out.from_reservoir;
      }
    }
    while (static_cast<int>(chosen.size()) < n_neg) {
      int j = other(rng);
      chosen.push_back(j >= i ? j + 1 : j);
      ++out.fallback;
    }
  }
  return out;
}

double contrastive_loss(const Eigen::RowVectorXd& anchor, const Eigen::RowVectorXd& positive,
                        const Matrix& negatives, double tau, bool strict) {
  if (tau <= 0.0) throw std::invalid_argument("tau must be > 0");
  if (negatives.rows() < 1) throw std::invalid_argument("contrastive loss needs at least one negative");
  ag::Graph g;
  ag::Var a = ag::l2_normalize_rows(g.constant(Matrix(anchor)));
  ag::Var p = ag::l2_normalize_rows(g.constant(Matrix(positive)));
  ag::Var n = ag::l2_normalize_rows(g.constant(negatives));
  ag::Var pos = ag::rowwise_dot(a, p);
  ag::Var logits = ag::scale(ag::concat_cols(pos, ag::matmul_nt(a, n)), 1.0 / tau);
  return (strict ? ag::info_nce_raw_positive(logits, pos) : ag::info_nce(logits)).value()(0, 0);
}

double anneal_temperature(int epoch, const TrainConfig& config) {
  if (epoch < 0) throw std::invalid_argument("epoch must be >= 0");
  double frac = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(config.epochs_max));
  return config.tau_start + (config.tau_end - config.tau_start) * frac;
}

double prediction_loss(const Matrix& probs, const std::vector<int>& targets, double eps, PredictionLossKind kind) {
  ag::Graph g;
  ag::Var p = g.constant(probs);
  ag::Var loss = kind == PredictionLossKind::kBinary ? ag::binary_cross_entropy(p, targets, eps)
                                                     : ag::categorical_cross_entropy(p, targets, eps);
  return loss.value()(0, 0);
}

JointLoss joint_loss(ag::Graph& graph, const Model& model, const PreparedBatch& batch, const TrainConfig& config,
                     double tau, std::mt19937_64& rng, const NegativeReservoir* reservoir, bool training,
                     const HardNegatives* fixed_negatives) {
  if (static_cast<int>(batch.targets.size()) != batch.size) throw std::invalid_argument("batch has no targets");
  JointLoss out;
  out.forward = forward(graph, model, batch, training, &rng);
  const ForwardVars& f = out.forward;
  out.prediction = config.loss == PredictionLossKind::kBinary
                       ? ag::binary_cross_entropy(f.probs, batch.targets, config.eps)
                       : ag::categorical_cross_entropy(f.probs, batch.targets, config.eps);
  if (config.lambda == 0.0) {
    out.contrastive = graph.constant(Matrix::Zero(1, 1));
    out.total = out.prediction;
    return out;
  }

  std::vector<const NegativeReservoir::Entry*> pool;
  if (reservoir != nullptr) pool = reservoir->entries();
  out.negatives = fixed_negatives != nullptr
                      ? *fixed_negatives
                      : sample_hard_negatives(batch.item_sets, f.h_fused.value(), config.n_neg, reservoir, rng);

  ag::Var table = f.h_fused;
  if (!pool.empty()) {
    const int b = batch.size;
    const Eigen::Index d = f.h_fused.cols();
    Matrix base = Matrix::Zero(b + static_cast<Eigen::Index>(pool.size()), d);
    for (size_t r = 0; r < pool.size(); ++r) base.row(b + static_cast<Eigen::Index>(r)) = pool[r]->embedding;
    std::vector<int> rows(b);
    std::iota(rows.begin(), rows.end(), 0);
    table = ag::overlay_rows(graph.constant(std::move(base)), f.h_fused, rows);
  }
  ag::Var anchor = ag::l2_normalize_rows(f.h_sequence);
  ag::Var positive = ag::l2_normalize_rows(f.h_similarity);
  ag::Var pos = ag::rowwise_dot(anchor, positive);
  ag::Var neg = ag::gather_entries(ag::matmul_nt(anchor, ag::l2_normalize_rows(table)), out.negatives.index);
  ag::Var logits = ag::scale(ag::concat_cols(pos, neg), 1.0 / tau);
  out.contrastive = config.strict_infonce ? ag::info_nce_raw_positive(logits, pos) : ag::info_nce(logits);
  out.total = ag::add(out.prediction, ag::scale(out.contrastive, config.lambda));
  return out;
}

LossParts joint_step(Model& model, const PreparedBatch& batch, TrainState& state, const TrainConfig& config) {
  ag::Graph graph;
  JointLoss jl = joint_loss(graph, model, batch, config, state.tau, state.rng, &state.reservoir, true);
  LossParts parts{jl.total.value()(0, 0), jl.prediction.value()(0, 0), jl.contrastive.value()(0, 0)};
  if (!all_finite(parts.total) || !all_finite(parts.prediction) || !all_finite(parts.contrastive)) {
    std::ostringstream msg;
    msg << "non-finite loss (total " << parts.total << ", prediction " << parts.prediction << ", contrastive "
        << parts.contrastive << ") at epoch " << state.epoch << " on batch:";
    for (int i = 0; i < batch.size; ++i) {
      msg << "\n  [";
      for (size_t t = 0; t < batch.sessions[i].size(); ++t) msg << (t ? "," : "") << batch.sessions[i][t];
      msg << "] -> " << batch.targets[i];
    }
    spdlog::error("{}", msg.str());
    throw std::runtime_error(msg.str());
  }
  graph.backward(jl.total);

  std::vector<std::pair<std::string, Matrix>> grads;
  double sq = 0.0;
  for (auto& [name, value] : model.params()) {
    if (!model.trainable(name)) continue;
    const Matrix& g = graph.grad_of(&value);
    if (g.size() == 0) continue;
    sq += g.squaredNorm();
    grads.emplace_back(name, g);
  }
  const double norm = std::sqrt(sq);
  const double clip = config.clip_norm > 0.0 && norm > config.clip_norm ? config.clip_norm / norm : 1.0;

  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  AdamState& adam = state.adam;
  ++adam.t;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(adam.t));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(adam.t));
  for (auto& [name, g] : grads) {
    Matrix& p = model.params().at(name);
    if (clip != 1.0) g *= clip;
    auto [mit, m_new] = adam.m.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
    auto [vit, v_new] = adam.v.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
    Matrix& m = mit->second;
    Matrix& v = vit->second;
    m = kBeta1 * m + (1.0 - kBeta1) * g;
    v = kBeta2 * v + (1.0 - kBeta2) * g.cwiseProduct(g);
    p.array() -= state.lr * ((m.array() / c1) / ((v.array() / c2).sqrt() + kEps) + config.l2 * p.array());
  }

  if (config.lambda != 0.0) {
    state.fallback_negatives += jl.negatives.fallback;
    state.reservoir_negatives += jl.negatives.from_reservoir;
    std::vector<NegativeReservoir::Entry> entries;
    const Matrix& fused = jl.forward.h_fused.value();
    for (int i = 0; i < batch.size; ++i) entries.push_back({batch.item_sets[i], fused.row(i)});
    state.reservoir.push(std::move(entries));
  }
  return parts;
}

ordered_json to_json(const EpochRecord& r) {
  ordered_json j;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["tau"] = r.tau;
  j["loss_total"] = r.loss.total;
  j["loss_prediction"] = r.loss.prediction;
  j["loss_contrastive"] = r.loss.contrastive;
  j["valid_hr"] = r.valid_hr;
  j["valid_mrr"] = r.valid_mrr;
  j["steps"] = r.steps;
  j["fallback_negatives"] = r.fallback_negatives;
  j["reservoir_negatives"] = r.reservoir_negatives;
  return j;
}

std::vector<std::vector<const Session*>> make_batches(const std::vector<const Session*>& examples, int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<std::vector<const Session*>> out;
  for (size_t i = 0; i < examples.size(); i += batch_size) {
    size_t end = std::min(examples.size(), i + static_cast<size_t>(batch_size));
    out.emplace_back(examples.begin() + static_cast<std::ptrdiff_t>(i),
                     examples.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

double learning_rate(int epoch, const TrainConfig& config) {
  return config.lr * std::pow(config.lr_decay, epoch / config.lr_decay_every);
}

bool update_early_stopping(TrainState& state, double metric, int patience) {
  if (metric > state.best_metric) {
    state.best_metric = metric;
    state.epochs_since_improve = 0;
    return false;
  }
  ++state.epochs_since_improve;
  return state.epochs_since_improve >= patience;
}

FitResult fit(Model& model, const std::vector<Session>& train, const std::vector<Session>& valid,
              const TrainConfig& config, const std::optional<std::filesystem::path>& history_path) {
  config.validate();
  if (train.size() < 2) throw std::invalid_argument("training needs at least two examples");
  if (valid.empty()) throw std::invalid_argument("validation set is empty");

  TrainState state;
  state.rng.seed(config.seed ^ 0x5eed5eedULL);
  state.reservoir.capacity_batches = config.reservoir_batches;
  std::vector<const Session*> order;
  for (const Session& s : train) order.push_back(&s);

  std::ofstream history;
  if (history_path) {
    history.open(*history_path, std::ios::trunc);
    if (!history) throw std::runtime_error("cannot write history to " + history_path->string());
  }

  FitResult result;
  std::map<std::string, Matrix> best = model.params();
  for (int epoch = 0; epoch < config.epochs_max; ++epoch) {
    state.epoch = epoch;
    state.lr = learning_rate(epoch, config);
    state.tau = anneal_temperature(epoch, config);
    if (config.reservoir_batches == -1) state.reservoir.batches.clear();
    const int64_t fallback_before = state.fallback_negatives;
    const int64_t reservoir_before = state.reservoir_negatives;

    std::shuffle(order.begin(), order.end(), state.rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = state.lr;
    rec.tau = state.tau;
    for (const auto& members : make_batches(order, config.batch_size)) {
      PreparedBatch batch = prepare_batch(members, model.config());
      LossParts parts = joint_step(model, batch, state, config);
      rec.loss.total += parts.total;
      rec.loss.prediction += parts.prediction;
      rec.loss.contrastive += parts.contrastive;
      ++rec.steps;
    }
    rec.loss.total /= rec.steps;
    rec.loss.prediction /= rec.steps;
    rec.loss.contrastive /= rec.steps;
    rec.fallback_negatives = state.fallback_negatives - fallback_before;
    rec.reservoir_negatives = state.reservoir_negatives - reservoir_before;
    if (rec.fallback_negatives > 0) {
      spdlog::warn("epoch {}: {} negatives drawn with item overlap (no disjoint candidate)", epoch,
                   rec.fallback_negatives);
    }

    Metrics m = evaluate_model(model, valid, config.eval_k, config.batch_size);
    rec.valid_hr = m.hr;
    rec.valid_mrr = m.mrr;
    spdlog::info("epoch {} lr {:.2e} tau {:.3f} loss {:.6f} (pred {:.6f}, con {:.6f}) valid HR@{} {:.2f} MRR@{} {:.2f}",
                 epoch, rec.lr, rec.tau, rec.loss.total, rec.loss.prediction, rec.loss.contrastive, config.eval_k,
                 m.hr, config.eval_k, m.mrr);
    result.history.push_back(rec);
    if (history) history << to_json(rec).dump() << '\n' << std::flush;

    const bool improved = m.hr > state.best_metric;
    const bool stop = update_early_stopping(state, m.hr, config.patience);
    if (improved) {
      best = model.params();
      result.best_epoch = epoch;
      result.best_metric = m.hr;
    }
    if (stop) {
      result.early_stopped = true;
      spdlog::info("early stop after epoch {}: no improvement for {} epochs", epoch, config.patience);
      break;
    }
  }
  model.params() = std::move(best);
  return result;
}

}  // namespace hiphop
