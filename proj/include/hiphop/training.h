#pragma once

#include <deque>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hiphop/data.h"
#include "hiphop/model.h"
#include "json.hpp"

namespace hiphop {

enum class PredictionLossKind {
  // Full-vocabulary binary cross entropy over all n items.
  kBinary,
  kCategorical,
};

struct TrainConfig {
  double lr = 1e-3;
  double lr_decay = 0.1;
  int lr_decay_every = 3;
  double l2 = 1e-5;
  int batch_size = 100;
  int epochs_max = 30;
  int patience = 3;
  double lambda = 0.3;
  int n_neg = 8;
  double tau_start = 0.5;
  double tau_end = 0.1;
  uint64_t seed = 1;
  PredictionLossKind loss = PredictionLossKind::kBinary;
  // InfoNCE whose denominator adds the raw positive similarity instead of
  // its exponential.
  bool strict_infonce = false;
  double clip_norm = 5.0;
  double valid_fraction = 0.1;
  // Past batches kept as negative candidates; -1 keeps the whole epoch.
  int reservoir_batches = 4;
  int eval_k = 20;
  double eps = 1e-12;

  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

// Detached embeddings of previous batches.
struct NegativeReservoir {
  struct Entry {
    std::vector<ItemId> items;
    Eigen::RowVectorXd embedding;
  };
  int capacity_batches = 4;
  std::deque<std::vector<Entry>> batches;

  void push(std::vector<Entry> batch);
  std::vector<const Entry*> entries() const;
};

struct HardNegatives {
  // index[i][t] < batch size refers to a batch row; otherwise to
  // reservoir entry index - batch size in NegativeReservoir::entries() order.
  std::vector<std::vector<int>> index;
  int from_reservoir = 0;
  // Draws that had to accept item overlap.
  int fallback = 0;
};

// item_sets[i] must be sorted and deduplicated. Throws std::invalid_argument
// for a batch smaller than 2.
HardNegatives sample_hard_negatives(const std::vector<std::vector<ItemId>>& item_sets, const Matrix& fused,
                                    int n_neg, const NegativeReservoir* reservoir, std::mt19937_64& rng);

// Scalar InfoNCE on cosine similarities. Rows of `negatives` are the
// negative embeddings.
double contrastive_loss(const Eigen::RowVectorXd& anchor, const Eigen::RowVectorXd& positive,
                        const Matrix& negatives, double tau, bool strict = false);

double anneal_temperature(int epoch, const TrainConfig& config);

// Batch-averaged; targets index columns of probs.
double prediction_loss(const Matrix& probs, const std::vector<int>& targets, double eps = 1e-12,
                       PredictionLossKind kind = PredictionLossKind::kBinary);

struct AdamState {
  int64_t t = 0;
  std::map<std::string, Matrix> m;
  std::map<std::string, Matrix> v;
};

struct TrainState {
  int epoch = 0;
  double best_metric = -1.0;
  int epochs_since_improve = 0;
  double tau = 0.5;
  double lr = 1e-3;
  AdamState adam;
  std::mt19937_64 rng;
  NegativeReservoir reservoir;
  int64_t fallback_negatives = 0;
  int64_t reservoir_negatives = 0;
};

struct LossParts {
  double total = 0.0;
  double prediction = 0.0;
  double contrastive = 0.0;
};

// Joint loss of one batch on the given graph; gradients are not taken.
// `fixed_negatives` skips sampling, which keeps the loss a smooth function
// of the parameters for finite-difference checks.
struct JointLoss {
  ag::Var total;
  ag::Var prediction;
  ag::Var contrastive;
  HardNegatives negatives;
  ForwardVars forward;
};

JointLoss joint_loss(ag::Graph& graph, const Model& model, const PreparedBatch& batch, const TrainConfig& config,
                     double tau, std::mt19937_64& rng, const NegativeReservoir* reservoir, bool training = true,
                     const HardNegatives* fixed_negatives = nullptr);

// One optimizer step. Throws std::runtime_error naming the batch sessions
// when the loss is not finite.
LossParts joint_step(Model& model, const PreparedBatch& batch, TrainState& state, const TrainConfig& config);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double tau = 0.0;
  LossParts loss;
  double valid_hr = 0.0;
  double valid_mrr = 0.0;
  int steps = 0;
  int64_t fallback_negatives = 0;
  int64_t reservoir_negatives = 0;
};

nlohmann::ordered_json to_json(const EpochRecord& r);

struct FitResult {
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double best_metric = 0.0;
  bool early_stopped = false;
};

// Cuts examples into batches of batch_size in order; a trailing batch of one
// is merged into the one before it.
std::vector<std::vector<const Session*>> make_batches(const std::vector<const Session*>& examples, int batch_size);

// Step-wise learning rate for a given epoch.
double learning_rate(int epoch, const TrainConfig& config);

// Returns true when training should stop after recording `metric`.
bool update_early_stopping(TrainState& state, double metric, int patience);

// Trains in place and leaves the best-validation parameters in `model`.
// When history_path is set, one JSON line per epoch is written there.
FitResult fit(Model& model, const std::vector<Session>& train, const std::vector<Session>& valid,
              const TrainConfig& config, const std::optional<std::filesystem::path>& history_path = std::nullopt);

}  // namespace hiphop
