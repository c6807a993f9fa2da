#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hiphop/data.h"
#include "hiphop/model.h"
#include "hiphop/training.h"

namespace hiphop {

struct Metrics {
  // Percentages in [0, 100].
  double hr = 0.0;
  double mrr = 0.0;
  int k = 20;
  int64_t n_examples = 0;
};

// 1 + number of items scoring strictly higher, plus every other item tied
// with the target.
int rank_target(std::span<const double> scores, int target);

Metrics compute_metrics(std::span<const int> ranks, int k = 20);

// Ranks of the targets of `examples` under the model, batched in order.
std::vector<int> rank_examples(const Model& model, const std::vector<const Session*>& examples,
                               int batch_size = 100);
Metrics evaluate_model(const Model& model, const std::vector<Session>& examples, int k = 20,
                       int batch_size = 100, std::vector<int>* ranks = nullptr);

// Baselines fit on the full training sessions recovered from the labeled
// training examples.
std::vector<int> pop_ranks(const std::vector<Session>& train, const std::vector<Session>& test, size_t n_items);
std::vector<int> s_pop_ranks(const std::vector<Session>& train, const std::vector<Session>& test, size_t n_items);
// Binary item x session cosine, keeping each item's `neighbors` most similar
// other items.
class ItemKnn {
 public:
  ItemKnn(const std::vector<Session>& train, size_t n_items, int neighbors = 500);
  // Scores every item against `query`; zero outside the neighbor list.
  const std::vector<double>& scores(ItemId query);

 private:
  size_t n_items_;
  int neighbors_;
  std::vector<std::vector<int>> sessions_of_;
  std::vector<std::vector<ItemId>> sets_;
  std::unordered_map<ItemId, std::vector<double>> cache_;
};

std::vector<int> item_knn_ranks(const std::vector<Session>& train, const std::vector<Session>& test,
                                size_t n_items, int neighbors = 500);

Metrics baseline_pop(const std::vector<Session>& train, const std::vector<Session>& test, size_t n_items,
                     int k = 20);
Metrics baseline_s_pop(const std::vector<Session>& train, const std::vector<Session>& test, size_t n_items,
                       int k = 20);
Metrics baseline_item_knn(const std::vector<Session>& train, const std::vector<Session>& test, size_t n_items,
                          int k = 20, int neighbors = 500);

enum class Variant { kFull, kNoMultiIntent, kNoInterSim, kNoGlobalSim, kNoLocalSim, kNoContrastive, kNoSemantic };

// Accepts "w/o MultiIntent", "w/o-MultiIntent", "wo_multiintent" and the
// like. Throws std::invalid_argument on anything else.
Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);
void apply_variant(Variant v, ModelConfig& model, TrainConfig& train);

struct AblationRow {
  std::string name;
  Metrics metrics;
};

using VariantRunner = std::function<Metrics(const ModelConfig&, const TrainConfig&)>;

// The full model first, then each listed variant.
std::vector<AblationRow> run_ablation(const ModelConfig& model, const TrainConfig& train,
                                      const std::vector<std::string>& variants, const VariantRunner& run);

std::string metrics_markdown(const std::vector<AblationRow>& rows);
std::string metrics_csv(const std::vector<AblationRow>& rows);

void write_rank_dump(const std::filesystem::path& path, const std::vector<Session>& examples,
                     const std::vector<int>& ranks);

}  // namespace hiphop
