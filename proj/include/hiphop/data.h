#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace hiphop {

using ItemId = int32_t;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One anonymous session. Before ID remapping `source_items` holds the raw
// identifiers; after preprocessing `items` holds contiguous catalog IDs.
struct Session {
  std::string key;
  std::vector<std::string> source_items;
  std::vector<ItemId> items;
  std::optional<ItemId> target;
  // Per-click timestamps in source units, when the format carries them.
  std::vector<int64_t> timestamps;
  // Session-level time used for temporal splits (seconds since epoch).
  int64_t time = 0;

  size_t size() const {
    return items.empty() ? source_items.size() : items.size();
  }
};

struct ItemMetadata {
  std::string title;
  std::string description;
  std::string category;

  bool empty() const {
    return title.empty() && description.empty() && category.empty();
  }
};

struct ItemCatalog {
  // Contiguous IDs are 0..n-1; padding_id() == n is reserved.
  std::vector<std::string> source_ids;
  std::unordered_map<std::string, ItemId> id_map;
  std::vector<int64_t> freq;
  std::vector<std::optional<ItemMetadata>> metadata;

  size_t size() const { return source_ids.size(); }
  ItemId padding_id() const { return static_cast<ItemId>(source_ids.size()); }
  bool has_metadata(ItemId id) const {
    return static_cast<size_t>(id) < metadata.size() && metadata[id].has_value();
  }
  ItemId lookup(const std::string& source) const;
  ItemId add(const std::string& source);
};

struct DatasetStats {
  int64_t items = 0;
  int64_t clicks = 0;
  int64_t train_count = 0;
  int64_t test_count = 0;
  double avg_len = 0.0;
};

enum class SourceFormat { kJsonl, kDiginetica, kYoochoose, kAmazon };

SourceFormat parse_format(const std::string& tag);
std::string format_name(SourceFormat format);

// Reads raw sessions in source order. No filtering happens here.
std::vector<Session> load_sessions(const std::filesystem::path& path, SourceFormat format);
std::vector<Session> parse_jsonl_sessions(std::istream& in);
std::vector<Session> parse_diginetica_csv(std::istream& in);
std::vector<Session> parse_yoochoose_csv(std::istream& in);
// Amazon review dumps: one session per reviewer, reviews in timestamp order.
// A positive `max_gap_seconds` splits a reviewer's history at larger gaps.
std::vector<Session> parse_amazon_reviews(std::istream& in, int64_t max_gap_seconds = 0);

struct FilterConfig {
  int min_len = 2;
  int min_item_freq = 5;
  // Iterate item/session filters until both constraints hold. When false,
  // one length pass then one frequency pass, the order the public SBR
  // preprocessing scripts use.
  bool fixed_point = true;
};

struct Preprocessed {
  std::vector<Session> sessions;
  ItemCatalog catalog;
};

// Filters sessions and items, then remaps surviving items to contiguous IDs
// in order of first appearance.
Preprocessed preprocess(const std::vector<Session>& sessions, const FilterConfig& config = {});

std::vector<Session> augment_prefixes(const std::vector<Session>& sessions);

DatasetStats compute_stats(const std::vector<Session>& train, const std::vector<Session>& test,
                           const ItemCatalog& catalog);

struct MetadataLoadReport {
  int attached = 0;
  int ignored = 0;
  int malformed = 0;
};

// Accepts {"item","title","description","category"} records and the Amazon
// metadata layout ({"asin", "title", "description": [...], "category": [...]}).
MetadataLoadReport load_metadata(const std::filesystem::path& path, ItemCatalog& catalog);
MetadataLoadReport parse_metadata(std::istream& in, ItemCatalog& catalog);

struct Dataset {
  std::vector<Session> train;
  std::vector<Session> test;
  ItemCatalog catalog;
  DatasetStats stats;
};

struct ProtocolConfig {
  SourceFormat format = SourceFormat::kJsonl;
  FilterConfig filter;
  // Diginetica: last 7 days; Yoochoose: last day. Others: final fraction of
  // the time range (or of the session order when sessions carry no times).
  double test_fraction = 0.1;
  int yoochoose_fraction = 64;
  int64_t amazon_max_gap_seconds = 0;
};

// Full chain raw sessions -> labeled train/test examples for a source format.
Dataset build_dataset(std::vector<Session> raw, const ProtocolConfig& config);

// Writes train.jsonl, test.jsonl, catalog.json and stats.json.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

std::string stats_to_json(const DatasetStats& stats);

// Published statistics for the standard datasets: "diginetica",
// "yoochoose1_64", "luxury_beauty", "musical_instruments", "prime_pantry".
std::optional<DatasetStats> reference_stats(const std::string& name);

// Human-readable differences; empty when counts match exactly and avg_len
// is within `avg_len_tol`.
std::vector<std::string> compare_stats(const DatasetStats& actual, const DatasetStats& expected,
                                       double avg_len_tol = 0.01);

// Groups labeled examples by session key and returns the longest
// prefix+target per key, i.e. the original click sequences.
std::vector<std::vector<ItemId>> reconstruct_sessions(const std::vector<Session>& examples);

// Splits off the final `fraction` of distinct sessions (by first appearance)
// as a validation set.
std::pair<std::vector<Session>, std::vector<Session>> split_validation(
    const std::vector<Session>& examples, double fraction);

}  // namespace hiphop
