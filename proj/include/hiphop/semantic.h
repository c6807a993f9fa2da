#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "hiphop/autograd.h"
#include "hiphop/data.h"

namespace hiphop {

using Matrix = ag::Matrix;

class MetadataAbsent : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmbeddingError : public std::runtime_error {
 public:
  EmbeddingError(const std::string& what, int batch_index = -1)
      : std::runtime_error(what), batch_index_(batch_index) {}
  int batch_index() const { return batch_index_; }

 private:
  int batch_index_;
};

// "The item '<title>' belongs to category <category>. <description>", with
// absent fields elided and the result cut to `max_chars` bytes on a UTF-8
// boundary. Throws MetadataAbsent when every field is empty.
std::string json2sentence(const ItemMetadata& meta, size_t max_chars = 2048);

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::string name() const = 0;
  virtual int dim() const = 0;
  // One vector of width dim() per text.
  virtual std::vector<std::vector<float>> embed(std::span<const std::string> texts) = 0;
  int64_t calls() const { return calls_; }

 protected:
  int64_t calls_ = 0;
};

// Seeded, hash-derived unit vectors. Identical text and seed give identical
// vectors on every run.
class MockProvider : public EmbeddingProvider {
 public:
  MockProvider(int dim, uint64_t seed) : dim_(dim), seed_(seed) {}
  std::string name() const override { return "mock"; }
  int dim() const override { return dim_; }
  std::vector<std::vector<float>> embed(std::span<const std::string> texts) override;

 private:
  int dim_;
  uint64_t seed_;
};

struct HttpProviderConfig {
  // OpenAI-compatible embeddings endpoint root, e.g.
  // "https://open.bigmodel.cn/api/paas/v4" (POST {base}/embeddings).
  std::string base_url = "https://open.bigmodel.cn/api/paas/v4";
  std::string model = "embedding-3";
  std::string api_key_env = "HIPHOP_EMBEDDING_API_KEY";
  int dim = 2048;
  int max_retries = 3;
  int timeout_seconds = 60;
};

class HttpProvider : public EmbeddingProvider {
 public:
  // Reads the key from the configured environment variable; throws
  // EmbeddingError immediately when it is unset.
  explicit HttpProvider(HttpProviderConfig config);
  std::string name() const override { return "http:" + config_.model; }
  int dim() const override { return config_.dim; }
  std::vector<std::vector<float>> embed(std::span<const std::string> texts) override;

 private:
  HttpProviderConfig config_;
  std::string api_key_;
};

// Serves only what the cache already holds; any miss is an error.
class CacheReplayProvider : public EmbeddingProvider {
 public:
  CacheReplayProvider(std::string name, int dim) : name_(std::move(name)), dim_(dim) {}
  std::string name() const override { return name_; }
  int dim() const override { return dim_; }
  std::vector<std::vector<float>> embed(std::span<const std::string> texts) override;

 private:
  std::string name_;
  int dim_;
};

uint64_t fnv1a64(std::string_view data, uint64_t seed = 1469598103934665603ULL);
uint64_t cache_key(const std::string& provider_name, const std::string& text);

// Binary little-endian file:
//   magic "HPEMBC01" | u32 name_len | name bytes | u32 dim | u64 count
//   count x (u64 key | f32 x dim)
class EmbeddingCache {
 public:
  EmbeddingCache(std::filesystem::path path, std::string provider_name, int dim);

  const std::vector<float>* find(uint64_t key) const;
  void insert(uint64_t key, std::vector<float> vec);
  // Rewrites the file through a temporary and rename.
  void flush() const;
  size_t size() const { return order_.size(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  void load();
  std::filesystem::path path_;
  std::string provider_name_;
  int dim_;
  std::unordered_map<uint64_t, std::vector<float>> entries_;
  std::vector<uint64_t> order_;
  bool dirty_ = false;
};

struct EmbedReport {
  int64_t cache_hits = 0;
  int64_t provider_calls = 0;
  int64_t texts_embedded = 0;
};

// Rows follow `texts`. When `cache_path` is empty no cache is used.
Matrix embed_texts(EmbeddingProvider& provider, const std::vector<std::string>& texts,
                   const std::filesystem::path& cache_path, int batch_size = 32,
                   EmbedReport* report = nullptr);

// Raw provider vectors for the items that have metadata.
struct SemanticTable {
  std::string provider;
  int dim_raw = 0;
  std::vector<bool> present;
  // present_items[r] is the item whose vector is raw.row(r).
  std::vector<ItemId> present_items;
  Matrix raw;

  size_t num_items() const { return present.size(); }
};

SemanticTable build_semantic_table(const ItemCatalog& catalog, EmbeddingProvider& provider,
                                   const std::filesystem::path& cache_path, size_t max_chars = 2048,
                                   EmbedReport* report = nullptr);

// Binary little-endian: magic "HPSEMT01" | u32 n | u32 dim_raw | u32 name_len |
// name | n x u8 presence | present rows x f32 x dim_raw.
void write_semantic_table(const SemanticTable& table, const std::filesystem::path& path);
SemanticTable read_semantic_table(const std::filesystem::path& path);

// Two-layer perceptron dim_raw -> hidden -> d with ReLU between layers.
struct SpaceProjector {
  Matrix w1;  // hidden x dim_raw
  Matrix b1;  // 1 x hidden
  Matrix w2;  // d x hidden
  Matrix b2;  // 1 x d

  static SpaceProjector init(int dim_raw, int hidden, int d, std::mt19937_64& rng);
  int dim_raw() const { return static_cast<int>(w1.cols()); }
  int dim_out() const { return static_cast<int>(w2.rows()); }
  Matrix project(const Matrix& raw) const;
};

// Autograd form of the projector; parameters must outlive the graph.
ag::Var project(ag::Graph& graph, ag::Var raw, const Matrix& w1, const Matrix& b1,
                const Matrix& w2, const Matrix& b2);

// Learned rows, uniform in [-1/sqrt(d), 1/sqrt(d)].
Matrix init_learned_table(size_t n, int d, std::mt19937_64& rng);

// The h^(0) table: learned rows, with semantic items replaced by projected
// rows when a table is supplied.
Matrix compose_item_table(const Matrix& learned, const SemanticTable* semantic,
                          const SpaceProjector* projector);

}  // namespace hiphop
