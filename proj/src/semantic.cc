#include "hiphop/semantic.h"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"
#include "json.hpp"

#include <spdlog/spdlog.h>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <thread>

namespace hiphop {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::string json2sentence(const ItemMetadata& meta, size_t max_chars) {
  if (meta.empty()) throw MetadataAbsent("item has no metadata fields");
  std::string out;
  if (!meta.title.empty() || !meta.category.empty()) {
    out = "The item";
    if (!meta.title.empty()) out += " '" + meta.title + "'";
    if (!meta.category.empty()) out += " belongs to category " + meta.category;
    out += ".";
  }
  if (!meta.description.empty()) {
    if (!out.empty()) out += " ";
    out += meta.description;
  }
  if (out.size() > max_chars) {
    size_t cut = max_chars;
    while (cut > 0 && (static_cast<unsigned char>(out[cut]) & 0xC0) == 0x80) --cut;
    out.resize(cut);
  }
  return out;
}

uint64_t fnv1a64(std::string_view data, uint64_t seed) {
  uint64_t h = seed;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

uint64_t cache_key(const std::string& provider_name, const std::string& text) {
  uint64_t h = fnv1a64(provider_name);
  h = fnv1a64(std::string_view("\0", 1), h);
  return fnv1a64(text, h);
}

std::vector<std::vector<float>> MockProvider::embed(std::span<const std::string> texts) {
  ++calls_;
  std::vector<std::vector<float>> out;
  out.reserve(texts.size());
  for (const auto& text : texts) {
    std::mt19937_64 rng(seed_ ^ fnv1a64(text));
    std::normal_distribution<double> normal;
    std::vector<double> v(static_cast<size_t>(dim_));
    double norm = 0;
    for (double& x : v) {
      x = normal(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    std::vector<float> f(v.size());
    for (size_t i = 0; i < v.size(); ++i) f[i] = static_cast<float>(v[i] / norm);
    out.push_back(std::move(f));
  }
  return out;
}

namespace {

struct ParsedUrl {
  std::string origin;
  std::string path;
};

ParsedUrl parse_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw EmbeddingError("provider base_url lacks a scheme: " + url);
  auto path_start = url.find('/', scheme_end + 3);
  ParsedUrl p;
  p.origin = url.substr(0, path_start);
  p.path = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!p.path.empty() && p.path.back() == '/') p.path.pop_back();
  return p;
}

}  // namespace

HttpProvider::HttpProvider(HttpProviderConfig config) : config_(std::move(config)) {
  const char* key = std::getenv(config_.api_key_env.c_str());
  if (key == nullptr || *key == '\0') {
    throw EmbeddingError("http provider requires credentials in environment variable " + config_.api_key_env);
  }
  api_key_ = key;
}

std::vector<std::vector<float>> HttpProvider::embed(std::span<const std::string> texts) {
  ++calls_;
  ParsedUrl url = parse_url(config_.base_url);
  httplib::Client client(url.origin);
  client.set_read_timeout(config_.timeout_seconds, 0);
  client.set_connection_timeout(config_.timeout_seconds, 0);
  client.set_bearer_token_auth(api_key_);

  json body;
  body["model"] = config_.model;
  body["input"] = std::vector<std::string>(texts.begin(), texts.end());
  body["dimensions"] = config_.dim;
  const std::string payload = body.dump();

  std::string last_error;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(200 * attempt));
    auto res = client.Post(url.path + "/embeddings", payload, "application/json");
    if (!res) {
      last_error = "transport error " + httplib::to_string(res.error());
      continue;
    }
    if (res->status != 200) {
      last_error = "HTTP " + std::to_string(res->status);
      // Client errors other than rate limiting will not improve on retry.
      if (res->status >= 400 && res->status < 500 && res->status != 429) break;
      continue;
    }
    try {
      json reply = json::parse(res->body);
      std::vector<std::vector<float>> out(texts.size());
      for (const auto& rec : reply.at("data")) {
        size_t idx = rec.at("index").get<size_t>();
        if (idx >= out.size()) throw EmbeddingError("response index out of range");
        out[idx] = rec.at("embedding").get<std::vector<float>>();
      }
      for (const auto& v : out) {
        if (static_cast<int>(v.size()) != config_.dim) throw EmbeddingError("response vector has wrong width");
      }
      return out;
    } catch (const std::exception& e) {
      last_error = std::string("malformed response: ") + e.what();
    }
  }
  throw EmbeddingError("embedding request failed: " + last_error);
}

std::vector<std::vector<float>> CacheReplayProvider::embed(std::span<const std::string> texts) {
  throw EmbeddingError("cache replay provider has no entry for " + std::to_string(texts.size()) + " text(s)");
}

namespace {

constexpr char kCacheMagic[8] = {'H', 'P', 'E', 'M', 'B', 'C', '0', '1'};
constexpr char kTableMagic[8] = {'H', 'P', 'S', 'E', 'M', 'T', '0', '1'};

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw EmbeddingError(std::string("truncated ") + what);
  return v;
}

}  // namespace

EmbeddingCache::EmbeddingCache(std::filesystem::path path, std::string provider_name, int dim)
    : path_(std::move(path)), provider_name_(std::move(provider_name)), dim_(dim) {
  if (std::filesystem::exists(path_)) load();
}

void EmbeddingCache::load() {
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw EmbeddingError("cannot open cache " + path_.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCacheMagic, 8) != 0) {
    throw EmbeddingError("cache " + path_.string() + " is corrupt: bad magic");
  }
  auto name_len = get<uint32_t>(in, "cache header");
  if (name_len > 4096) throw EmbeddingError("cache " + path_.string() + " is corrupt: bad name length");
  std::string name(name_len, '\0');
  if (!in.read(name.data(), name_len)) throw EmbeddingError("cache " + path_.string() + " is corrupt: truncated header");
  auto dim = get<uint32_t>(in, "cache header");
  auto count = get<uint64_t>(in, "cache header");
  if (name != provider_name_) {
    throw EmbeddingError("cache " + path_.string() + " belongs to provider '" + name + "', not '" + provider_name_ + "'");
  }
  if (static_cast<int>(dim) != dim_) {
    throw EmbeddingError("cache " + path_.string() + " has width " + std::to_string(dim) + ", expected " +
                         std::to_string(dim_));
  }
  auto header_end = static_cast<uint64_t>(in.tellg());
  auto expected = header_end + count * (sizeof(uint64_t) + sizeof(float) * dim);
  if (std::filesystem::file_size(path_) != expected) {
    throw EmbeddingError("cache " + path_.string() + " is corrupt: size does not match record count");
  }
  for (uint64_t i = 0; i < count; ++i) {
    auto key = get<uint64_t>(in, "cache record");
    std::vector<float> v(dim);
    if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(sizeof(float) * dim))) {
      throw EmbeddingError("cache " + path_.string() + " is corrupt: truncated record");
    }
    if (entries_.emplace(key, std::move(v)).second) order_.push_back(key);
  }
}

const std::vector<float>* EmbeddingCache::find(uint64_t key) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second;
}

void EmbeddingCache::insert(uint64_t key, std::vector<float> vec) {
  if (static_cast<int>(vec.size()) != dim_) throw EmbeddingError("cache insert: wrong vector width");
  if (entries_.emplace(key, std::move(vec)).second) {
    order_.push_back(key);
    dirty_ = true;
  }
}

void EmbeddingCache::flush() const {
  if (!dirty_ && std::filesystem::exists(path_)) return;
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  auto tmp = path_;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw EmbeddingError("cannot write cache " + tmp.string());
    out.write(kCacheMagic, 8);
    put(out, static_cast<uint32_t>(provider_name_.size()));
    out.write(provider_name_.data(), static_cast<std::streamsize>(provider_name_.size()));
    put(out, static_cast<uint32_t>(dim_));
    put(out, static_cast<uint64_t>(order_.size()));
    for (uint64_t key : order_) {
      put(out, key);
      const auto& v = entries_.at(key);
      out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(sizeof(float) * v.size()));
    }
  }
  std::filesystem::rename(tmp, path_);
}

Matrix embed_texts(EmbeddingProvider& provider, const std::vector<std::string>& texts,
                   const std::filesystem::path& cache_path, int batch_size, EmbedReport* report) {
  const int dim = provider.dim();
  std::optional<EmbeddingCache> cache;
  if (!cache_path.empty()) cache.emplace(cache_path, provider.name(), dim);

  std::vector<uint64_t> keys(texts.size());
  std::unordered_map<uint64_t, std::vector<float>> fresh;
  std::vector<size_t> pending;
  int64_t hits = 0;
  for (size_t i = 0; i < texts.size(); ++i) {
    keys[i] = cache_key(provider.name(), texts[i]);
    if (cache && cache->find(keys[i])) {
      ++hits;
    } else if (!fresh.count(keys[i])) {
      fresh.emplace(keys[i], std::vector<float>{});
      pending.push_back(i);
    }
  }

  const int64_t calls_before = provider.calls();
  const size_t step = static_cast<size_t>(std::max(batch_size, 1));
  for (size_t start = 0, b = 0; start < pending.size(); start += step, ++b) {
    size_t end = std::min(start + step, pending.size());
    std::vector<std::string> batch;
    for (size_t j = start; j < end; ++j) batch.push_back(texts[pending[j]]);
    std::vector<std::vector<float>> vecs;
    try {
      vecs = provider.embed(batch);
    } catch (const std::exception& e) {
      if (cache) cache->flush();
      throw EmbeddingError(std::string("batch ") + std::to_string(b) + ": " + e.what(), static_cast<int>(b));
    }
    if (vecs.size() != batch.size()) {
      throw EmbeddingError("batch " + std::to_string(b) + ": provider returned wrong number of vectors",
                           static_cast<int>(b));
    }
    for (size_t j = start; j < end; ++j) {
      auto& v = vecs[j - start];
      if (static_cast<int>(v.size()) != dim) {
        throw EmbeddingError("batch " + std::to_string(b) + ": provider returned width " +
                                 std::to_string(v.size()) + ", expected " + std::to_string(dim),
                             static_cast<int>(b));
      }
      if (cache) cache->insert(keys[pending[j]], v);
      fresh[keys[pending[j]]] = std::move(v);
    }
  }
  if (cache) cache->flush();

  Matrix out(static_cast<Eigen::Index>(texts.size()), dim);
  for (size_t i = 0; i < texts.size(); ++i) {
    const std::vector<float>* v = cache ? cache->find(keys[i]) : nullptr;
    if (v == nullptr) v = &fresh.at(keys[i]);
    for (int c = 0; c < dim; ++c) out(static_cast<Eigen::Index>(i), c) = static_cast<double>((*v)[c]);
  }
  if (report) {
    report->cache_hits += hits;
    report->provider_calls += provider.calls() - calls_before;
    report->texts_embedded += static_cast<int64_t>(pending.size());
  }
  return out;
}

SemanticTable build_semantic_table(const ItemCatalog& catalog, EmbeddingProvider& provider,
                                   const std::filesystem::path& cache_path, size_t max_chars,
                                   EmbedReport* report) {
  SemanticTable table;
  table.provider = provider.name();
  table.dim_raw = provider.dim();
  table.present.assign(catalog.size(), false);
  std::vector<std::string> texts;
  for (size_t id = 0; id < catalog.size(); ++id) {
    if (!catalog.has_metadata(static_cast<ItemId>(id))) continue;
    try {
      texts.push_back(json2sentence(*catalog.metadata[id], max_chars));
    } catch (const MetadataAbsent&) {
      continue;
    }
    table.present[id] = true;
    table.present_items.push_back(static_cast<ItemId>(id));
  }
  table.raw = texts.empty() ? Matrix(0, table.dim_raw) : embed_texts(provider, texts, cache_path, 32, report);
  return table;
}

void write_semantic_table(const SemanticTable& table, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw EmbeddingError("cannot write " + path.string());
  out.write(kTableMagic, 8);
  put(out, static_cast<uint32_t>(table.present.size()));
  put(out, static_cast<uint32_t>(table.dim_raw));
  put(out, static_cast<uint32_t>(table.provider.size()));
  out.write(table.provider.data(), static_cast<std::streamsize>(table.provider.size()));
  for (bool p : table.present) put(out, static_cast<uint8_t>(p ? 1 : 0));
  for (Eigen::Index r = 0; r < table.raw.rows(); ++r) {
    for (Eigen::Index c = 0; c < table.raw.cols(); ++c) put(out, static_cast<float>(table.raw(r, c)));
  }
}

SemanticTable read_semantic_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw EmbeddingError("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kTableMagic, 8) != 0) {
    throw EmbeddingError(path.string() + " is not a semantic table");
  }
  SemanticTable t;
  auto n = get<uint32_t>(in, "semantic table");
  t.dim_raw = static_cast<int>(get<uint32_t>(in, "semantic table"));
  auto name_len = get<uint32_t>(in, "semantic table");
  t.provider.resize(name_len);
  if (!in.read(t.provider.data(), name_len)) throw EmbeddingError("truncated semantic table");
  t.present.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    t.present[i] = get<uint8_t>(in, "semantic table") != 0;
    if (t.present[i]) t.present_items.push_back(static_cast<ItemId>(i));
  }
  t.raw.resize(static_cast<Eigen::Index>(t.present_items.size()), t.dim_raw);
  for (Eigen::Index r = 0; r < t.raw.rows(); ++r) {
    for (Eigen::Index c = 0; c < t.raw.cols(); ++c) t.raw(r, c) = get<float>(in, "semantic table");
  }
  return t;
}

SpaceProjector SpaceProjector::init(int dim_raw, int hidden, int d, std::mt19937_64& rng) {
  auto uniform = [&](Eigen::Index rows, Eigen::Index cols, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
  };
  SpaceProjector p;
  p.w1 = uniform(hidden, dim_raw, 1.0 / std::sqrt(static_cast<double>(dim_raw)));
  p.b1 = Matrix::Zero(1, hidden);
  p.w2 = uniform(d, hidden, 1.0 / std::sqrt(static_cast<double>(hidden)));
  p.b2 = Matrix::Zero(1, d);
  return p;
}

Matrix SpaceProjector::project(const Matrix& raw) const {
  if (raw.cols() != w1.cols()) {
    throw std::invalid_argument("projector expects width " + std::to_string(w1.cols()) + ", got " +
                                std::to_string(raw.cols()));
  }
  Matrix hidden = ((raw * w1.transpose()).rowwise() + b1.row(0)).cwiseMax(0.0);
  return (hidden * w2.transpose()).rowwise() + b2.row(0);
}

ag::Var project(ag::Graph& graph, ag::Var raw, const Matrix& w1, const Matrix& b1, const Matrix& w2,
                const Matrix& b2) {
  if (raw.cols() != w1.cols()) {
    throw std::invalid_argument("projector expects width " + std::to_string(w1.cols()) + ", got " +
                                std::to_string(raw.cols()));
  }
  ag::Var hidden = ag::relu(ag::add_row(ag::matmul_nt(raw, graph.parameter(&w1)), graph.parameter(&b1)));
  return ag::add_row(ag::matmul_nt(hidden, graph.parameter(&w2)), graph.parameter(&b2));
}

Matrix init_learned_table(size_t n, int d, std::mt19937_64& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(d));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(static_cast<Eigen::Index>(n), d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix compose_item_table(const Matrix& learned, const SemanticTable* semantic, const SpaceProjector* projector) {
  Matrix table = learned;
  if (semantic == nullptr || projector == nullptr || semantic->present_items.empty()) return table;
  Matrix projected = projector->project(semantic->raw);
  for (size_t r = 0; r < semantic->present_items.size(); ++r) {
    table.row(semantic->present_items[r]) = projected.row(static_cast<Eigen::Index>(r));
  }
  return table;
}

}  // namespace hiphop
