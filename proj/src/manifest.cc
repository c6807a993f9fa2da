#include "hiphop/manifest.h"

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <memory>
#include <stdexcept>

#ifndef HIPHOP_VERSION
#define HIPHOP_VERSION "unknown"
#endif

namespace hiphop {

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
      throw std::runtime_error("sha256 init failed");
    }
  }
  void update(const void* data, size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw std::runtime_error("sha256 update failed");
  }
  std::string hex() {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), digest, &len) != 1) throw std::runtime_error("sha256 final failed");
    std::string out;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
      std::snprintf(buf, sizeof(buf), "%02x", digest[i]);
      out += buf;
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

std::string utc_now() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data.data(), data.size());
  return h.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Sha256 h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h.update(buf, static_cast<size_t>(in.gcount()));
  }
  return h.hex();
}

std::string dataset_hash(const std::filesystem::path& dir) {
  std::string joined;
  for (const char* name : {"train.jsonl", "test.jsonl", "catalog.json"}) {
    joined += sha256_file(dir / name);
    joined += '\n';
  }
  return sha256_hex(joined);
}

const char* code_version() { return HIPHOP_VERSION; }

void write_manifest(const std::filesystem::path& dir, RunManifest m) {
  for (auto& [rel, hash] : m.files) hash = sha256_file(dir / rel);
  if (m.code_version.empty()) m.code_version = code_version();
  if (m.created_at.empty()) m.created_at = utc_now();
  nlohmann::ordered_json j;
  j["kind"] = m.kind;
  j["code_version"] = m.code_version;
  j["seed"] = m.seed;
  j["config_hash"] = m.config_hash;
  j["dataset_hash"] = m.dataset_hash;
  j["created_at"] = m.created_at;
  j["files"] = m.files;
  j["extra"] = m.extra;
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << j.dump(2) << '\n';
}

RunManifest read_manifest(const std::filesystem::path& dir, bool verify) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + dir.string());
  nlohmann::ordered_json j = nlohmann::ordered_json::parse(in);
  RunManifest m;
  m.kind = j.value("kind", "");
  m.code_version = j.value("code_version", "");
  m.seed = j.value("seed", uint64_t{0});
  m.config_hash = j.value("config_hash", "");
  m.dataset_hash = j.value("dataset_hash", "");
  m.created_at = j.value("created_at", "");
  m.files = j.value("files", std::map<std::string, std::string>{});
  if (j.contains("extra")) m.extra = j["extra"];
  if (verify) {
    for (const auto& [rel, hash] : m.files) {
      if (!std::filesystem::exists(dir / rel)) throw std::runtime_error("manifest lists missing file " + rel);
      if (sha256_file(dir / rel) != hash) {
        throw std::runtime_error("hash mismatch for " + (dir / rel).string() + ": artifact modified after writing");
      }
    }
  }
  return m;
}

}  // namespace hiphop
