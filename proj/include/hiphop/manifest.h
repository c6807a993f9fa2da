#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "json.hpp"

namespace hiphop {

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

// Hash over the hashes of a dataset directory's train, test and catalog files.
std::string dataset_hash(const std::filesystem::path& dataset_dir);

const char* code_version();

// One per artifact directory, stored as manifest.json.
struct RunManifest {
  std::string kind;
  std::string config_hash;
  std::string dataset_hash;
  std::string code_version;
  uint64_t seed = 0;
  std::string created_at;
  // Paths relative to the artifact directory, mapped to their SHA-256.
  std::map<std::string, std::string> files;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();
};

// Hashes every listed file (values are filled in) and writes manifest.json.
void write_manifest(const std::filesystem::path& dir, RunManifest manifest);

// Throws std::runtime_error when a listed file is missing or its hash no
// longer matches.
RunManifest read_manifest(const std::filesystem::path& dir, bool verify = true);

}  // namespace hiphop
