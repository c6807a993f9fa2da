// hiphop: preprocess, embed, train, evaluate and report from one binary.

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hiphop/data.h"
#include "hiphop/eval.h"
#include "hiphop/manifest.h"
#include "hiphop/model.h"
#include "hiphop/report.h"
#include "hiphop/semantic.h"
#include "hiphop/training.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace hiphop {
namespace {

// Exit codes: 0 success, 1 operation failed, 2 usage or configuration error.
constexpr int kFailed = 1;
constexpr int kConfigError = 2;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// ---- preprocess

struct PreprocessArgs {
  std::string raw;
  std::string out;
  std::string format = "jsonl";
  int min_item_freq = 5;
  int min_len = 2;
  std::string filter = "auto";
  double test_fraction = 0.1;
  int yoochoose_fraction = 64;
  int64_t amazon_max_gap = 0;
  std::string metadata;
  std::string expect_stats;
};

int cmd_preprocess(const PreprocessArgs& a) {
  if (!fs::exists(a.raw)) throw ConfigError("input path does not exist: " + a.raw);
  ProtocolConfig protocol;
  protocol.format = parse_format(a.format);
  protocol.filter.min_item_freq = a.min_item_freq;
  protocol.filter.min_len = a.min_len;
  if (a.filter == "auto") {
    // The standard click-log protocols filter once: short sessions, rare
    // items, short sessions again.
    protocol.filter.fixed_point =
        protocol.format != SourceFormat::kDiginetica && protocol.format != SourceFormat::kYoochoose;
  } else if (a.filter == "fixed" || a.filter == "single") {
    protocol.filter.fixed_point = a.filter == "fixed";
  } else {
    throw ConfigError("--filter must be auto, fixed or single");
  }
  protocol.test_fraction = a.test_fraction;
  protocol.yoochoose_fraction = a.yoochoose_fraction;
  protocol.amazon_max_gap_seconds = a.amazon_max_gap;

  std::optional<DatasetStats> expected;
  if (!a.expect_stats.empty()) {
    expected = reference_stats(a.expect_stats);
    if (!expected) throw ConfigError("no reference statistics named '" + a.expect_stats + "'");
  }

  Dataset ds = build_dataset(load_sessions(a.raw, protocol.format), protocol);
  if (!a.metadata.empty()) {
    MetadataLoadReport r = load_metadata(a.metadata, ds.catalog);
    spdlog::info("metadata: {} attached, {} ignored, {} malformed", r.attached, r.ignored, r.malformed);
  }
  fs::create_directories(a.out);
  write_dataset(ds, a.out);

  ordered_json cfg;
  cfg["format"] = format_name(protocol.format);
  cfg["min_item_freq"] = a.min_item_freq;
  cfg["min_len"] = a.min_len;
  cfg["fixed_point"] = protocol.filter.fixed_point;
  cfg["test_fraction"] = a.test_fraction;
  cfg["yoochoose_fraction"] = a.yoochoose_fraction;
  cfg["amazon_max_gap"] = a.amazon_max_gap;
  cfg["metadata"] = !a.metadata.empty();
  RunManifest m;
  m.kind = "dataset";
  m.config_hash = sha256_hex(cfg.dump());
  m.dataset_hash = dataset_hash(a.out);
  m.files = {{"train.jsonl", ""}, {"test.jsonl", ""}, {"catalog.json", ""}, {"stats.json", ""}};
  m.extra["config"] = cfg;
  m.extra["source"] = fs::absolute(a.raw).string();
  write_manifest(a.out, m);

  std::cout << stats_to_json(ds.stats) << '\n';
  if (expected) {
    auto diffs = compare_stats(ds.stats, *expected);
    if (!diffs.empty()) {
      for (const auto& d : diffs) std::cerr << "stats mismatch: " << d << '\n';
      return kFailed;
    }
    std::cerr << "stats match " << a.expect_stats << '\n';
  }
  return 0;
}

// ---- embed

struct EmbedArgs {
  std::string dataset;
  std::string provider = "mock";
  uint64_t seed = 7;
  int dim = 2048;
  std::string cache;
  std::string out;
  size_t max_chars = 2048;
  std::string base_url;
  std::string model;
  std::string replay_name = "mock";
};

int cmd_embed(const EmbedArgs& a) {
  ItemCatalog catalog = read_dataset(a.dataset).catalog;
  std::unique_ptr<EmbeddingProvider> provider;
  if (a.provider == "mock") {
    provider = std::make_unique<MockProvider>(a.dim, a.seed);
  } else if (a.provider == "http") {
    HttpProviderConfig c;
    if (!a.base_url.empty()) c.base_url = a.base_url;
    if (!a.model.empty()) c.model = a.model;
    c.dim = a.dim;
    try {
      provider = std::make_unique<HttpProvider>(c);
    } catch (const EmbeddingError& e) {
      throw ConfigError(e.what());
    }
  } else if (a.provider == "replay") {
    provider = std::make_unique<CacheReplayProvider>(a.replay_name, a.dim);
  } else {
    throw ConfigError("unknown provider '" + a.provider + "' (mock, http, replay)");
  }

  fs::path out = a.out.empty() ? fs::path(a.dataset) / "semantic" : fs::path(a.out);
  fs::create_directories(out);
  fs::path cache = a.cache.empty() ? out / "embeddings.cache" : fs::path(a.cache);
  EmbedReport report;
  SemanticTable table = build_semantic_table(catalog, *provider, cache, a.max_chars, &report);
  write_semantic_table(table, out / "semantic.bin");

  ordered_json cfg;
  cfg["provider"] = provider->name();
  cfg["dim"] = a.dim;
  cfg["max_chars"] = a.max_chars;
  if (a.provider == "mock") cfg["seed"] = a.seed;
  RunManifest m;
  m.kind = "semantic";
  m.seed = a.seed;
  m.config_hash = sha256_hex(cfg.dump());
  m.dataset_hash = dataset_hash(a.dataset);
  m.files = {{"semantic.bin", ""}};
  m.extra["config"] = cfg;
  m.extra["items_with_vectors"] = table.present_items.size();
  m.extra["provider_calls"] = report.provider_calls;
  m.extra["cache_hits"] = report.cache_hits;
  write_manifest(out, m);

  std::cout << "items with vectors: " << table.present_items.size() << " of " << catalog.size() << '\n'
            << "provider calls: " << report.provider_calls << '\n'
            << "cache hits: " << report.cache_hits << '\n';
  return 0;
}

// ---- train

struct TrainArgs {
  std::string dataset;
  std::string config;
  std::string out;
  std::string semantic;
  std::optional<uint64_t> seed;
  std::optional<int> epochs;
  std::vector<std::string> ablate;
  std::string device = "cpu";
};

struct ResolvedConfig {
  ModelConfig model;
  TrainConfig train;
};

ResolvedConfig load_config(const std::string& path) {
  ResolvedConfig rc;
  if (path.empty()) return rc;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  json j;
  try {
    j = json::parse(in);
    for (const auto& [key, _] : j.items()) {
      if (key != "model" && key != "train") throw ConfigError("unknown config section '" + key + "'");
    }
    if (j.contains("model")) rc.model = model_config_from_json(j["model"]);
    if (j.contains("train")) rc.train = train_config_from_json(j["train"]);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return rc;
}

int cmd_train(const TrainArgs& a) {
  if (a.device != "cpu" && a.device != "auto") throw ConfigError("unknown device '" + a.device + "' (cpu, auto)");
  if (a.device == "auto") spdlog::warn("no accelerator backend is built in; falling back to CPU");

  ResolvedConfig rc = load_config(a.config);
  if (a.seed) rc.train.seed = *a.seed;
  if (a.epochs) rc.train.epochs_max = *a.epochs;
  std::vector<std::string> applied;
  for (const auto& name : a.ablate) {
    Variant v = parse_variant(name);
    apply_variant(v, rc.model, rc.train);
    applied.push_back(variant_name(v));
  }
  rc.model.validate();
  rc.train.validate();

  Dataset ds = read_dataset(a.dataset);
  std::optional<SemanticTable> semantic;
  if (rc.model.use_semantic) {
    fs::path sem = a.semantic.empty() ? fs::path(a.dataset) / "semantic" : fs::path(a.semantic);
    read_manifest(sem);
    semantic = read_semantic_table(sem / "semantic.bin");
  }
  auto [train, valid] = split_validation(ds.train, rc.train.valid_fraction);
  spdlog::info("{} training examples, {} validation examples, {} items", train.size(), valid.size(),
               ds.catalog.size());

  Model model(rc.model, ds.catalog.size(), std::move(semantic), rc.train.seed);
  fs::create_directories(a.out);
  FitResult fr = fit(model, train, valid, rc.train, fs::path(a.out) / "history.jsonl");
  model.save(a.out);

  ordered_json cfg;
  cfg["model"] = to_json(rc.model);
  cfg["train"] = to_json(rc.train);
  write_text(fs::path(a.out) / "config.json", cfg.dump(2) + "\n");

  RunManifest m;
  m.kind = "checkpoint";
  m.seed = rc.train.seed;
  m.config_hash = sha256_hex(cfg.dump());
  m.dataset_hash = dataset_hash(a.dataset);
  m.files = {{"model.json", ""}, {"config.json", ""}, {"history.jsonl", ""}};
  for (const auto& [name, _] : model.params()) m.files["params/" + name + ".f32"] = "";
  if (model.semantic()) m.files["semantic.bin"] = "";
  m.extra["ablations"] = applied;
  m.extra["dataset"] = fs::absolute(a.dataset).string();
  m.extra["best_epoch"] = fr.best_epoch;
  m.extra["best_valid_hr"] = fr.best_metric;
  m.extra["early_stopped"] = fr.early_stopped;
  m.extra["device"] = "cpu";
  write_manifest(a.out, m);

  std::cout << "best epoch " << fr.best_epoch << ", validation HR@" << rc.train.eval_k << " " << fr.best_metric
            << '\n';
  return 0;
}

// ---- evaluate

struct EvaluateArgs {
  std::string checkpoint;
  std::string dataset;
  int k = 20;
  int batch_size = 100;
  std::vector<std::string> baselines;
  std::string ranks;
  std::string csv;
  std::string markdown;
};

int cmd_evaluate(const EvaluateArgs& a) {
  if (!fs::exists(fs::path(a.checkpoint) / "manifest.json")) {
    throw ConfigError("no checkpoint at " + a.checkpoint);
  }
  RunManifest m = read_manifest(a.checkpoint);
  if (m.kind != "checkpoint") throw ConfigError(a.checkpoint + " is a " + m.kind + " artifact, not a checkpoint");
  Dataset ds = read_dataset(a.dataset);
  if (m.dataset_hash != dataset_hash(a.dataset)) {
    spdlog::warn("checkpoint was trained on a different dataset (hash mismatch)");
  }
  Model model = Model::load(a.checkpoint);
  if (model.n_items() != ds.catalog.size()) {
    throw ConfigError("checkpoint has " + std::to_string(model.n_items()) + " items, dataset has " +
                      std::to_string(ds.catalog.size()));
  }

  std::vector<AblationRow> rows;
  std::vector<int> ranks;
  rows.push_back({"HIPHOP", evaluate_model(model, ds.test, a.k, a.batch_size, &ranks)});
  for (const auto& b : a.baselines) {
    const size_t n = ds.catalog.size();
    if (b == "pop") {
      rows.push_back({"POP", baseline_pop(ds.train, ds.test, n, a.k)});
    } else if (b == "s-pop") {
      rows.push_back({"S-POP", baseline_s_pop(ds.train, ds.test, n, a.k)});
    } else if (b == "item-knn") {
      rows.push_back({"Item-KNN", baseline_item_knn(ds.train, ds.test, n, a.k)});
    } else {
      throw ConfigError("unknown baseline '" + b + "' (pop, s-pop, item-knn)");
    }
  }
  if (!a.ranks.empty()) write_rank_dump(a.ranks, ds.test, ranks);
  std::string csv = metrics_csv(rows);
  std::cout << csv;
  if (!a.csv.empty()) write_text(a.csv, csv);
  if (!a.markdown.empty()) write_text(a.markdown, metrics_markdown(rows));
  return 0;
}

// ---- report

struct ReportArgs {
  std::vector<std::string> histories;
  std::string markdown;
  std::string csv;
  std::string plot;
  int k = 20;
};

int cmd_report(const ReportArgs& a) {
  if (a.histories.empty()) throw ConfigError("report needs at least one history file");
  std::vector<RunHistory> runs;
  for (const auto& h : a.histories) runs.push_back(read_history(h));
  std::string md = history_markdown(runs, a.k);
  std::cout << md;
  if (!a.markdown.empty()) write_text(a.markdown, md);
  if (!a.csv.empty()) write_text(a.csv, history_csv(runs));
  if (!a.plot.empty()) {
    for (const auto& p : plot_histories(runs, a.plot)) std::cerr << "wrote " << p.string() << '\n';
  }
  return 0;
}

}  // namespace
}  // namespace hiphop

int main(int argc, char** argv) {
  using namespace hiphop;
  CLI::App app{"HIPHOP session-based recommender"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error")->capture_default_str();

  PreprocessArgs pa;
  auto* pre = app.add_subcommand("preprocess", "Filter, split and augment raw sessions");
  pre->add_option("raw", pa.raw, "Raw input file")->required();
  pre->add_option("out", pa.out, "Output dataset directory")->required();
  pre->add_option("--format", pa.format, "jsonl, diginetica, yoochoose, amazon")->capture_default_str();
  pre->add_option("--min-item-freq", pa.min_item_freq)->capture_default_str();
  pre->add_option("--min-len", pa.min_len)->capture_default_str();
  pre->add_option("--filter", pa.filter,
                  "auto, fixed (iterate length/frequency filters to a fixed point) or single (one pass); "
                  "auto is single for diginetica and yoochoose")
      ->capture_default_str();
  pre->add_option("--test-fraction", pa.test_fraction)->capture_default_str();
  pre->add_option("--yoochoose-fraction", pa.yoochoose_fraction)->capture_default_str();
  pre->add_option("--amazon-max-gap", pa.amazon_max_gap, "Seconds; 0 keeps one session per user")
      ->capture_default_str();
  pre->add_option("--metadata", pa.metadata, "Item metadata JSONL");
  pre->add_option("--expect-stats", pa.expect_stats,
                  "Compare against reference statistics: diginetica, yoochoose1_64, luxury_beauty, "
                  "musical_instruments, prime_pantry");

  EmbedArgs ea;
  auto* emb = app.add_subcommand("embed", "Build the item semantic table");
  emb->add_option("dataset", ea.dataset, "Dataset directory")->required();
  emb->add_option("--provider", ea.provider, "mock, http, replay")->capture_default_str();
  emb->add_option("--seed", ea.seed, "Mock provider seed")->capture_default_str();
  emb->add_option("--dim", ea.dim, "Raw embedding width")->capture_default_str();
  emb->add_option("--cache", ea.cache, "Embedding cache file (default <out>/embeddings.cache)");
  emb->add_option("--out", ea.out, "Output directory (default <dataset>/semantic)");
  emb->add_option("--max-chars", ea.max_chars)->capture_default_str();
  emb->add_option("--base-url", ea.base_url, "HTTP provider endpoint root");
  emb->add_option("--model", ea.model, "HTTP provider model name");
  emb->add_option("--replay-name", ea.replay_name, "Provider name the cache was written under")
      ->capture_default_str();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a model and write a checkpoint");
  tr->add_option("dataset", ta.dataset, "Dataset directory")->required();
  tr->add_option("--config", ta.config, "JSON config with model and train sections");
  tr->add_option("--out", ta.out, "Checkpoint directory")->required();
  tr->add_option("--semantic", ta.semantic, "Semantic artifact directory (default <dataset>/semantic)");
  tr->add_option("--seed", ta.seed);
  tr->add_option("--epochs", ta.epochs, "Override epochs_max");
  tr->add_option("--ablate", ta.ablate, "Ablation variant, repeatable (e.g. w/o-Contrastive)");
  tr->add_option("--device", ta.device, "cpu or auto")->capture_default_str();

  EvaluateArgs va;
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on the test split");
  ev->add_option("checkpoint", va.checkpoint, "Checkpoint directory")->required();
  ev->add_option("dataset", va.dataset, "Dataset directory")->required();
  ev->add_option("--k", va.k)->capture_default_str();
  ev->add_option("--batch-size", va.batch_size)->capture_default_str();
  ev->add_option("--baselines", va.baselines, "Comma list of pop, s-pop, item-knn")->delimiter(',');
  ev->add_option("--ranks", va.ranks, "Per-example rank dump (JSONL)");
  ev->add_option("--csv", va.csv, "Also write the CSV here");
  ev->add_option("--markdown", va.markdown, "Write a markdown table here");

  ReportArgs ra;
  auto* rep = app.add_subcommand("report", "Summarize training histories");
  rep->add_option("histories", ra.histories, "history.jsonl files");
  rep->add_option("--markdown", ra.markdown);
  rep->add_option("--csv", ra.csv);
  rep->add_option("--plot", ra.plot, "Directory for SVG loss and metric curves");
  rep->add_option("--k", ra.k)->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  // Logs go to stderr so stdout stays machine-readable.
  spdlog::set_default_logger(spdlog::stderr_color_mt("hiphop"));
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*pre) return cmd_preprocess(pa);
    if (*emb) return cmd_embed(ea);
    if (*tr) return cmd_train(ta);
    if (*ev) return cmd_evaluate(va);
    if (*rep) return cmd_report(ra);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailed;
  }
  return kFailed;
}
