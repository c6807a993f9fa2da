// Drives the hiphop executable end to end on a small generated corpus.
#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "test_util.h"

namespace hiphop {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new testing::TempDir("cli");
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<int> start(0, 29), len(2, 6);
    std::ofstream raw(root_->path() / "raw.jsonl");
    for (int s = 0; s < 500; ++s) {
      json rec;
      rec["session"] = s;
      int a = start(rng), l = len(rng);
      for (int t = 0; t < l; ++t) rec["items"].push_back("i" + std::to_string((a + t) % 30));
      rec["ts"] = std::vector<int>(l, s);
      raw << rec.dump() << '\n';
    }
    std::ofstream meta(root_->path() / "meta.jsonl");
    for (int i = 0; i < 30; i += 3) {
      meta << json{{"item", "i" + std::to_string(i)}, {"title", "Item " + std::to_string(i)}, {"category", "Toys"}}
                  .dump()
           << '\n';
    }
    std::ofstream cfg(root_->path() / "small.json");
    cfg << R"({"model": {"dim": 8, "num_intents": 2, "top_k": 4}, "train": {"batch_size": 64, "epochs_max": 2}})";
  }
  static void TearDownTestSuite() {
    delete root_;
    root_ = nullptr;
  }

  static fs::path dir() { return root_->path(); }

  static CliRun run(const std::string& args, const std::string& env = "") {
    static int n = 0;
    const fs::path out = dir() / ("stdout" + std::to_string(n));
    const fs::path err = dir() / ("stderr" + std::to_string(n++));
    std::string cmd = env + " '" HIPHOP_CLI_PATH "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
    int status = std::system(cmd.c_str());
    CliRun r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  // Preprocessed dataset shared by the tests, built once.
  static fs::path dataset() {
    static bool built = false;
    fs::path ds = dir() / "ds";
    if (!built) {
      CliRun r = run("preprocess " + (dir() / "raw.jsonl").string() + " " + ds.string() + " --metadata " +
                  (dir() / "meta.jsonl").string());
      EXPECT_EQ(r.code, 0) << r.err;
      built = true;
    }
    return ds;
  }

  static testing::TempDir* root_;
};

testing::TempDir* CliTest::root_ = nullptr;

TEST_F(CliTest, PreprocessWritesArtifactsAndStats) {
  fs::path ds = dataset();
  for (const char* f : {"train.jsonl", "test.jsonl", "catalog.json", "stats.json", "manifest.json"}) {
    EXPECT_TRUE(fs::exists(ds / f)) << f;
  }
  json stats = json::parse(slurp(ds / "stats.json"));
  EXPECT_EQ(stats["items"], 30);
  json manifest = json::parse(slurp(ds / "manifest.json"));
  EXPECT_EQ(manifest["kind"], "dataset");
}

TEST_F(CliTest, PreprocessIsIdempotent) {
  fs::path again = dir() / "ds_again";
  CliRun r = run("preprocess " + (dir() / "raw.jsonl").string() + " " + again.string() + " --metadata " +
              (dir() / "meta.jsonl").string());
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"train.jsonl", "test.jsonl", "catalog.json", "stats.json"}) {
    EXPECT_EQ(slurp(again / f), slurp(dataset() / f)) << f;
  }
}

TEST_F(CliTest, PreprocessMissingInputFails) {
  CliRun r = run("preprocess " + (dir() / "nope.jsonl").string() + " " + (dir() / "x").string());
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(r.err.empty());
}

TEST_F(CliTest, PreprocessLengthFilterOnly) {
  fs::path out = dir() / "ds_len";
  CliRun r = run("preprocess " + (dir() / "raw.jsonl").string() + " " + out.string() + " --min-item-freq 1 --min-len 2");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(slurp(out / "stats.json"))["items"], 30);
}

TEST_F(CliTest, PreprocessExpectStatsMismatchFails) {
  CliRun r = run("preprocess " + (dir() / "raw.jsonl").string() + " " + (dir() / "ds_expect").string() +
              " --expect-stats diginetica");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("items"), std::string::npos) << r.err;
}

TEST_F(CliTest, MockEmbedDeterministicAndCached) {
  fs::path ds = dataset();
  CliRun a = run("embed " + ds.string() + " --provider mock --seed 7 --dim 32 --out " + (dir() / "sem_a").string());
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_NE(a.out.find("provider calls: 1"), std::string::npos) << a.out;
  CliRun b = run("embed " + ds.string() + " --provider mock --seed 7 --dim 32 --out " + (dir() / "sem_b").string());
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(slurp(dir() / "sem_a" / "semantic.bin"), slurp(dir() / "sem_b" / "semantic.bin"));
  CliRun warm = run("embed " + ds.string() + " --provider mock --seed 7 --dim 32 --out " + (dir() / "sem_a").string());
  ASSERT_EQ(warm.code, 0) << warm.err;
  EXPECT_NE(warm.out.find("provider calls: 0"), std::string::npos) << warm.out;
}

TEST_F(CliTest, HttpEmbedWithoutKeyIsConfigError) {
  CliRun r = run("embed " + dataset().string() + " --provider http --out " + (dir() / "sem_http").string(),
              "env -u HIPHOP_EMBEDDING_API_KEY");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("HIPHOP_EMBEDDING_API_KEY"), std::string::npos) << r.err;
}

TEST_F(CliTest, TrainTwiceGivesIdenticalHistory) {
  std::string base = "train " + dataset().string() + " --config " + (dir() / "small.json").string() + " --seed 1";
  CliRun a = run(base + " --out " + (dir() / "ck_a").string());
  ASSERT_EQ(a.code, 0) << a.err;
  CliRun b = run(base + " --out " + (dir() / "ck_b").string());
  ASSERT_EQ(b.code, 0) << b.err;
  std::string ha = slurp(dir() / "ck_a" / "history.jsonl");
  EXPECT_FALSE(ha.empty());
  EXPECT_EQ(ha, slurp(dir() / "ck_b" / "history.jsonl"));
  EXPECT_EQ(slurp(dir() / "ck_a" / "params" / "item_embedding.f32"),
            slurp(dir() / "ck_b" / "params" / "item_embedding.f32"));
  json manifest = json::parse(slurp(dir() / "ck_a" / "manifest.json"));
  EXPECT_EQ(manifest["kind"], "checkpoint");
  EXPECT_EQ(manifest["seed"], 1);
}

TEST_F(CliTest, AblationRecordedInManifest) {
  CliRun r = run("train " + dataset().string() + " --config " + (dir() / "small.json").string() +
              " --epochs 1 --ablate w/o-Contrastive --out " + (dir() / "ck_abl").string());
  ASSERT_EQ(r.code, 0) << r.err;
  json manifest = json::parse(slurp(dir() / "ck_abl" / "manifest.json"));
  EXPECT_EQ(manifest["extra"]["ablations"], json::array({"w/o Contrastive"}));
  json config = json::parse(slurp(dir() / "ck_abl" / "config.json"));
  EXPECT_EQ(config["train"]["lambda"], 0.0);
}

TEST_F(CliTest, UnknownAblationAndConfigKeysAreConfigErrors) {
  std::string base = "train " + dataset().string() + " --epochs 1 --out " + (dir() / "ck_bad").string();
  EXPECT_EQ(run(base + " --ablate w/o-Everything").code, 2);
  std::ofstream(dir() / "bad.json") << R"({"model": {"dimension": 8}})";
  EXPECT_EQ(run(base + " --config " + (dir() / "bad.json").string()).code, 2);
}

TEST_F(CliTest, DeviceAutoFallsBackToCpu) {
  CliRun r = run("train " + dataset().string() + " --config " + (dir() / "small.json").string() +
              " --epochs 1 --device auto --out " + (dir() / "ck_dev").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("CPU"), std::string::npos) << r.err;
}

TEST_F(CliTest, TrainWithSemanticTable) {
  ASSERT_EQ(run("embed " + dataset().string() + " --provider mock --dim 16 --out " + (dir() / "sem_t").string()).code,
            0);
  std::ofstream(dir() / "sem.json")
      << R"({"model": {"dim": 8, "num_intents": 2, "use_semantic": true}, "train": {"batch_size": 64}})";
  CliRun r = run("train " + dataset().string() + " --config " + (dir() / "sem.json").string() + " --epochs 1 --semantic " +
              (dir() / "sem_t").string() + " --out " + (dir() / "ck_sem").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir() / "ck_sem" / "semantic.bin"));
  CliRun e = run("evaluate " + (dir() / "ck_sem").string() + " " + dataset().string());
  EXPECT_EQ(e.code, 0) << e.err;
}

TEST_F(CliTest, EvaluateWithBaselines) {
  fs::path ck = dir() / "ck_eval";
  ASSERT_EQ(run("train " + dataset().string() + " --config " + (dir() / "small.json").string() + " --out " +
                ck.string())
                .code,
            0);
  CliRun r = run("evaluate " + ck.string() + " " + dataset().string() + " --baselines pop,s-pop,item-knn --ranks " +
              (dir() / "ranks.jsonl").string() + " --markdown " + (dir() / "table.md").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("method,k,hr,mrr,n\n", 0), 0u) << r.out;
  for (const char* name : {"\"HIPHOP\",20,", "\"POP\",20,", "\"S-POP\",20,", "\"Item-KNN\",20,"}) {
    EXPECT_NE(r.out.find(name), std::string::npos) << name << " in " << r.out;
  }
  EXPECT_TRUE(fs::exists(dir() / "ranks.jsonl"));
  EXPECT_NE(slurp(dir() / "table.md").find("| Method | HR@20 | MRR@20 |"), std::string::npos);
}

TEST_F(CliTest, EvaluateMissingCheckpointFails) {
  CliRun r = run("evaluate " + (dir() / "no_such_ck").string() + " " + dataset().string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("no_such_ck"), std::string::npos) << r.err;
}

TEST_F(CliTest, ReportTableAndPlots) {
  std::string base = "train " + dataset().string() + " --config " + (dir() / "small.json").string();
  ASSERT_EQ(run(base + " --out " + (dir() / "rep_full").string()).code, 0);
  ASSERT_EQ(run(base + " --ablate w/o-MultiIntent --out " + (dir() / "rep_womi").string()).code, 0);
  CliRun r = run("report " + (dir() / "rep_full" / "history.jsonl").string() + " " +
              (dir() / "rep_womi" / "history.jsonl").string() + " --plot " + (dir() / "plots").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("rep_full"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("rep_womi"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(dir() / "plots" / "rep_full_loss.svg"));
  EXPECT_TRUE(fs::exists(dir() / "plots" / "rep_womi_metrics.svg"));
}

TEST_F(CliTest, ReportWithoutInputFails) {
  CliRun r = run("report");
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(r.err.empty());
}

}  // namespace
}  // namespace hiphop
