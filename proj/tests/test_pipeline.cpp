#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cause/error.hpp"
#include "cause/pipeline.hpp"
#include "test_util.hpp"

using namespace cause;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

PipelineConfig small_config(const fs::path& out) {
  PipelineConfig cfg;
  cfg.synth.n_images = 30;
  cfg.synth.n_val = 6;
  cfg.synth.c = 16;
  cfg.synth.grid_h = cfg.synth.grid_w = 8;
  cfg.book.k = 16;
  cfg.r = 16;
  cfg.infer.probe_restarts = 2;
  cfg.output_dir = out;
  return cfg;
}

struct EnvGuard {
  explicit EnvGuard(const char* value) { ::setenv("CAUSE_SEED", value, 1); }
  ~EnvGuard() { ::unsetenv("CAUSE_SEED"); }
};

}  // namespace

TEST_CASE("config defaults and parsing") {
  const PipelineConfig d = parse_pipeline_config("{}");
  CHECK(d.book.k == 2048);
  CHECK(d.r == 90);
  CHECK(d.train.phi_pos == 0.3);
  CHECK(d.train.phi_neg == 0.1);
  CHECK(d.infer.crf.steps == 10);
  CHECK(d.infer.use_crf);
  CHECK(d.builder == "modularity");

  const PipelineConfig c = parse_pipeline_config(
      R"({"seed": 4, "k": 32, "builder": "kmeanspp", "manifest": "m.json", "output_dir": "out",
          "crf": {"enabled": false}, "train_head": false})",
      "/base");
  CHECK(c.book.k == 32);
  CHECK(c.builder == "kmeanspp");
  CHECK(c.manifest == fs::path("/base/m.json"));
  CHECK(c.output_dir == fs::path("/base/out"));
  CHECK_FALSE(c.infer.use_crf);
  CHECK_FALSE(c.train_head);

  const PipelineConfig back = parse_pipeline_config(pipeline_config_json(c));
  CHECK(back.book.k == 32);
  CHECK(back.seed == 4);
  CHECK(back.builder == "kmeanspp");

  CHECK_THROWS_AS(check_pipeline_config(parse_pipeline_config(R"({"builder": "magic"})")), Error);
  CHECK_THROWS_AS(parse_pipeline_config("[1,"), Error);
}

TEST_CASE("seed reaches every stage") {
  const PipelineConfig c = parse_pipeline_config(R"({"seed": 17})");
  CHECK(c.seed == 17);
  CHECK(c.synth.seed == 17);
  CHECK(c.book.seed == 17);
  CHECK(c.train.seed == 17);
  CHECK(c.infer.seed == 17);

  PipelineConfig e = c;
  {
    EnvGuard g("23");
    apply_seed_env(e);
  }
  CHECK(e.train.seed == 23);
  CHECK(e.book.seed == 23);
  {
    EnvGuard g("abc");
    CHECK_THROWS_AS(apply_seed_env(e), Error);
  }
  PipelineConfig f = c;
  apply_seed_env(f);
  CHECK(f.seed == 17);
}

TEST_CASE("small synthetic run end to end") {
  TempDir dir;
  const PipelineResult r = run_pipeline(small_config(dir.path() / "run"));
  CHECK(r.eval.miou >= 0.0);
  CHECK(r.eval.miou <= 1.0);
  CHECK(r.eval.n_pixels > 0);
  REQUIRE(r.trace.size() == 1);
  for (const char* f : {"metrics.json", "metrics.tsv", "book.causebook", "head.causehead", "loss_trace.tsv",
                        "run_manifest.json", "data/manifest.json"}) {
    INFO(f);
    CHECK(fs::exists(dir.path() / "run" / f));
  }
  const auto m = nlohmann::json::parse(slurp(r.metrics_json_path));
  CHECK(m.contains("mIoU"));
  CHECK(m.contains("pAcc"));
  const auto run = nlohmann::json::parse(slurp(dir.path() / "run" / "run_manifest.json"));
  CHECK(run.at("command") == "pipeline");
  CHECK(run.at("seed") == 0);
}

TEST_CASE("identical seeds give identical metrics") {
  TempDir dir;
  PipelineConfig a = small_config(dir.path() / "a"), b = small_config(dir.path() / "b");
  a.infer.use_crf = b.infer.use_crf = false;
  run_pipeline(a);
  run_pipeline(b);
  CHECK(slurp(dir.path() / "a" / "metrics.json") == slurp(dir.path() / "b" / "metrics.json"));
  CHECK(slurp(dir.path() / "a" / "book.causebook") == slurp(dir.path() / "b" / "book.causebook"));
}

TEST_CASE("an existing manifest is reused and hashed") {
  TempDir dir;
  PipelineConfig gen = small_config(dir.path() / "gen");
  const DatasetManifest m = generate_synthetic_dataset(gen.synth, dir.path() / "data");
  PipelineConfig cfg = small_config(dir.path() / "run");
  cfg.manifest = dir.path() / "data" / "manifest.json";
  cfg.infer.use_crf = false;
  cfg.train_head = false;
  run_pipeline(cfg);
  const auto run = nlohmann::json::parse(slurp(dir.path() / "run" / "run_manifest.json"));
  CHECK(run.at("inputs").size() == m.records.size() + 1);
  CHECK_FALSE(fs::exists(dir.path() / "run" / "loss_trace.tsv"));
}

TEST_CASE("a missing manifest fails in the load stage as an io error") {
  TempDir dir;
  PipelineConfig cfg = small_config(dir.path() / "run");
  cfg.manifest = dir.path() / "absent.json";
  try {
    run_pipeline(cfg);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Io);
    CHECK(std::string(e.what()).find("stage 'load'") != std::string::npos);
  }
}

TEST_CASE("file hashing") {
  TempDir dir;
  std::ofstream(dir.path() / "a") << "hello";
  std::ofstream(dir.path() / "b") << "hello";
  std::ofstream(dir.path() / "c") << "hellp";
  CHECK(hash_file(dir.path() / "a") == hash_file(dir.path() / "b"));
  CHECK(hash_file(dir.path() / "a") != hash_file(dir.path() / "c"));
  CHECK_THROWS_AS(hash_file(dir.path() / "none"), Error);
}
