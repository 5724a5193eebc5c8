#include <gtest/gtest.h>

#include <fstream>
#include <nlohmann/json.hpp>

#include "strokenext/metrics.hpp"
#include "strokenext/stats.hpp"
#include "support/cli_run.hpp"
#include "support/schema.hpp"
#include "support/tempdir.hpp"

using namespace strokenext;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

json load(const fs::path& p) { return json::parse(slurp(p)); }

// Every file under `root` except run manifests, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().filename() == "run_manifest.json") continue;
    out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

// Prediction logs over ids s0..s(n-1) with the requested discordance.
void write_pair(const fs::path& a, const fs::path& b, std::size_t only_a, std::size_t only_b,
                std::size_t both) {
  metrics::PredictionLog la, lb;
  const std::vector<double> right{0.1, 0.9}, wrong{0.8, 0.2};  // truth is class 1
  std::size_t id = 0;
  auto add = [&](bool a_ok, bool b_ok) {
    const std::string name = "s" + std::to_string(id++);
    la.push_back(metrics::make_record(name, 1, a_ok ? right : wrong));
    lb.push_back(metrics::make_record(name, 1, b_ok ? right : wrong));
  };
  for (std::size_t i = 0; i < only_a; ++i) add(true, false);
  for (std::size_t i = 0; i < only_b; ++i) add(false, true);
  for (std::size_t i = 0; i < both; ++i) add(true, true);
  metrics::write_prediction_log(a, la);
  metrics::write_prediction_log(b, lb);
}

}  // namespace

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir;
    const auto data = path("data");
    ASSERT_EQ(run_cli({"synth", "--out", data, "--task", "subtype", "--n-per-class", "8",
                       "--image-size", "32", "--seed", "5"})
                  .code,
              0);
    const auto r = run_cli(train_args(path("model.ckpt")));
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() { delete dir_; }

  static std::string path(const std::string& name) { return (*dir_ / name).string(); }
  static std::vector<std::string> train_args(const std::string& out) {
    return {"train", "--data", path("data"), "--task", "subtype", "--variant", "nano",
            "--epochs", "2", "--batch-size", "4", "--image-size", "32", "--seed", "3",
            "--lr", "1e-3", "--out", out};
  }
  static inline TempDir* dir_ = nullptr;
};

TEST_F(CliPipeline, SynthWritesEveryImageAndIsDeterministic) {
  EXPECT_TRUE(fs::exists(path("data/hemorrhage/hemorrhage_00007.png")));
  EXPECT_TRUE(fs::exists(path("data/ischemia/ischemia_00007.png")));
  ASSERT_EQ(run_cli({"synth", "--out", path("again"), "--task", "subtype", "--n-per-class", "8",
                     "--image-size", "32", "--seed", "5"})
                .code,
            0);
  const auto a = tree(path("data")), b = tree(path("again"));
  EXPECT_EQ(a.size(), 17u);  // 16 images + dataset manifest
  EXPECT_EQ(a, b);
  EXPECT_EQ(schema_errors("dataset-manifest.schema.json", path("data/manifest.json")), "");
  EXPECT_EQ(schema_errors("run-manifest.schema.json", path("data/run_manifest.json")), "");
}

TEST_F(CliPipeline, TrainOutputsAreSchemaValidAndReproducible) {
  EXPECT_EQ(schema_errors("train-history.schema.json", path("model.history.json")), "");
  EXPECT_EQ(schema_errors("run-manifest.schema.json", path("model.manifest.json")), "");
  const auto manifest = load(path("model.manifest.json"));
  EXPECT_EQ(manifest["command"], "train");
  EXPECT_EQ(manifest["seeds"]["seed"], 3);
  ASSERT_EQ(run_cli(train_args(path("again.ckpt"))).code, 0);
  auto a = load(path("model.history.json")), b = load(path("again.history.json"));
  EXPECT_EQ(a["epochs"], b["epochs"]);
  EXPECT_EQ(slurp(path("model.ckpt")), slurp(path("again.ckpt")));
}

TEST_F(CliPipeline, TrainDefaultsFollowProtocol) {
  const auto r = run_cli({"train", "--help"});
  EXPECT_EQ(r.code, 0);
  for (const char* s : {"--epochs", "20", "--batch-size", "80", "0.0001", "1e-05", "0.1"}) {
    EXPECT_NE(r.out.find(s), std::string::npos) << s;
  }
}

TEST_F(CliPipeline, EvaluateReportMatchesItsLog) {
  const auto r = run_cli({"evaluate", "--ckpt", path("model.ckpt"), "--data", path("data"),
                          "--split", "test", "--report", path("eval.json"), "--log",
                          path("eval.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(schema_errors("eval-report.schema.json", path("eval.json")), "");
  const auto report = load(path("eval.json"));
  const auto log = metrics::read_prediction_log(path("eval.csv"));
  EXPECT_EQ(log.size(), report["n"].get<std::size_t>());
  metrics::ReportOptions opts;
  opts.positive_class = report["metadata"]["positive_class"];
  opts.ece_bins = report["metadata"]["ece_bins"];
  opts.class_names = report["metadata"]["class_names"].get<std::vector<std::string>>();
  auto recomputed = metrics::compute_report(log, 2, opts).to_json();
  for (auto it = recomputed.begin(); it != recomputed.end(); ++it) {
    EXPECT_EQ(report[it.key()], it.value()) << it.key();
  }
}

TEST_F(CliPipeline, EvaluateFingerprintMismatchExits5) {
  const auto r = run_cli({"evaluate", "--ckpt", path("model.ckpt"), "--data", path("data"),
                          "--report", path("x.json"), "--log", path("x.csv"), "--variant",
                          "tiny"});
  EXPECT_EQ(r.code, 5);
  EXPECT_FALSE(fs::exists(path("x.json")));
}

TEST_F(CliPipeline, MissingInputsExit3) {
  EXPECT_EQ(run_cli({"evaluate", "--ckpt", path("absent.ckpt"), "--data", path("data"),
                     "--report", path("y.json"), "--log", path("y.csv")})
                .code,
            3);
  // A missing dataset root is a configuration error, not an I/O failure.
  EXPECT_EQ(run_cli({"train", "--data", path("nowhere"), "--out", path("z.ckpt")}).code, 2);
  EXPECT_EQ(run_cli({"compare", "--log-a", path("absent.csv"), "--log-b", path("absent.csv"),
                     "--out", path("c.json")})
                .code,
            3);
}

TEST_F(CliPipeline, DivergentTrainingExits4) {
  auto args = train_args(path("diverged.ckpt"));
  args[args.size() - 3] = "1e30";  // --lr value
  const auto r = run_cli(args);
  EXPECT_EQ(r.code, 4) << r.err;
  EXPECT_NE(r.err.find("non-finite"), std::string::npos);
  EXPECT_FALSE(fs::exists(path("diverged.ckpt")));
}

TEST(Cli, UsageErrorsExit2) {
  TempDir dir;
  auto r = run_cli({"synth", "--n-per-class", "4"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--out"), std::string::npos);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
  EXPECT_EQ(run_cli({"synth", "--out", (dir / "d").string(), "--n-per-class", "4", "--task",
                     "neither"})
                .code,
            2);
  EXPECT_EQ(run_cli({"bench", "--variant", "huge", "--out", (dir / "b.json").string()}).code, 2);
  EXPECT_EQ(run_cli({"bench", "--trials", "2", "--out", (dir / "b.json").string()}).code, 2);
}

TEST(Cli, CompareReproducesReferenceRow) {
  TempDir dir;
  write_pair(dir / "a.csv", dir / "b.csv", 87, 4, 9);
  const auto r = run_cli({"compare", "--log-a", (dir / "a.csv").string(), "--log-b",
                          (dir / "b.csv").string(), "--out", (dir / "c.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = load(dir / "c.json");
  EXPECT_NEAR(j["chi2"].get<double>(), 73.890, 1e-3);
  EXPECT_EQ(j["b"], 87);
  EXPECT_EQ(j["c"], 4);
  EXPECT_EQ(j["significant"], true);
  EXPECT_EQ(j["method_a"], "a");
  EXPECT_EQ(schema_errors("compare.schema.json", dir / "c.json"), "");
  EXPECT_EQ(schema_errors("run-manifest.schema.json", dir / "c.manifest.json"), "");
}

TEST(Cli, CompareIdenticalAndAlpha) {
  TempDir dir;
  write_pair(dir / "a.csv", dir / "b.csv", 0, 0, 10);
  ASSERT_EQ(run_cli({"compare", "--log-a", (dir / "a.csv").string(), "--log-b",
                     (dir / "a.csv").string(), "--out", (dir / "c.json").string()})
                .code,
            0);
  auto j = load(dir / "c.json");
  EXPECT_EQ(j["chi2"], 0.0);
  EXPECT_EQ(j["p_value"], 1.0);
  EXPECT_EQ(j["significant"], false);

  // Find a discordance whose p-value sits just under 0.05.
  std::uint64_t b = 0, c = 0;
  for (std::uint64_t n = 2; n < 200 && b == 0; ++n) {
    for (std::uint64_t k = 0; k <= n; ++k) {
      const double p = stats::mcnemar(n - k, k).p_value;
      if (p > 0.045 && p < 0.05) {
        b = n - k;
        c = k;
        break;
      }
    }
  }
  ASSERT_GT(b, 0u);
  write_pair(dir / "a.csv", dir / "b.csv", b, c, 5);
  for (auto [alpha, expected] : {std::pair{"0.05", true}, std::pair{"0.045", false}}) {
    ASSERT_EQ(run_cli({"compare", "--log-a", (dir / "a.csv").string(), "--log-b",
                       (dir / "b.csv").string(), "--alpha", alpha, "--out",
                       (dir / "c.json").string()})
                  .code,
              0);
    EXPECT_EQ(load(dir / "c.json")["significant"], expected) << alpha;
  }
  EXPECT_EQ(run_cli({"compare", "--log-a", (dir / "a.csv").string(), "--log-b",
                     (dir / "b.csv").string(), "--alpha", "1.5", "--out",
                     (dir / "c.json").string()})
                .code,
            2);
}

TEST(Cli, CompareSampleMismatchExits6) {
  TempDir dir;
  write_pair(dir / "a.csv", dir / "b.csv", 3, 1, 2);
  write_pair(dir / "c.csv", dir / "d.csv", 3, 1, 3);
  const auto r = run_cli({"compare", "--log-a", (dir / "a.csv").string(), "--log-b",
                          (dir / "d.csv").string(), "--out", (dir / "x.json").string()});
  EXPECT_EQ(r.code, 6);
  EXPECT_NE(r.err.find("only in B: s6"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "x.json"));
}

TEST(Cli, BenchTinyReport) {
  TempDir dir;
  const auto r = run_cli({"bench", "--variant", "tiny", "--image-size", "224", "--warmup", "0",
                          "--trials", "3", "--out", (dir / "b.json").string(), "--csv",
                          (dir / "b.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = load(dir / "b.json");
  EXPECT_NEAR(j["params"].get<double>() / 1e6, 57.6, 57.6 * 0.05);
  EXPECT_NEAR(j["flops"].get<double>() / 1e9, 8.977, 8.977 * 0.10);
  const double throughput = j["throughput_ips"], latency = j["latency_s"];
  EXPECT_NEAR(throughput * latency, 1.0, 0.01);
  EXPECT_EQ(schema_errors("bench.schema.json", dir / "b.json"), "");
  EXPECT_TRUE(fs::exists(dir / "b.csv"));
}

TEST(Cli, BenchOutOfMemoryExits7) {
  TempDir dir;
  const auto r = run_cli({"bench", "--variant", "large", "--batch-size", "1000000", "--out",
                          (dir / "b.json").string()});
  EXPECT_EQ(r.code, 7);
  EXPECT_NE(r.err.find("1000000"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "b.json"));
}

TEST(Cli, SchemasRejectMalformedDocuments) {
  TempDir dir;
  std::ofstream(dir / "bad.json") << R"({"b": -1, "c": 0})";
  EXPECT_NE(schema_errors("compare.schema.json", dir / "bad.json"), "");
}
