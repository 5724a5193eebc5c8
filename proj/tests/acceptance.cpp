// Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>

#include "strokenext/bench.hpp"
#include "strokenext/data.hpp"
#include "strokenext/fusion.hpp"
#include "strokenext/metrics.hpp"
#include "strokenext/model.hpp"
#include "strokenext/stats.hpp"
#include "strokenext/training.hpp"
#include "support/cli_run.hpp"
#include "support/gradcheck.hpp"
#include "support/model_setup.hpp"
#include "support/oracles.hpp"
#include "support/schema.hpp"
#include "support/tempdir.hpp"

using namespace strokenext;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Accumulates sub-check failures into one outcome.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) failures_.push_back(what);
  }
  Outcome finish(const std::string& summary) const {
    if (failures_.empty()) return {true, summary};
    std::string msg = summary + "; failed:";
    for (std::size_t i = 0; i < failures_.size() && i < 5; ++i) msg += " [" + failures_[i] + "]";
    if (failures_.size() > 5) msg += " (+" + std::to_string(failures_.size() - 5) + " more)";
    return {false, msg};
  }

 private:
  std::vector<std::string> failures_;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

double rel(double a, double b) { return std::abs(a - b) / b; }

// ---------------------------------------------------------------- 1

Outcome mcnemar_exactness() {
  struct Row {
    std::uint64_t b, c;
    double chi2;
  };
  const Row rows[] = {{87, 4, 73.890}, {79, 3, 68.597}, {67, 3, 56.700}, {76, 3, 65.620},
                      {69, 5, 53.635}, {25, 1, 20.346}, {40, 1, 35.219}, {31, 1, 26.281},
                      {29, 2, 21.807}, {32, 1, 27.272}, {37, 1, 32.236}};
  Checks checks;
  double worst = 0, max_p = 0;
  for (const auto& r : rows) {
    const auto m = stats::mcnemar(r.b, r.c);
    const double d = std::abs(m.chi2 - r.chi2);
    worst = std::max(worst, d);
    max_p = std::max(max_p, m.p_value);
    const std::string id = "(" + std::to_string(r.b) + "," + std::to_string(r.c) + ")";
    checks.expect(d <= 1e-3, id + " chi2 " + fmt("%.4f", m.chi2));
    checks.expect(m.p_value < 1e-4, id + " p " + fmt("%.2e", m.p_value));
  }
  return checks.finish("11 rows, max |dchi2| " + fmt("%.5f", worst) + ", max p " +
                       fmt("%.2e", max_p) + "; (94,2) gives " +
                       fmt("%.3f", stats::mcnemar(94, 2).chi2) + " (reference row 82.260 is inconsistent, excluded)");
}

// ---------------------------------------------------------------- 2, 3

struct ReferenceCosts {
  VariantName variant;
  double ref_params_m, ref_gmacs, model_params_m, model_gmacs;
};
const ReferenceCosts kCosts[] = {
    {VariantName::tiny, 28, 4.5, 57.6, 8.977},
    {VariantName::small, 50, 8.7, 100.8, 17.474},
    {VariantName::base, 89, 15.4, 178.5, 30.853},
    {VariantName::large, 198, 34.4, 399.9, 68.940},
};

Outcome parameter_accounting() {
  Checks checks;
  std::string summary;
  for (const auto& row : kCosts) {
    const auto v = make_variant(row.variant);
    const std::string name(to_string(row.variant));
    const double ref = bench::reference_classifier_cost(v, 224, 1000).params / 1e6;
    const double model = bench::count_params(make_model_config(row.variant)) / 1e6;
    checks.expect(rel(ref, row.ref_params_m) <= 0.05, name + " classifier " + fmt("%.2fM", ref));
    checks.expect(rel(model, row.model_params_m) <= 0.05, name + " model " + fmt("%.2fM", model));
    summary += name + " " + fmt("%.1f", ref) + "/" + fmt("%.1fM", model) + " ";
  }
  // The analytic count must agree with instantiated models.
  for (auto name : {VariantName::nano, VariantName::tiny, VariantName::small}) {
    const auto cfg = make_model_config(name);
    StrokeNeXt<float> model(cfg);
    checks.expect(bench::count_params(model) == bench::count_params(cfg),
                  std::string(to_string(name)) + " built model disagrees with analytic count");
  }
  return checks.finish(summary + "(analytic = built for nano/tiny/small)");
}

Outcome flop_accounting() {
  Checks checks;
  std::string summary;
  for (const auto& row : kCosts) {
    const auto v = make_variant(row.variant);
    const std::string name(to_string(row.variant));
    const double ref = bench::reference_classifier_cost(v, 224, 1000).macs / 1e9;
    const double model = bench::count_flops(make_model_config(row.variant), 224) / 1e9;
    checks.expect(rel(ref, row.ref_gmacs) <= 0.10, name + " classifier " + fmt("%.3fG", ref));
    checks.expect(rel(model, row.model_gmacs) <= 0.10, name + " model " + fmt("%.3fG", model));
    summary += name + " " + fmt("%.2f", ref) + "/" + fmt("%.3fG", model) + " ";
  }
  return checks.finish(summary + "MACs at 224x224");
}

// ---------------------------------------------------------------- 4

Outcome gradient_correctness() {
  StrokeNeXt<double> model(make_model_config(VariantName::nano));
  prepare_for_gradcheck(model, 7);
  Rng rng(8);
  FeatureMap<double> x(2, 3, 32, 32);
  for (auto& v : x.values) v = rng.normal();
  const std::vector<std::size_t> targets{0, 1};
  auto loss = [&] { return training::smoothed_ce<double>(model.forward(x, {}), targets, 0.1); };
  auto analytic = [&] {
    model.zero_grad();
    const auto logits = model.forward(x, {false, true, nullptr});
    Embedding<double> g;
    training::smoothed_ce<double>(logits, targets, 0.1, &g);
    model.backward(g);
  };
  const auto groups = gradcheck::check(model.parameters(), loss, analytic, 8, 9);
  Checks checks;
  double worst = 0;
  std::string worst_name;
  for (const auto& g : groups) {
    if (g.rel_error > worst) {
      worst = g.rel_error;
      worst_name = g.name;
    }
    checks.expect(g.rel_error < 1e-4, g.name + " " + fmt("%.2e", g.rel_error));
  }
  return checks.finish(std::to_string(groups.size()) + " parameter groups, max rel error " +
                       fmt("%.2e", worst) + " (" + worst_name + ")");
}

// ---------------------------------------------------------------- 5

Embedding<double> random_embedding(std::size_t b, std::size_t c, Rng& rng) {
  Embedding<double> e(b, c);
  for (auto& v : e.values) v = rng.normal();
  return e;
}

FusionConfig fusion_config(std::size_t c, FusionMode mode) {
  FusionConfig cfg;
  cfg.channels = c;
  cfg.hidden_width = c;
  cfg.mode = mode;
  return cfg;
}

Outcome fusion_equivalence() {
  Checks checks;
  Rng rng(4);
  double worst = 0;
  for (int draw = 0; draw < 100; ++draw) {
    const std::size_t C = 1 + rng.below(32), B = 1 + rng.below(4);
    MergeConv<double> m("m", C, rng);
    for (auto& v : m.conv.weight.value) v = rng.normal();
    for (auto& v : m.conv.bias.value) v = rng.normal();
    const auto f1 = random_embedding(B, C, rng), f2 = random_embedding(B, C, rng);
    const auto pre = m.pre_activation(stack_pair(f1, f2));
    // Dense map W [C, 2C] acting on the concatenation [f1, f2].
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t o = 0; o < C; ++o) {
        double ref = m.conv.bias.value[o];
        for (std::size_t i = 0; i < C; ++i) {
          ref += m.conv.weight.value[(o * C + i) * 2] * f1.at(b, i) +
                 m.conv.weight.value[(o * C + i) * 2 + 1] * f2.at(b, i);
        }
        worst = std::max(worst, std::abs(pre.at(b, o) - ref));
      }
    }
  }
  checks.expect(worst < 1e-6, "merge vs dense " + fmt("%.2e", worst));

  const nn::Context eval{};
  FusionDecoder<double> sum("d", fusion_config(16, FusionMode::sum), 1);
  FusionDecoder<double> conv("d", fusion_config(16, FusionMode::k2conv), 2);
  bool symmetric = true, order_aware = true;
  for (int i = 0; i < 20; ++i) {
    const auto f1 = random_embedding(3, 16, rng), f2 = random_embedding(3, 16, rng);
    symmetric = symmetric && sum.fuse(f1, f2, eval).values == sum.fuse(f2, f1, eval).values;
    order_aware = order_aware && conv.fuse(f1, f2, eval).values != conv.fuse(f2, f1, eval).values;
  }
  checks.expect(symmetric, "sum fusion not symmetric");
  checks.expect(order_aware, "k2conv fusion ignores branch order");
  return checks.finish("100 draws max |diff| " + fmt("%.2e", worst) +
                       ", sum symmetric, k2conv order-aware");
}

// ---------------------------------------------------------------- 6

metrics::PredictionLog random_log(Rng& rng, std::size_t n, std::size_t k, bool ties) {
  metrics::PredictionLog log;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> p(k);
    double sum = 0;
    for (auto& v : p) {
      v = ties ? std::round(rng.uniform(0.0, 1.0) * 4) + 0.5 : -std::log(rng.uniform(1e-12, 1.0));
      sum += v;
    }
    for (auto& v : p) v /= sum;
    log.push_back(metrics::make_record("r" + std::to_string(i), rng.below(k), p));
  }
  return log;
}

Outcome metric_oracles() {
  Checks checks;
  Rng rng(3);
  double worst = 0;
  std::size_t auroc_n = 0, auprc_n = 0;
  auto near = [&](double a, double b, const char* what) {
    worst = std::max(worst, std::abs(a - b));
    checks.expect(std::abs(a - b) <= 1e-9, what);
  };
  for (int i = 0; i < 1000; ++i) {
    const std::size_t k = i % 2 == 0 ? 2 : 2 + rng.below(3);
    const std::size_t n = 2 + rng.below(199);
    const auto log = random_log(rng, n, k, i % 4 == 0);
    std::vector<oracle::Pred> ref;
    for (const auto& r : log) ref.push_back({r.true_label, r.pred_label, r.probs});
    const auto cm = metrics::confusion(log, k);
    const auto m = metrics::basic_metrics(cm);
    near(m.accuracy, oracle::accuracy(ref), "accuracy");
    near(m.f1, oracle::weighted_f1(ref, k), "weighted f1");
    near(metrics::mcc(cm), k == 2 ? oracle::mcc_binary(ref) : oracle::mcc_onehot(ref, k), "mcc");
    near(metrics::ece(log), oracle::ece_bins(ref, metrics::kDefaultEceBins), "ece");
    checks.expect(m.recall == m.accuracy || std::abs(m.recall - m.accuracy) < 1e-12,
                  "weighted recall != accuracy");
    std::vector<double> s;
    std::vector<int> y;
    for (const auto& r : log) {
      s.push_back(r.probs[k - 1]);
      y.push_back(r.true_label == k - 1);
    }
    const auto pos = std::count(y.begin(), y.end(), 1);
    if (pos > 0 && pos < static_cast<long>(y.size())) {
      near(metrics::auroc(s, y), oracle::auroc_pairs(s, y), "auroc");
      ++auroc_n;
    }
    if (pos > 0) {
      near(metrics::auprc(s, y), oracle::average_precision_sweep(s, y), "auprc");
      ++auprc_n;
    }
  }
  std::size_t grids = 0;
  for (std::uint64_t a = 0; a <= 20; ++a) {
    for (std::uint64_t b = 0; b <= 20; ++b) {
      for (std::uint64_t c = 0; c <= 20; ++c) {
        for (std::uint64_t d = 0; d <= 20; ++d) {
          if (a + b == 0 || c + d == 0) continue;
          metrics::ConfusionMatrix cm(2);
          cm.counts = {a, b, c, d};
          const auto ss = metrics::sens_spec(cm);
          checks.expect(ss[0].sensitivity == ss[1].specificity &&
                            ss[1].sensitivity == ss[0].specificity,
                        "sens/spec symmetry");
          ++grids;
        }
      }
    }
  }
  return checks.finish("1000 instances, max |diff| " + fmt("%.1e", worst) + " (auroc on " +
                       std::to_string(auroc_n) + ", auprc on " + std::to_string(auprc_n) +
                       "); sens/spec symmetry on " + std::to_string(grids) + " grids");
}

// ---------------------------------------------------------------- 7

Outcome desk_scale_training() {
  Checks checks;
  TempDir dir;
  const int size = 64;
  const auto index = data::generate_synthetic(200, data::Task::subtype, 1, dir / "full", size);
  const auto parts = data::split(index, {});
  data::ImageCache train_img(parts.train), val_img(parts.val), test_img(parts.test);
  training::TrainConfig cfg;  // protocol defaults: 20 epochs, batch 80, lr 1e-4
  cfg.image_size = size;
  cfg.seed = 1;
  const auto mcfg = make_model_config(VariantName::nano, FusionMode::k2conv, 0, 0.2, 2,
                                      data::Task::subtype, 1);
  StrokeNeXt<float> model(mcfg);
  const auto t0 = std::chrono::steady_clock::now();
  const auto result =
      training::train(model, {&parts.train, &train_img}, {&parts.val, &val_img}, cfg);
  training::restore(model, result.best);
  metrics::ReportOptions opts;
  opts.positive_class = data::default_positive_class(index);
  const auto eval = metrics::evaluate(model, parts.test, test_img, 80, size, opts);
  const double train_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  checks.expect(eval.report.accuracy >= 0.95, "test accuracy " + fmt("%.3f", eval.report.accuracy));
  checks.expect(train_s < 600, "training took " + fmt("%.0f s", train_s));

  // Memorization: 64 images, no augmentation, accuracy on the same images.
  const auto small = data::generate_synthetic(32, data::Task::subtype, 2, dir / "mem", size);
  data::ImageCache small_img(small);
  training::TrainConfig mem;
  mem.epochs = 50;
  mem.batch_size = 16;
  mem.max_steps = 200;
  mem.image_size = size;
  mem.seed = 2;
  mem.augment.enabled = false;
  StrokeNeXt<float> memo(make_model_config(VariantName::nano, FusionMode::k2conv, 0, 0.2, 2,
                                           data::Task::subtype, 2));
  std::size_t first_perfect = 0, steps_per_epoch = small.size() / mem.batch_size;
  const auto mem_result = training::train(memo, {&small, &small_img}, {&small, &small_img}, mem,
                                          [&](const training::EpochRecord& e) {
                                            if (!first_perfect && e.val_accuracy == 1.0) {
                                              first_perfect = e.epoch * steps_per_epoch;
                                            }
                                          });
  checks.expect(first_perfect > 0 && first_perfect <= 200,
                "memorization did not reach 100% within 200 steps");
  return checks.finish(
      "nano test accuracy " + fmt("%.3f", eval.report.accuracy) + " on " +
      std::to_string(parts.test.size()) + " images after " +
      std::to_string(result.history.epochs.size()) + " epochs at " + std::to_string(size) +
      "px in " + fmt("%.0f s", train_s) + "; 64-image memorization 100% at step " +
      std::to_string(first_perfect) + " of " + std::to_string(mem_result.history.steps));
}

// ---------------------------------------------------------------- 8

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

Outcome determinism() {
  Checks checks;
  TempDir dir;
  const auto a = data::generate_synthetic(20, data::Task::presence, 11, dir / "a", 32);
  const auto b = data::generate_synthetic(20, data::Task::presence, 11, dir / "b", 32);
  checks.expect(tree(dir / "a") == tree(dir / "b"), "synthetic datasets differ");

  data::SplitSpec spec;
  spec.seed = 4;
  const auto s1 = data::split(a, spec), s2 = data::split(a, spec);
  checks.expect(s1.train == s2.train && s1.val == s2.val && s1.test == s2.test, "splits differ");

  data::ImageCache train_img(s1.train), val_img(s1.val);
  training::TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.lr = 1e-3;
  cfg.image_size = 32;
  cfg.seed = 5;
  const auto mcfg = make_model_config(VariantName::nano, FusionMode::k2conv, 0, 0.2, 2,
                                      data::Task::presence, 6);
  std::string logs[2];
  training::TrainHistory hist[2];
  for (int run = 0; run < 2; ++run) {
    StrokeNeXt<float> model(mcfg);
    hist[run] = training::train(model, {&s1.train, &train_img}, {&s1.val, &val_img}, cfg).history;
    const auto ev = metrics::evaluate(model, s1.val, val_img, 8, 32, {});
    logs[run] = metrics::format_prediction_log(ev.log);
  }
  checks.expect(hist[0] == hist[1], "training histories differ");
  checks.expect(logs[0] == logs[1], "prediction logs differ");
  return checks.finish("synthetic data (" + std::to_string(a.size()) +
                       " files), splits, 3-epoch histories and prediction logs bit-identical");
}

// ---------------------------------------------------------------- 9

Outcome cli_contract() {
  Checks checks;
  TempDir dir;
  auto p = [&](const std::string& n) { return (dir / n).string(); };
  auto code = [&](std::vector<std::string> args, int expected, const std::string& what) {
    const auto r = run_cli(args);
    checks.expect(r.code == expected, what + " exit " + std::to_string(r.code) + " (expected " +
                                          std::to_string(expected) + ")");
    return r;
  };
  std::size_t documents = 0;
  auto valid = [&](const std::string& schema, const std::string& file) {
    ++documents;
    const auto errors = schema_errors(schema, file);
    checks.expect(errors.empty(), file.substr(dir.path().string().size() + 1) + ": " + errors);
  };

  code({"synth", "--out", p("ds"), "--task", "subtype", "--n-per-class", "10", "--image-size",
        "32"},
       0, "synth");
  valid("dataset-manifest.schema.json", p("ds/manifest.json"));
  valid("run-manifest.schema.json", p("ds/run_manifest.json"));
  code({"synth", "--n-per-class", "4"}, 2, "synth without --out");

  const std::vector<std::string> train{"train", "--data", p("ds"), "--task", "subtype",
                                       "--variant", "nano", "--epochs", "2", "--batch-size", "4",
                                       "--image-size", "32"};
  auto with = [](std::vector<std::string> v, std::initializer_list<std::string> extra) {
    v.insert(v.end(), extra);
    return v;
  };
  code(with(train, {"--lr", "1e-3", "--out", p("m.ckpt")}), 0, "train");
  valid("train-history.schema.json", p("m.history.json"));
  valid("run-manifest.schema.json", p("m.manifest.json"));
  code(with(train, {"--lr", "1e30", "--out", p("bad.ckpt")}), 4, "diverging train");
  code(with(train, {"--variant", "medium", "--out", p("bad.ckpt")}), 2, "unknown variant");

  code({"evaluate", "--ckpt", p("m.ckpt"), "--data", p("ds"), "--split", "test", "--report",
        p("r.json"), "--log", p("r.csv")},
       0, "evaluate");
  valid("eval-report.schema.json", p("r.json"));
  const auto report = json::parse(slurp(p("r.json")));
  const auto log = metrics::read_prediction_log(p("r.csv"));
  metrics::ReportOptions opts;
  opts.positive_class = report["metadata"]["positive_class"];
  opts.ece_bins = report["metadata"]["ece_bins"];
  opts.class_names = report["metadata"]["class_names"].get<std::vector<std::string>>();
  const auto recomputed = metrics::compute_report(log, 2, opts).to_json();
  std::size_t fields = 0;
  for (auto it = recomputed.begin(); it != recomputed.end(); ++it, ++fields) {
    checks.expect(report[it.key()] == it.value(), "report field " + it.key() + " differs from CSV");
  }
  code({"evaluate", "--ckpt", p("m.ckpt"), "--data", p("ds"), "--report", p("x.json"), "--log",
        p("x.csv"), "--fusion-mode", "sum"},
       5, "evaluate with mismatched fingerprint");
  code({"evaluate", "--ckpt", p("missing.ckpt"), "--data", p("ds"), "--report", p("x.json"),
        "--log", p("x.csv")},
       3, "evaluate missing checkpoint");

  code({"evaluate", "--ckpt", p("m.ckpt"), "--data", p("ds"), "--split", "val", "--report",
        p("v.json"), "--log", p("v.csv")},
       0, "evaluate val");
  code({"compare", "--log-a", p("r.csv"), "--log-b", p("r.csv"), "--out", p("c.json")}, 0,
       "compare");
  valid("compare.schema.json", p("c.json"));
  code({"compare", "--log-a", p("r.csv"), "--log-b", p("v.csv"), "--out", p("c2.json")}, 6,
       "compare different samples");

  code({"bench", "--variant", "nano", "--image-size", "64", "--warmup", "1", "--trials", "3",
        "--out", p("b.json")},
       0, "bench");
  valid("bench.schema.json", p("b.json"));
  code({"bench", "--variant", "large", "--batch-size", "1000000", "--out", p("oom.json")}, 7,
       "bench beyond memory");
  checks.expect(!fs::exists(p("oom.json")) && !fs::exists(p("bad.ckpt")) &&
                    !fs::exists(p("x.json")),
                "failed command left an output behind");
  return checks.finish("exit codes 0/2/3/4/5/6/7 checked, " + std::to_string(documents) +
                       " documents schema-checked, " +
                       std::to_string(fields) + " report fields recomputed from CSV");
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
    double budget_s;  // 0 = no runtime gate
  };
  const Criterion criteria[] = {
      {1, "McNemar exactness", mcnemar_exactness, 1},
      {2, "Parameter accounting", parameter_accounting, 30},
      {3, "FLOP accounting", flop_accounting, 0},
      {4, "Gradient correctness", gradient_correctness, 300},
      {5, "Fusion equivalence", fusion_equivalence, 0},
      {6, "Metric oracles", metric_oracles, 0},
      {7, "End-to-end desk-scale sanity", desk_scale_training, 600},
      {8, "Determinism", determinism, 0},
      {9, "CLI contract", cli_contract, 0},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0 && s >= c.budget_s) {
      o.pass = false;
      o.detail += "; runtime " + fmt("%.1f s", s) + " exceeds " + fmt("%.0f s", c.budget_s);
    }
    failed += !o.pass;
    std::printf("[%s] %d %s (%.2f s): %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, s,
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/9 criteria passed\n", 9 - failed);
  return failed ? 1 : 0;
}
