#include "strokenext/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <new>
#include <nlohmann/json.hpp>
#include <optional>

#include "strokenext/bench.hpp"
#include "strokenext/checkpoint.hpp"
#include "strokenext/data.hpp"
#include "strokenext/errors.hpp"
#include "strokenext/io.hpp"
#include "strokenext/metrics.hpp"
#include "strokenext/model.hpp"
#include "strokenext/stats.hpp"
#include "strokenext/training.hpp"

namespace strokenext::cli {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const FingerprintMismatch*>(&e)) return kExitFingerprint;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ShapeError*>(&e)) return kExitUsage;
  if (dynamic_cast<const ComparisonError*>(&e)) return kExitMismatch;
  if (dynamic_cast<const BenchError*>(&e) || dynamic_cast<const std::bad_alloc*>(&e)) return kExitOom;
  if (dynamic_cast<const NumericalError*>(&e)) return kExitNumerical;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const DatasetError*>(&e) ||
      dynamic_cast<const IntegrityError*>(&e) || dynamic_cast<const EvaluationError*>(&e) ||
      dynamic_cast<const fs::filesystem_error*>(&e)) {
    return kExitIo;
  }
  return kExitInternal;
}

namespace {

// 64-bit values exceed the exact integer range of most JSON readers.
std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Manifest path for an output file: dir/stem.manifest.json.
fs::path manifest_for(const fs::path& output) {
  fs::path p = output;
  p.replace_extension(".manifest.json");
  return p;
}

json stamp(json j, const fs::path& manifest) {
  j["tool_version"] = kToolVersion;
  j["schema_version"] = kSchemaVersion;
  j["manifest_ref"] = manifest.filename().string();
  return j;
}

void write_json(const fs::path& path, const json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

void ensure_parent(const fs::path& p) {
  const fs::path parent = p.parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  fs::create_directories(parent, ec);
  if (ec) throw IoError("cannot create directory '" + parent.string() + "'");
}

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  json config = json::object();
  json seeds = json::object();
  std::string started_at = utc_now();
  std::vector<fs::path> artifacts;

  void write(const fs::path& path) const {
    std::vector<std::string> paths;
    for (const auto& a : artifacts) paths.push_back(a.string());
    json j = {{"command", command},          {"argv", argv},
              {"config", config},            {"seeds", seeds},
              {"started_at", started_at},    {"finished_at", utc_now()},
              {"artifacts", paths}};
    write_json(path, stamp(std::move(j), path));
  }
};

VariantName variant_flag(const std::string& s) { return parse_variant(s).name; }

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string out;
  std::string task = "subtype";
  std::size_t n_per_class = 0;
  std::uint64_t seed = 0;
  int image_size = data::kSyntheticImageSize;
};

int cmd_synth(const SynthArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  Manifest m;
  m.command = "synth";
  m.argv = argv;
  const data::Task task = data::parse_task(a.task);
  const fs::path root = a.out;
  const auto index = data::generate_synthetic(a.n_per_class, task, a.seed, root, a.image_size);

  const fs::path manifest_path = root / "run_manifest.json";
  // Point the dataset manifest at the run manifest.
  json ds = json::parse(read_text(root / "manifest.json"));
  ds["manifest_ref"] = manifest_path.filename().string();
  write_json(root / "manifest.json", ds);

  m.config = {{"out", a.out}, {"task", a.task}, {"n_per_class", a.n_per_class},
              {"image_size", a.image_size}};
  m.seeds = {{"seed", a.seed}};
  m.artifacts = {root / "manifest.json"};
  for (const auto& s : index.samples) m.artifacts.push_back(s.path);
  m.write(manifest_path);
  out << "wrote " << index.size() << " images to " << root.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string data_dir;
  std::string task = "subtype";
  std::string variant = "tiny";
  std::string fusion_mode = "k2conv";
  std::size_t hidden_width = 0;
  double dropout = 0.2;
  std::string out;
  training::TrainConfig cfg;
  std::optional<std::uint64_t> split_seed;
  std::vector<double> split_ratios{0.8, 0.1, 0.1};
  bool stratified = false;
  bool no_augment = false;
  std::size_t patience = 3;
};

json history_json(const training::TrainHistory& h) {
  json epochs = json::array();
  for (const auto& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_accuracy", e.train_accuracy},
                      {"val_loss", e.val_loss},
                      {"val_accuracy", e.val_accuracy},
                      {"lr", e.lr}});
  }
  return {{"epochs", epochs}, {"steps", h.steps}, {"best_epoch", h.best_epoch}};
}

int cmd_train(TrainArgs a, const std::vector<std::string>& argv, std::ostream& out) {
  Manifest m;
  m.command = "train";
  m.argv = argv;
  if (a.split_ratios.size() != 3) throw ConfigError("--split-ratios takes three values");
  a.cfg.augment.enabled = !a.no_augment;
  a.cfg.scheduler.patience = a.patience;
  a.cfg.validate();

  const data::Task task = data::parse_task(a.task);
  const auto index = data::scan_dataset(a.data_dir, task);
  data::SplitSpec spec;
  std::copy(a.split_ratios.begin(), a.split_ratios.end(), spec.ratios.begin());
  spec.seed = a.split_seed.value_or(a.cfg.seed);
  spec.stratified = a.stratified;
  const auto parts = data::split(index, spec);

  const ModelConfig mcfg =
      make_model_config(variant_flag(a.variant), parse_fusion_mode(a.fusion_mode), a.hidden_width,
                        a.dropout, index.num_classes(), task, a.cfg.seed);
  StrokeNeXt<float> model(mcfg);

  const data::ImageCache train_images(parts.train);
  const data::ImageCache val_images(parts.val);
  const auto result = training::train(
      model, {&parts.train, &train_images}, {&parts.val, &val_images}, a.cfg,
      [&](const training::EpochRecord& r) {
        out << "epoch " << r.epoch << " train_loss " << r.train_loss << " train_acc "
            << r.train_accuracy << " val_loss " << r.val_loss << " val_acc " << r.val_accuracy
            << " lr " << r.lr << "\n";
      });

  training::Checkpoint best = result.best.params.empty() ? result.last : result.best;
  best.split_seed = spec.seed;
  best.split_ratios = spec.ratios;
  best.split_stratified = spec.stratified;
  best.image_size = a.cfg.image_size;
  best.class_names = index.class_names;

  const fs::path ckpt_path = a.out;
  ensure_parent(ckpt_path);
  fs::path history_path = ckpt_path;
  history_path.replace_extension(".history.json");
  const fs::path manifest_path = manifest_for(ckpt_path);

  save_checkpoint(best, ckpt_path);
  json hist = history_json(result.history);
  hist["config_fingerprint"] = hex64(mcfg.fingerprint());
  hist["checkpoint"] = ckpt_path.filename().string();
  write_json(history_path, stamp(hist, manifest_path));

  m.config = {{"data", a.data_dir},
              {"task", a.task},
              {"variant", a.variant},
              {"fusion_mode", a.fusion_mode},
              {"hidden_width", mcfg.fusion.hidden_width},
              {"dropout", a.dropout},
              {"epochs", a.cfg.epochs},
              {"batch_size", a.cfg.batch_size},
              {"lr", a.cfg.lr},
              {"weight_decay", a.cfg.weight_decay},
              {"smoothing", a.cfg.smoothing},
              {"patience", a.cfg.scheduler.patience},
              {"image_size", a.cfg.image_size},
              {"augment", a.cfg.augment.enabled},
              {"max_steps", a.cfg.max_steps},
              {"split_ratios", a.split_ratios},
              {"stratified", a.stratified},
              {"model_fingerprint", hex64(mcfg.fingerprint())},
              {"model", mcfg.canonical()}};
  m.seeds = {{"seed", a.cfg.seed},
             {"split_seed", spec.seed},
             {"branch1_seed", mcfg.branch1_seed},
             {"branch2_seed", mcfg.branch2_seed},
             {"decoder_seed", mcfg.decoder_seed}};
  m.artifacts = {ckpt_path, history_path};
  m.write(manifest_path);
  out << "best epoch " << result.history.best_epoch << ", checkpoint " << ckpt_path.string()
      << "\n";
  return kExitOk;
}

// ------------------------------------------------------------- evaluate

struct EvaluateArgs {
  std::string ckpt;
  std::string data_dir;
  std::string split = "test";
  std::string report;
  std::string log;
  std::size_t batch_size = 16;
  std::size_t ece_bins = metrics::kDefaultEceBins;
  std::string variant, fusion_mode, task;  // optional expectations
};

int cmd_evaluate(const EvaluateArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  Manifest m;
  m.command = "evaluate";
  m.argv = argv;
  if (a.split != "train" && a.split != "val" && a.split != "test") {
    throw ConfigError("--split must be train, val or test");
  }

  // Peek at the stored config, then re-load against the caller's expectations.
  training::Checkpoint ckpt = load_checkpoint(a.ckpt);
  if (!a.variant.empty() || !a.fusion_mode.empty() || !a.task.empty()) {
    ModelConfig expected = ckpt.model;
    if (!a.variant.empty()) {
      expected.variant = parse_variant(a.variant);
      expected.fusion.channels = expected.variant.embedding_width();
    }
    if (!a.fusion_mode.empty()) expected.fusion.mode = parse_fusion_mode(a.fusion_mode);
    if (!a.task.empty()) expected.task = data::parse_task(a.task);
    ckpt = load_checkpoint(a.ckpt, expected);
  }

  const auto index = data::scan_dataset(a.data_dir, ckpt.model.task);
  if (index.class_names != ckpt.class_names) {
    std::string have, want;
    for (const auto& n : index.class_names) have += " " + n;
    for (const auto& n : ckpt.class_names) want += " " + n;
    throw FingerprintMismatch("dataset classes [" + have + " ] do not match checkpoint classes [" +
                              want + " ]");
  }
  data::SplitSpec spec;
  spec.ratios = ckpt.split_ratios;
  spec.seed = ckpt.split_seed;
  spec.stratified = ckpt.split_stratified;
  const auto parts = data::split(index, spec);
  const data::DatasetIndex& part =
      a.split == "train" ? parts.train : (a.split == "val" ? parts.val : parts.test);

  StrokeNeXt<float> model(ckpt.model);
  training::restore(model, ckpt);
  const data::ImageCache images(part);

  metrics::ReportOptions opts;
  opts.positive_class = data::default_positive_class(index);
  opts.ece_bins = a.ece_bins;
  opts.multiclass_brier = index.num_classes() > 2;
  opts.class_names = index.class_names;
  const auto result = metrics::evaluate(model, part, images, a.batch_size, ckpt.image_size, opts);

  const fs::path report_path = a.report;
  const fs::path log_path = a.log;
  ensure_parent(report_path);
  ensure_parent(log_path);
  const fs::path manifest_path = manifest_for(report_path);
  metrics::write_prediction_log(log_path, result.log);
  json rep = result.report.to_json();
  rep["split"] = a.split;
  rep["checkpoint"] = a.ckpt;
  rep["prediction_log"] = log_path.string();
  write_json(report_path, stamp(rep, manifest_path));

  m.config = {{"ckpt", a.ckpt},          {"data", a.data_dir},
              {"split", a.split},        {"batch_size", a.batch_size},
              {"ece_bins", a.ece_bins},  {"image_size", ckpt.image_size},
              {"model", ckpt.model.canonical()}};
  m.seeds = {{"split_seed", ckpt.split_seed}};
  m.artifacts = {report_path, log_path};
  m.write(manifest_path);
  out << a.split << " accuracy " << result.report.accuracy << " over " << result.report.n
      << " samples\n";
  return kExitOk;
}

// -------------------------------------------------------------- compare

struct CompareArgs {
  std::string log_a, log_b, out;
  std::string method_a, method_b;
  double alpha = 0.05;
  bool exact = false;
};

int cmd_compare(const CompareArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  Manifest m;
  m.command = "compare";
  m.argv = argv;
  if (!(a.alpha > 0.0 && a.alpha < 1.0)) throw ConfigError("--alpha must lie in (0, 1)");
  const auto log_a = metrics::read_prediction_log(a.log_a);
  const auto log_b = metrics::read_prediction_log(a.log_b);
  const auto d = stats::discordant_counts(log_a, log_b);
  const auto r = stats::mcnemar(d.b, d.c, a.alpha, a.exact);

  const fs::path out_path = a.out;
  ensure_parent(out_path);
  const fs::path manifest_path = manifest_for(out_path);
  json j = stats::to_json(r);
  j["method_a"] = a.method_a.empty() ? fs::path(a.log_a).stem().string() : a.method_a;
  j["method_b"] = a.method_b.empty() ? fs::path(a.log_b).stem().string() : a.method_b;
  j["n"] = log_a.size();
  write_json(out_path, stamp(j, manifest_path));

  m.config = {{"log_a", a.log_a}, {"log_b", a.log_b}, {"alpha", a.alpha}, {"exact", a.exact}};
  m.artifacts = {out_path};
  m.write(manifest_path);
  out << "b " << r.b << " c " << r.c << " chi2 " << r.chi2 << " p " << r.p_value
      << (r.significant ? " significant" : " not significant") << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- bench

struct BenchArgs {
  std::string variant = "tiny";
  std::string fusion_mode = "k2conv";
  std::size_t hidden_width = 0;
  std::size_t num_classes = 2;
  bench::BenchConfig cfg;
  std::string out;
  std::string csv;
};

int cmd_bench(const BenchArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  Manifest m;
  m.command = "bench";
  m.argv = argv;
  const ModelConfig mcfg = make_model_config(variant_flag(a.variant),
                                             parse_fusion_mode(a.fusion_mode), a.hidden_width,
                                             0.2, a.num_classes);
  const auto rep = bench::measure(mcfg, a.cfg);

  const fs::path out_path = a.out;
  ensure_parent(out_path);
  const fs::path manifest_path = manifest_for(out_path);
  write_json(out_path, stamp(rep.to_json(), manifest_path));
  m.artifacts = {out_path};
  if (!a.csv.empty()) {
    ensure_parent(a.csv);
    write_text_atomic(a.csv, bench::format_csv({rep}));
    m.artifacts.emplace_back(a.csv);
  }
  m.config = {{"variant", a.variant},
              {"fusion_mode", a.fusion_mode},
              {"hidden_width", mcfg.fusion.hidden_width},
              {"num_classes", a.num_classes},
              {"batch_size", a.cfg.batch_size},
              {"image_size", a.cfg.image_size},
              {"warmup", a.cfg.warmup},
              {"trials", a.cfg.trials}};
  m.seeds = {{"seed", a.cfg.seed}};
  m.write(manifest_path);
  out << a.variant << " params " << rep.params << " macs " << rep.flops << " latency "
      << rep.latency_s << " s throughput " << rep.throughput_ips << " img/s\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dual-encoder ConvNeXt stroke classifier: data, training, evaluation, benchmarks",
               "strokenext"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write a synthetic CT-like dataset");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--task", synth.task, "presence or subtype")->capture_default_str();
  s->add_option("--n-per-class", synth.n_per_class, "Images per class")->required();
  s->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  s->add_option("--image-size", synth.image_size, "Image side in pixels")->capture_default_str();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model and write its best checkpoint");
  t->add_option("--data", train.data_dir, "Dataset root")->required();
  t->add_option("--task", train.task, "presence or subtype")->capture_default_str();
  t->add_option("--variant", train.variant, "nano, tiny, small, base, large")->capture_default_str();
  t->add_option("--epochs", train.cfg.epochs)->capture_default_str();
  t->add_option("--batch-size", train.cfg.batch_size)->capture_default_str();
  t->add_option("--lr", train.cfg.lr)->capture_default_str();
  t->add_option("--weight-decay", train.cfg.weight_decay)->capture_default_str();
  t->add_option("--smoothing", train.cfg.smoothing, "Label smoothing")->capture_default_str();
  t->add_option("--seed", train.cfg.seed)->capture_default_str();
  t->add_option("--split-seed", train.split_seed, "Defaults to --seed");
  t->add_option("--split-ratios", train.split_ratios, "train val test")->expected(3);
  t->add_flag("--stratified", train.stratified, "Stratify the split by class");
  t->add_option("--fusion-mode", train.fusion_mode, "k2conv, sum, concat_mlp, attention2")
      ->capture_default_str();
  t->add_option("--hidden-width", train.hidden_width, "Bottleneck width (0 = C)")
      ->capture_default_str();
  t->add_option("--dropout", train.dropout)->capture_default_str();
  t->add_option("--image-size", train.cfg.image_size)->capture_default_str();
  t->add_option("--patience", train.patience, "Plateau patience in epochs")->capture_default_str();
  t->add_option("--max-steps", train.cfg.max_steps, "Stop after this many steps (0 = off)")
      ->capture_default_str();
  t->add_flag("--no-augment", train.no_augment, "Disable training augmentation");
  t->add_option("--out", train.out, "Checkpoint path")->required();

  EvaluateArgs eval;
  auto* e = app.add_subcommand("evaluate", "Evaluate a checkpoint on one split");
  e->add_option("--ckpt", eval.ckpt)->required();
  e->add_option("--data", eval.data_dir)->required();
  e->add_option("--split", eval.split, "train, val or test")->capture_default_str();
  e->add_option("--report", eval.report, "Report JSON path")->required();
  e->add_option("--log", eval.log, "Prediction log CSV path")->required();
  e->add_option("--batch-size", eval.batch_size)->capture_default_str();
  e->add_option("--ece-bins", eval.ece_bins)->capture_default_str();
  e->add_option("--variant", eval.variant, "Expected variant");
  e->add_option("--fusion-mode", eval.fusion_mode, "Expected fusion mode");
  e->add_option("--task", eval.task, "Expected task");

  CompareArgs cmp;
  auto* c = app.add_subcommand("compare", "McNemar test between two prediction logs");
  c->add_option("--log-a", cmp.log_a)->required();
  c->add_option("--log-b", cmp.log_b)->required();
  c->add_option("--alpha", cmp.alpha)->capture_default_str();
  c->add_option("--method-a", cmp.method_a, "Name of A (default: file stem)");
  c->add_option("--method-b", cmp.method_b, "Name of B (default: file stem)");
  c->add_flag("--exact", cmp.exact, "Also report the exact binomial p-value when b+c < 25");
  c->add_option("--out", cmp.out)->required();

  BenchArgs bch;
  auto* b = app.add_subcommand("bench", "Parameter/MAC accounting and latency measurement");
  b->add_option("--variant", bch.variant)->capture_default_str();
  b->add_option("--fusion-mode", bch.fusion_mode)->capture_default_str();
  b->add_option("--hidden-width", bch.hidden_width)->capture_default_str();
  b->add_option("--num-classes", bch.num_classes)->capture_default_str();
  b->add_option("--batch-size", bch.cfg.batch_size)->capture_default_str();
  b->add_option("--image-size", bch.cfg.image_size)->capture_default_str();
  b->add_option("--warmup", bch.cfg.warmup)->capture_default_str();
  b->add_option("--trials", bch.cfg.trials)->capture_default_str();
  b->add_option("--seed", bch.cfg.seed)->capture_default_str();
  b->add_option("--out", bch.out, "Report JSON path")->required();
  b->add_option("--csv", bch.csv, "Optional CSV row");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n\n";
    const CLI::App* sub = nullptr;
    for (const auto* cand : app.get_subcommands()) sub = cand;
    err << (sub ? sub->help() : app.help());
    return kExitUsage;
  }

  try {
    if (*s) return cmd_synth(synth, args, out);
    if (*t) return cmd_train(train, args, out);
    if (*e) return cmd_evaluate(eval, args, out);
    if (*c) return cmd_compare(cmp, args, out);
    if (*b) return cmd_bench(bch, args, out);
  } catch (const std::exception& ex) {
    const int code = exit_code_for(ex);
    err << "error: " << ex.what() << "\n";
    return code;
  }
  return kExitInternal;
}

}  // namespace strokenext::cli
