#include <gtest/gtest.h>

#include <cmath>

#include "strokenext/bench.hpp"
#include "strokenext/errors.hpp"

using namespace strokenext;
using namespace strokenext::bench;

namespace {

struct Reference {
  VariantName variant;
  double classifier_params_m, classifier_gmacs;  // single-encoder reference classifier
  double model_params_m, model_gmacs;            // dual-encoder model, two classes
};

const Reference kReference[] = {
    {VariantName::tiny, 28, 4.5, 57.6, 8.977},
    {VariantName::small, 50, 8.7, 100.8, 17.474},
    {VariantName::base, 89, 15.4, 178.5, 30.853},
    {VariantName::large, 198, 34.4, 399.9, 68.940},
};

double rel(double a, double b) { return std::abs(a - b) / b; }

template <typename Module>
std::uint64_t tensor_elements(Module& m) {
  std::uint64_t n = 0;
  for (const auto* p : m.parameters()) n += p->size();
  return n;
}

}  // namespace

TEST(Counting, ElementaryLayers) {
  EXPECT_EQ(dense_cost(10, 5).params, 55u);
  EXPECT_EQ(dense_cost(10, 5).macs, 50u);
  EXPECT_EQ(dense_cost(10, 5, false).params, 50u);
  EXPECT_EQ(conv_macs(3, 3, 1, 1, 1, 4, 4), 144u);
  EXPECT_EQ(conv_macs(7, 7, 8, 8, 8, 2, 2), 49u * 8 * 4);
}

TEST(Counting, ReferenceTotals) {
  for (const auto& row : kReference) {
    const auto v = make_variant(row.variant);
    const auto ref = reference_classifier_cost(v, 224, 1000);
    EXPECT_LT(rel(ref.params / 1e6, row.classifier_params_m), 0.05) << to_string(v.name);
    EXPECT_LT(rel(ref.macs / 1e9, row.classifier_gmacs), 0.10) << to_string(v.name);
    const auto cfg = make_model_config(row.variant);
    EXPECT_LT(rel(count_params(cfg) / 1e6, row.model_params_m), 0.05) << to_string(v.name);
    EXPECT_LT(rel(count_flops(cfg, 224) / 1e9, row.model_gmacs), 0.10) << to_string(v.name);
  }
}

TEST(Counting, CompositionalIdentity) {
  for (auto name : {VariantName::nano, VariantName::tiny, VariantName::base}) {
    for (auto mode : {FusionMode::k2conv, FusionMode::sum, FusionMode::concat_mlp,
                      FusionMode::attention2}) {
      const auto cfg = make_model_config(name, mode);
      const auto enc = encoder_cost(make_variant(name), 224);
      const auto dec = decoder_cost(cfg.fusion);
      EXPECT_EQ(count_params(cfg), 2 * enc.params + dec.params);
      EXPECT_EQ(count_flops(cfg, 224), 2 * enc.macs + dec.macs);
    }
  }
}

TEST(Counting, AnalyticMatchesBuiltModels) {
  for (auto name : {VariantName::nano, VariantName::tiny}) {
    for (auto mode : {FusionMode::k2conv, FusionMode::sum, FusionMode::concat_mlp,
                      FusionMode::attention2}) {
      if (name == VariantName::tiny && mode != FusionMode::k2conv) continue;
      const auto cfg = make_model_config(name, mode, name == VariantName::nano ? 48 : 0);
      StrokeNeXt<float> model(cfg);
      EXPECT_EQ(bench::count_params(model), count_params(cfg))
          << to_string(name) << " " << to_string(mode);
      EXPECT_EQ(bench::count_params(model), tensor_elements(model.encoder1) +
                                                tensor_elements(model.encoder2) +
                                                tensor_elements(model.decoder));
      EXPECT_EQ(tensor_elements(model.encoder1), encoder_cost(make_variant(name), 224).params);
    }
  }
}

TEST(Counting, QuadraticSpatialScaling) {
  for (auto name : {VariantName::nano, VariantName::tiny, VariantName::small, VariantName::base,
                    VariantName::large}) {
    const auto cfg = make_model_config(name);
    const double ratio = static_cast<double>(count_flops(cfg, 448)) / count_flops(cfg, 224);
    EXPECT_GE(ratio, 3.8);
    EXPECT_LE(ratio, 4.2);
  }
  EXPECT_THROW(count_flops(make_model_config(VariantName::tiny), 100), ConfigError);
}

TEST(Counting, IndependentOfParameterValues) {
  const auto cfg = make_model_config(VariantName::nano);
  StrokeNeXt<float> model(cfg);
  for (auto* p : model.parameters()) std::fill(p->value.begin(), p->value.end(), 0.0f);
  EXPECT_EQ(bench::count_params(model), count_params(cfg));
}

TEST(Measure, ThroughputAndOrdering) {
  BenchConfig cfg;
  cfg.image_size = 64;
  cfg.warmup = 1;
  cfg.trials = 5;
  const auto nano = measure(make_model_config(VariantName::nano), cfg);
  const auto tiny = measure(make_model_config(VariantName::tiny), cfg);
  for (const auto& r : {nano, tiny}) {
    EXPECT_EQ(r.trial_latencies_s.size(), 5u);
    EXPECT_NEAR(r.throughput_ips, r.batch_size / r.latency_s, 0.01 * r.throughput_ips);
    EXPECT_GT(r.latency_s, 0.0);
  }
  EXPECT_LT(nano.latency_s, tiny.latency_s);
  EXPECT_EQ(tiny.params, count_params(make_model_config(VariantName::tiny)));
  EXPECT_EQ(tiny.flops, count_flops(make_model_config(VariantName::tiny), 64));
  const auto j = tiny.to_json();
  for (const char* key : {"params", "flops", "latency_s", "throughput_ips", "peak_mem_bytes",
                          "batch_size", "image_size", "warmup", "trials"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
}

TEST(Measure, RejectsTooFewTrialsAndHugeBatches) {
  BenchConfig cfg;
  cfg.trials = 2;
  EXPECT_THROW(cfg.validate(), ConfigError);
  BenchConfig huge;
  huge.batch_size = 1u << 20;
  try {
    measure(make_model_config(VariantName::large), huge);
    FAIL();
  } catch (const BenchError& e) {
    EXPECT_NE(std::string(e.what()).find(std::to_string(huge.batch_size)), std::string::npos);
  }
}

TEST(Measure, CsvHasHeaderAndRows) {
  BenchReport r;
  r.variant = "nano";
  r.fusion_mode = "k2conv";
  const auto csv = format_csv({r, r});
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(csv.rfind("variant,", 0), 0u);
}
