#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "strokenext/model.hpp"

namespace strokenext::bench {

// Trainable parameters and multiply-accumulates for one image.
struct Cost {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;

  Cost& operator+=(const Cost& o) {
    params += o.params;
    macs += o.macs;
    return *this;
  }
  bool operator==(const Cost&) const = default;
};

std::uint64_t conv_macs(std::uint64_t kh, std::uint64_t kw, std::uint64_t c_in,
                        std::uint64_t c_out, std::uint64_t groups, std::uint64_t h_out,
                        std::uint64_t w_out);
Cost dense_cost(std::uint64_t in, std::uint64_t out, bool bias = true);

// Analytic accounting; nothing is allocated, so every variant can be counted.
// Normalization and activations contribute parameters but no MACs.
Cost encoder_cost(const EncoderVariant& v, int image_size);
Cost decoder_cost(const FusionConfig& cfg);
Cost model_cost(const ModelConfig& cfg, int image_size);
// Single-encoder classifier: encoder, final layer norm, linear head.
Cost reference_classifier_cost(const EncoderVariant& v, int image_size,
                               std::size_t num_classes = 1000);

// Element count of every trainable tensor of a built model.
template <typename T>
std::uint64_t count_params(StrokeNeXt<T>& model) {
  std::uint64_t n = 0;
  for (const auto* p : model.parameters()) n += p->size();
  return n;
}
std::uint64_t count_params(const ModelConfig& cfg);
std::uint64_t count_flops(const ModelConfig& cfg, int image_size);

struct BenchConfig {
  std::size_t batch_size = 1;
  int image_size = 224;
  std::size_t warmup = 10;
  std::size_t trials = 30;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

struct BenchReport {
  std::string variant;
  std::string fusion_mode;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;  // MACs at image_size
  double latency_s = 0;     // median seconds per batch
  double throughput_ips = 0;
  std::uint64_t peak_mem_bytes = 0;
  bool peak_mem_supported = false;
  std::size_t batch_size = 0;
  int image_size = 0;
  std::size_t warmup = 0;
  std::size_t trials = 0;
  std::vector<double> trial_latencies_s;

  nlohmann::json to_json() const;
};

// Rough bytes for building the model plus one inference pass.
std::uint64_t estimate_memory_bytes(const ModelConfig& model_cfg, const BenchConfig& cfg);
// MemAvailable from the kernel, or 0 when unknown.
std::uint64_t available_memory_bytes();

// Peak resident set size of this process, or 0 when the platform has no counter.
std::uint64_t peak_rss_bytes();

BenchReport measure(StrokeNeXt<float>& model, const BenchConfig& cfg);
// Builds the model first. Raises BenchError when the estimate exceeds the
// available memory or an allocation fails.
BenchReport measure(const ModelConfig& model_cfg, const BenchConfig& cfg);

std::string format_csv(const std::vector<BenchReport>& reports);

}  // namespace strokenext::bench
