#include "strokenext/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <new>
#include <sstream>

#include "strokenext/errors.hpp"

namespace strokenext::bench {

std::uint64_t conv_macs(std::uint64_t kh, std::uint64_t kw, std::uint64_t c_in,
                        std::uint64_t c_out, std::uint64_t groups, std::uint64_t h_out,
                        std::uint64_t w_out) {
  return kh * kw * (c_in / groups) * c_out * h_out * w_out;
}

Cost dense_cost(std::uint64_t in, std::uint64_t out, bool bias) {
  return {in * out + (bias ? out : 0), in * out};
}

namespace {

Cost layer_norm_cost(std::uint64_t c) { return {2 * c, 0}; }

Cost block_cost(std::uint64_t c, std::uint64_t h, std::uint64_t w) {
  Cost cost;
  cost += {49 * c + c, conv_macs(7, 7, c, c, c, h, w)};
  cost += layer_norm_cost(c);
  Cost pw1 = dense_cost(c, 4 * c);
  Cost pw2 = dense_cost(4 * c, c);
  pw1.macs *= h * w;
  pw2.macs *= h * w;
  cost += pw1;
  cost += pw2;
  cost += {c, 0};  // layer scale
  return cost;
}

void check_size(int image_size) {
  if (image_size <= 0 || image_size % static_cast<int>(kEncoderStride) != 0) {
    throw ConfigError("image size " + std::to_string(image_size) + " is not a positive multiple of " +
                      std::to_string(kEncoderStride));
  }
}

}  // namespace

Cost encoder_cost(const EncoderVariant& v, int image_size) {
  check_size(image_size);
  Cost cost;
  auto side = static_cast<std::uint64_t>(image_size) / 4;
  std::uint64_t prev = 3;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::uint64_t c = v.channels[s];
    if (s == 0) {
      cost += {4 * 4 * prev * c + c, conv_macs(4, 4, prev, c, 1, side, side)};
      cost += layer_norm_cost(c);
    } else {
      side /= 2;
      cost += layer_norm_cost(prev);
      cost += {2 * 2 * prev * c + c, conv_macs(2, 2, prev, c, 1, side, side)};
    }
    for (std::size_t d = 0; d < v.depths[s]; ++d) cost += block_cost(c, side, side);
    prev = c;
  }
  return cost;
}

Cost decoder_cost(const FusionConfig& cfg) {
  const std::uint64_t C = cfg.channels, H = cfg.hidden_width, K = cfg.num_classes;
  Cost cost;
  switch (cfg.mode) {
    case FusionMode::k2conv:
      cost += {2 * C * C + C, conv_macs(2, 1, C, C, 1, 1, 1)};
      cost += {2 * C, 0};
      break;
    case FusionMode::sum:
      break;
    case FusionMode::concat_mlp:
      cost += dense_cost(2 * C, H);
      cost += dense_cost(H, C);
      break;
    case FusionMode::attention2: {
      Cost qkv = dense_cost(C, C);
      qkv.params *= 3;
      qkv.macs *= 3 * 2;  // three projections over two tokens
      cost += qkv;
      cost += {0, 2 * 2 * C * 2};  // scores plus weighted sum
      break;
    }
  }
  cost += dense_cost(C, H);
  cost += {2 * H, 0};
  cost += dense_cost(H, C);
  cost += {2 * C, 0};
  cost += dense_cost(C, K);
  return cost;
}

Cost model_cost(const ModelConfig& cfg, int image_size) {
  cfg.validate();
  const Cost enc = encoder_cost(cfg.variant, image_size);
  Cost cost = enc;
  cost += enc;
  cost += decoder_cost(cfg.fusion);
  return cost;
}

Cost reference_classifier_cost(const EncoderVariant& v, int image_size, std::size_t num_classes) {
  Cost cost = encoder_cost(v, image_size);
  cost += layer_norm_cost(v.embedding_width());
  cost += dense_cost(v.embedding_width(), num_classes);
  return cost;
}

std::uint64_t count_params(const ModelConfig& cfg) {
  return model_cost(cfg, static_cast<int>(kEncoderStride)).params;
}

std::uint64_t count_flops(const ModelConfig& cfg, int image_size) {
  return model_cost(cfg, image_size).macs;
}

void BenchConfig::validate() const {
  if (batch_size == 0) throw ConfigError("bench batch size must be positive");
  if (trials < 3) throw ConfigError("bench needs at least 3 trials");
  check_size(image_size);
}

nlohmann::json BenchReport::to_json() const {
  return {
      {"variant", variant},
      {"fusion_mode", fusion_mode},
      {"params", params},
      {"flops", flops},
      {"flops_convention", "multiply-accumulates per image; normalization and activations excluded"},
      {"latency_s", latency_s},
      {"latency_statistic", "median"},
      {"throughput_ips", throughput_ips},
      {"peak_mem_bytes", peak_mem_bytes},
      {"peak_mem_status", peak_mem_supported ? "process-peak-rss" : "unsupported"},
      {"batch_size", batch_size},
      {"image_size", image_size},
      {"warmup", warmup},
      {"trials", trials},
      {"trial_latencies_s", trial_latencies_s},
  };
}

std::uint64_t peak_rss_bytes() {
  std::ifstream is("/proc/self/status");
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("VmHWM:", 0) == 0) {
      std::istringstream ss(line.substr(6));
      std::uint64_t kb = 0;
      ss >> kb;
      return kb * 1024;
    }
  }
  return 0;
}

BenchReport measure(StrokeNeXt<float>& model, const BenchConfig& cfg) {
  cfg.validate();
  BenchReport rep;
  const auto& mc = model.config();
  rep.variant = std::string(to_string(mc.variant.name));
  rep.fusion_mode = std::string(to_string(mc.fusion.mode));
  rep.params = count_params(model);
  rep.flops = count_flops(mc, cfg.image_size);
  rep.batch_size = cfg.batch_size;
  rep.image_size = cfg.image_size;
  rep.warmup = cfg.warmup;
  rep.trials = cfg.trials;

  try {
    const auto side = static_cast<std::size_t>(cfg.image_size);
    FeatureMap<float> x(cfg.batch_size, 3, side, side);
    Rng rng(derive_seed(cfg.seed, 0xbe7c));
    for (auto& v : x.values) v = static_cast<float>(rng.normal());

    const nn::Context ctx{};
    for (std::size_t i = 0; i < cfg.warmup; ++i) (void)model.forward(x, ctx);
    using clock = std::chrono::steady_clock;
    for (std::size_t i = 0; i < cfg.trials; ++i) {
      const auto t0 = clock::now();
      const auto out = model.forward(x, ctx);
      const auto t1 = clock::now();
      if (out.values.empty()) throw BenchError("forward pass produced no output");
      rep.trial_latencies_s.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
  } catch (const std::bad_alloc&) {
    throw BenchError("out of memory at batch size " + std::to_string(cfg.batch_size));
  }

  std::vector<double> sorted = rep.trial_latencies_s;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  rep.latency_s = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  rep.throughput_ips = static_cast<double>(cfg.batch_size) / rep.latency_s;
  rep.peak_mem_bytes = peak_rss_bytes();
  rep.peak_mem_supported = rep.peak_mem_bytes > 0;
  return rep;
}

std::uint64_t estimate_memory_bytes(const ModelConfig& model_cfg, const BenchConfig& cfg) {
  // float values and gradients per parameter, plus the widest activation
  // (the 4C expansion at stride 4) a few times over for both branches.
  const std::uint64_t params = count_params(model_cfg);
  const std::uint64_t side = static_cast<std::uint64_t>(cfg.image_size) / 4;
  const std::uint64_t widest = 4 * model_cfg.variant.channels[0] * side * side;
  return 8 * params + cfg.batch_size * widest * 4 * 2 * 4;
}

std::uint64_t available_memory_bytes() {
  std::ifstream is("/proc/meminfo");
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("MemAvailable:", 0) == 0) {
      std::istringstream ss(line.substr(13));
      std::uint64_t kb = 0;
      ss >> kb;
      return kb * 1024;
    }
  }
  return 0;
}

BenchReport measure(const ModelConfig& model_cfg, const BenchConfig& cfg) {
  cfg.validate();
  const std::uint64_t need = estimate_memory_bytes(model_cfg, cfg);
  const std::uint64_t have = available_memory_bytes();
  if (have && need > have) {
    throw BenchError("out of memory at batch size " + std::to_string(cfg.batch_size) + ": needs ~" +
                     std::to_string(need >> 20) + " MiB, " + std::to_string(have >> 20) +
                     " MiB available");
  }
  try {
    StrokeNeXt<float> model(model_cfg);
    return measure(model, cfg);
  } catch (const std::bad_alloc&) {
    throw BenchError("out of memory building the model for batch size " +
                     std::to_string(cfg.batch_size));
  }
}

std::string format_csv(const std::vector<BenchReport>& reports) {
  std::string out =
      "variant,fusion_mode,params,flops,latency_s,throughput_ips,peak_mem_bytes,batch_size,"
      "image_size,warmup,trials\n";
  char buf[256];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%s,%s,%llu,%llu,%.9g,%.9g,%llu,%zu,%d,%zu,%zu\n",
                  r.variant.c_str(), r.fusion_mode.c_str(),
                  static_cast<unsigned long long>(r.params),
                  static_cast<unsigned long long>(r.flops), r.latency_s, r.throughput_ips,
                  static_cast<unsigned long long>(r.peak_mem_bytes), r.batch_size, r.image_size,
                  r.warmup, r.trials);
    out += buf;
  }
  return out;
}

}  // namespace strokenext::bench
