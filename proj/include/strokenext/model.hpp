#pragma once

#include <cstdint>
#include <string>

#include "strokenext/data.hpp"
#include "strokenext/encoder.hpp"
#include "strokenext/fusion.hpp"

namespace strokenext {

struct ModelConfig {
  EncoderVariant variant = make_variant(VariantName::tiny);
  FusionConfig fusion;
  data::Task task = data::Task::presence;
  std::uint64_t branch1_seed = 1;
  std::uint64_t branch2_seed = 2;
  std::uint64_t decoder_seed = 3;

  void validate() const;  // throws ConfigError

  // Canonical description of the architecture (seeds excluded).
  std::string canonical() const;
  // FNV-1a of canonical(); a checkpoint only loads into a matching config.
  std::uint64_t fingerprint() const;

  bool operator==(const ModelConfig&) const = default;
};

// hidden_width == 0 selects H = C.
ModelConfig make_model_config(VariantName variant, FusionMode mode = FusionMode::k2conv,
                              std::size_t hidden_width = 0, double dropout = 0.2,
                              std::size_t num_classes = 2,
                              data::Task task = data::Task::presence, std::uint64_t seed = 0);

// Two independently parameterized encoders over the same image, global
// average pooling per branch, and the fusion decoder.
template <typename T>
class StrokeNeXt {
 public:
  explicit StrokeNeXt(const ModelConfig& cfg);

  // x: [B, 3, H, W] -> logits [B, K]
  Embedding<T> forward(const FeatureMap<T>& x, const nn::Context& ctx);
  // Accumulates parameter gradients from d(loss)/d(logits).
  void backward(const Embedding<T>& dlogits);

  nn::ParamRefs<T> parameters();
  nn::BufferRefs<T> buffers();
  void zero_grad();

  const ModelConfig& config() const { return cfg_; }

  Encoder<T> encoder1;
  Encoder<T> encoder2;
  FusionDecoder<T> decoder;

 private:
  ModelConfig cfg_;
  std::size_t feat_h_ = 0, feat_w_ = 0;
};

}  // namespace strokenext
