#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "strokenext/nn.hpp"
#include "strokenext/tensor.hpp"

namespace strokenext {

enum class VariantName { nano, tiny, small, base, large };

struct EncoderVariant {
  VariantName name = VariantName::tiny;
  std::array<std::size_t, 4> channels{};
  std::array<std::size_t, 4> depths{};

  std::size_t embedding_width() const { return channels[3]; }
  bool operator==(const EncoderVariant&) const = default;
};

// ConvNeXt geometries; nano is a desk-scale variant for CPU experiments.
EncoderVariant make_variant(VariantName name);
EncoderVariant parse_variant(std::string_view text);  // throws ConfigError
std::string_view to_string(VariantName name);

inline constexpr double kLayerScaleInit = 1e-6;
inline constexpr double kLayerNormEps = 1e-6;
inline constexpr std::size_t kEncoderStride = 32;

// x + gamma * pw2(gelu(pw1(ln(dwconv7(x))))) on channels-last maps.
template <typename T>
class ConvNeXtBlock {
 public:
  ConvNeXtBlock(const std::string& prefix, std::size_t channels, Rng& rng);

  FeatureMap<T> forward(const FeatureMap<T>& x, const nn::Context& ctx);
  FeatureMap<T> backward(const FeatureMap<T>& dy);

  std::size_t channels() const { return channels_; }
  void collect(nn::ParamRefs<T>& out);

  nn::DepthwiseConv2d<T> dwconv;
  nn::LayerNorm<T> norm;
  nn::Linear<T> pwconv1;
  nn::Gelu<T> act;
  nn::Linear<T> pwconv2;
  nn::Param<T> gamma;

 private:
  std::size_t channels_;
  std::vector<T> branch_;  // pwconv2 output, needed for d(gamma)
};

// Four-stage hierarchical feature extractor without pooling or classifier.
template <typename T>
class Encoder {
 public:
  Encoder(const std::string& prefix, const EncoderVariant& variant, std::uint64_t seed);

  // [B,3,H,W] -> [B, channels[3], H/32, W/32]; H and W must be divisible by 32.
  FeatureMap<T> forward(const FeatureMap<T>& x, const nn::Context& ctx);
  FeatureMap<T> backward(const FeatureMap<T>& dy);

  const EncoderVariant& variant() const { return variant_; }
  nn::ParamRefs<T> parameters();

  struct Stage {
    // Stage 0 uses the stem (patch 4, norm after); later stages downsample
    // with norm then patch-2 convolution.
    std::unique_ptr<nn::LayerNorm<T>> pre_norm;
    std::unique_ptr<nn::PatchConv2d<T>> conv;
    std::unique_ptr<nn::LayerNorm<T>> post_norm;
    std::vector<ConvNeXtBlock<T>> blocks;
  };
  std::vector<Stage>& stages() { return stages_; }

 private:
  EncoderVariant variant_;
  std::vector<Stage> stages_;
};

// Layer-norm on a channels-last map (all positions share the statistics axis).
template <typename T>
FeatureMap<T> apply_norm(nn::LayerNorm<T>& norm, const FeatureMap<T>& x,
                         const nn::Context& ctx);
template <typename T>
FeatureMap<T> apply_norm_backward(nn::LayerNorm<T>& norm, const FeatureMap<T>& dy);

}  // namespace strokenext
