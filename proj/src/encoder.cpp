#include "strokenext/encoder.hpp"

#include "strokenext/errors.hpp"

namespace strokenext {

EncoderVariant make_variant(VariantName name) {
  switch (name) {
    case VariantName::nano:
      return {name, {24, 48, 96, 192}, {2, 2, 4, 2}};
    case VariantName::tiny:
      return {name, {96, 192, 384, 768}, {3, 3, 9, 3}};
    case VariantName::small:
      return {name, {96, 192, 384, 768}, {3, 3, 27, 3}};
    case VariantName::base:
      return {name, {128, 256, 512, 1024}, {3, 3, 27, 3}};
    case VariantName::large:
      return {name, {192, 384, 768, 1536}, {3, 3, 27, 3}};
  }
  throw ConfigError("unknown encoder variant");
}

std::string_view to_string(VariantName name) {
  switch (name) {
    case VariantName::nano: return "nano";
    case VariantName::tiny: return "tiny";
    case VariantName::small: return "small";
    case VariantName::base: return "base";
    case VariantName::large: return "large";
  }
  return "?";
}

EncoderVariant parse_variant(std::string_view text) {
  for (auto v : {VariantName::nano, VariantName::tiny, VariantName::small, VariantName::base,
                 VariantName::large}) {
    if (to_string(v) == text) return make_variant(v);
  }
  throw ConfigError("unknown variant '" + std::string(text) +
                    "' (expected nano|tiny|small|base|large)");
}

template <typename T>
FeatureMap<T> apply_norm(nn::LayerNorm<T>& norm, const FeatureMap<T>& x,
                         const nn::Context& ctx) {
  FeatureMap<T> y;
  y.batch = x.batch;
  y.channels = x.channels;
  y.height = x.height;
  y.width = x.width;
  y.values = norm.forward(x.values, x.positions(), ctx);
  return y;
}

template <typename T>
FeatureMap<T> apply_norm_backward(nn::LayerNorm<T>& norm, const FeatureMap<T>& dy) {
  FeatureMap<T> dx;
  dx.batch = dy.batch;
  dx.channels = dy.channels;
  dx.height = dy.height;
  dx.width = dy.width;
  dx.values = norm.backward(dy.values);
  return dx;
}

// ---------------------------------------------------------------- block

template <typename T>
ConvNeXtBlock<T>::ConvNeXtBlock(const std::string& prefix, std::size_t channels, Rng& rng)
    : dwconv(prefix + ".dwconv", channels, 7, 3, rng),
      norm(prefix + ".norm", channels, kLayerNormEps),
      pwconv1(prefix + ".pwconv1", channels, 4 * channels, rng),
      pwconv2(prefix + ".pwconv2", 4 * channels, channels, rng),
      gamma(prefix + ".gamma", {channels}),
      channels_(channels) {
  nn::init_constant(gamma, static_cast<T>(kLayerScaleInit));
}

template <typename T>
void ConvNeXtBlock<T>::collect(nn::ParamRefs<T>& out) {
  dwconv.collect(out);
  norm.collect(out);
  pwconv1.collect(out);
  pwconv2.collect(out);
  out.push_back(&gamma);
}

template <typename T>
FeatureMap<T> ConvNeXtBlock<T>::forward(const FeatureMap<T>& x, const nn::Context& ctx) {
  if (x.channels != channels_) {
    throw ShapeError("convnext block: expected " + std::to_string(channels_) +
                     " channels, got " + std::to_string(x.channels));
  }
  const std::size_t rows = x.positions();
  const FeatureMap<T> z = dwconv.forward(x, ctx);
  std::vector<T> h = norm.forward(z.values, rows, ctx);
  h = pwconv1.forward(h, rows, ctx);
  h = act.forward(h, ctx);
  h = pwconv2.forward(h, rows, ctx);

  FeatureMap<T> y = x;
  const std::size_t C = channels_;
  const T* g = gamma.value.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* yr = &y.values[r * C];
    const T* hr = &h[r * C];
    for (std::size_t c = 0; c < C; ++c) yr[c] += g[c] * hr[c];
  }
  if (ctx.record) branch_ = std::move(h);
  return y;
}

template <typename T>
FeatureMap<T> ConvNeXtBlock<T>::backward(const FeatureMap<T>& dy) {
  const std::size_t C = channels_;
  const std::size_t rows = dy.positions();
  if (branch_.size() != rows * C) {
    throw ShapeError("convnext block: backward without recorded forward");
  }
  std::vector<T> dh(rows * C);
  const T* g = gamma.value.data();
  T* dg = gamma.grad.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* dyr = &dy.values[r * C];
    const T* hr = &branch_[r * C];
    T* dhr = &dh[r * C];
    for (std::size_t c = 0; c < C; ++c) {
      dg[c] += dyr[c] * hr[c];
      dhr[c] = dyr[c] * g[c];
    }
  }
  dh = pwconv2.backward(dh);
  dh = act.backward(dh);
  dh = pwconv1.backward(dh);
  dh = norm.backward(dh);
  FeatureMap<T> dz;
  dz.batch = dy.batch;
  dz.channels = C;
  dz.height = dy.height;
  dz.width = dy.width;
  dz.values = std::move(dh);
  FeatureMap<T> dx = dwconv.backward(dz);
  for (std::size_t i = 0; i < dx.values.size(); ++i) dx.values[i] += dy.values[i];
  return dx;
}

// -------------------------------------------------------------- encoder

template <typename T>
Encoder<T>::Encoder(const std::string& prefix, const EncoderVariant& variant,
                    std::uint64_t seed)
    : variant_(variant) {
  Rng rng(seed);
  std::size_t in = 3;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t C = variant.channels[s];
    const std::string sp = prefix + ".stages." + std::to_string(s);
    if (variant.depths[s] < 1) throw ConfigError("stage depth must be >= 1");
    if (s > 0 && C <= in) throw ConfigError("stage widths must be strictly increasing");
    Stage stage;
    if (s == 0) {
      stage.conv = std::make_unique<nn::PatchConv2d<T>>(sp + ".stem", in, C, 4, rng);
      stage.post_norm = std::make_unique<nn::LayerNorm<T>>(sp + ".stem_norm", C, kLayerNormEps);
    } else {
      stage.pre_norm = std::make_unique<nn::LayerNorm<T>>(sp + ".down_norm", in, kLayerNormEps);
      stage.conv = std::make_unique<nn::PatchConv2d<T>>(sp + ".down", in, C, 2, rng);
    }
    for (std::size_t b = 0; b < variant.depths[s]; ++b) {
      stage.blocks.emplace_back(sp + ".blocks." + std::to_string(b), C, rng);
    }
    stages_.push_back(std::move(stage));
    in = C;
  }
}

template <typename T>
nn::ParamRefs<T> Encoder<T>::parameters() {
  nn::ParamRefs<T> out;
  for (auto& stage : stages_) {
    if (stage.pre_norm) stage.pre_norm->collect(out);
    stage.conv->collect(out);
    if (stage.post_norm) stage.post_norm->collect(out);
    for (auto& block : stage.blocks) block.collect(out);
  }
  return out;
}

template <typename T>
FeatureMap<T> Encoder<T>::forward(const FeatureMap<T>& x, const nn::Context& ctx) {
  if (x.channels != 3) throw ShapeError("encoder expects 3-channel input");
  if (x.height % kEncoderStride != 0 || x.width % kEncoderStride != 0 || x.height == 0 ||
      x.width == 0) {
    throw ShapeError("encoder input " + std::to_string(x.height) + "x" +
                     std::to_string(x.width) + " is not divisible by 32");
  }
  FeatureMap<T> h = x;
  for (auto& stage : stages_) {
    if (stage.pre_norm) h = apply_norm(*stage.pre_norm, h, ctx);
    h = stage.conv->forward(h, ctx);
    if (stage.post_norm) h = apply_norm(*stage.post_norm, h, ctx);
    for (auto& block : stage.blocks) h = block.forward(h, ctx);
  }
  return h;
}

template <typename T>
FeatureMap<T> Encoder<T>::backward(const FeatureMap<T>& dy) {
  FeatureMap<T> g = dy;
  for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) {
    auto& stage = *it;
    for (auto b = stage.blocks.rbegin(); b != stage.blocks.rend(); ++b) g = b->backward(g);
    if (stage.post_norm) g = apply_norm_backward(*stage.post_norm, g);
    g = stage.conv->backward(g);
    if (stage.pre_norm) g = apply_norm_backward(*stage.pre_norm, g);
  }
  return g;
}

template class ConvNeXtBlock<float>;
template class ConvNeXtBlock<double>;
template class Encoder<float>;
template class Encoder<double>;
template FeatureMap<float> apply_norm(nn::LayerNorm<float>&, const FeatureMap<float>&,
                                      const nn::Context&);
template FeatureMap<double> apply_norm(nn::LayerNorm<double>&, const FeatureMap<double>&,
                                       const nn::Context&);
template FeatureMap<float> apply_norm_backward(nn::LayerNorm<float>&, const FeatureMap<float>&);
template FeatureMap<double> apply_norm_backward(nn::LayerNorm<double>&,
                                                const FeatureMap<double>&);

}  // namespace strokenext
