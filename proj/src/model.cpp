#include "strokenext/model.hpp"

#include <sstream>

#include "strokenext/errors.hpp"
#include "strokenext/rng.hpp"

namespace strokenext {

void ModelConfig::validate() const {
  fusion.validate();
  if (fusion.channels != variant.embedding_width()) {
    throw ConfigError("fusion channels (" + std::to_string(fusion.channels) +
                      ") must equal the encoder stage-4 width (" +
                      std::to_string(variant.embedding_width()) + ")");
  }
}

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os << "strokenext/v1;variant=" << to_string(variant.name) << ";channels=";
  for (auto c : variant.channels) os << c << ',';
  os << ";depths=";
  for (auto d : variant.depths) os << d << ',';
  os << ";fusion=" << to_string(fusion.mode) << ";C=" << fusion.channels
     << ";H=" << fusion.hidden_width << ";K=" << fusion.num_classes
     << ";dropout=" << fusion.dropout_rate << ";task=" << data::to_string(task);
  return os.str();
}

std::uint64_t ModelConfig::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

ModelConfig make_model_config(VariantName variant, FusionMode mode, std::size_t hidden_width,
                              double dropout, std::size_t num_classes, data::Task task,
                              std::uint64_t seed) {
  ModelConfig cfg;
  cfg.variant = make_variant(variant);
  cfg.fusion.channels = cfg.variant.embedding_width();
  cfg.fusion.hidden_width = hidden_width == 0 ? cfg.fusion.channels : hidden_width;
  cfg.fusion.dropout_rate = dropout;
  cfg.fusion.num_classes = num_classes;
  cfg.fusion.mode = mode;
  cfg.task = task;
  cfg.branch1_seed = derive_seed(seed, 1);
  cfg.branch2_seed = derive_seed(seed, 2);
  cfg.decoder_seed = derive_seed(seed, 3);
  cfg.validate();
  return cfg;
}

template <typename T>
StrokeNeXt<T>::StrokeNeXt(const ModelConfig& cfg)
    : encoder1("encoder1", (cfg.validate(), cfg.variant), cfg.branch1_seed),
      encoder2("encoder2", cfg.variant, cfg.branch2_seed),
      decoder("decoder", cfg.fusion, cfg.decoder_seed),
      cfg_(cfg) {}

template <typename T>
Embedding<T> StrokeNeXt<T>::forward(const FeatureMap<T>& x, const nn::Context& ctx) {
  const FeatureMap<T> h1 = encoder1.forward(x, ctx);
  const FeatureMap<T> h2 = encoder2.forward(x, ctx);
  if (ctx.record) {
    feat_h_ = h1.height;
    feat_w_ = h1.width;
  }
  return decoder.forward(nn::global_pool(h1), nn::global_pool(h2), ctx);
}

template <typename T>
void StrokeNeXt<T>::backward(const Embedding<T>& dlogits) {
  auto [d1, d2] = decoder.backward(dlogits);
  encoder1.backward(nn::global_pool_backward(d1, feat_h_, feat_w_));
  encoder2.backward(nn::global_pool_backward(d2, feat_h_, feat_w_));
}

template <typename T>
nn::ParamRefs<T> StrokeNeXt<T>::parameters() {
  nn::ParamRefs<T> out = encoder1.parameters();
  for (auto* p : encoder2.parameters()) out.push_back(p);
  for (auto* p : decoder.parameters()) out.push_back(p);
  return out;
}

template <typename T>
nn::BufferRefs<T> StrokeNeXt<T>::buffers() {
  return decoder.buffers();
}

template <typename T>
void StrokeNeXt<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template class StrokeNeXt<float>;
template class StrokeNeXt<double>;

}  // namespace strokenext
