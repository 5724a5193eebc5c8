#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>

#include "strokenext/nn.hpp"
#include "strokenext/tensor.hpp"

namespace strokenext {

enum class FusionMode { k2conv, sum, concat_mlp, attention2 };

std::string_view to_string(FusionMode mode);
FusionMode parse_fusion_mode(std::string_view text);  // throws ConfigError

struct FusionConfig {
  std::size_t channels = 768;
  std::size_t hidden_width = 768;
  double dropout_rate = 0.2;
  std::size_t num_classes = 2;
  FusionMode mode = FusionMode::k2conv;

  void validate() const;  // throws ConfigError
  bool operator==(const FusionConfig&) const = default;
};

// Branch embeddings stacked on a trailing length-2 axis, [B, C, 2]; position 0
// is branch 1. Contiguous storage equals the interleaved vector
// (f1[0], f2[0], f1[1], f2[1], ...) per sample.
template <typename T>
struct StackedPair {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::vector<T> values;

  T at(std::size_t b, std::size_t c, std::size_t t) const {
    return values[(b * channels + c) * 2 + t];
  }
};

template <typename T>
StackedPair<T> stack_pair(const Embedding<T>& f1, const Embedding<T>& f2);
template <typename T>
std::pair<Embedding<T>, Embedding<T>> unstack_pair(const StackedPair<T>& s);

// Kernel-2 Conv1d over the stacked axis (full C->C channel mixing), then
// batch norm and GELU. The convolution weight is [C_out, C_in, 2].
template <typename T>
class MergeConv {
 public:
  MergeConv(const std::string& prefix, std::size_t channels, Rng& rng);

  Embedding<T> forward(const StackedPair<T>& s, const nn::Context& ctx);
  StackedPair<T> backward(const Embedding<T>& dy);
  // Convolution output before normalization and activation.
  Embedding<T> pre_activation(const StackedPair<T>& s);

  nn::Linear<T> conv;
  nn::BatchNorm1d<T> norm;
  nn::Gelu<T> act;
  void collect(nn::ParamRefs<T>& out);
  void collect_buffers(nn::BufferRefs<T>& out) { norm.collect_buffers(out); }

 private:
  std::size_t channels_;
};

// Pointwise C->H -> norm -> GELU -> dropout -> pointwise H->C -> norm -> GELU.
template <typename T>
class Bottleneck {
 public:
  Bottleneck(const std::string& prefix, std::size_t channels, std::size_t hidden,
             double dropout, Rng& rng);

  Embedding<T> forward(const Embedding<T>& e, const nn::Context& ctx);
  Embedding<T> backward(const Embedding<T>& dy);

  nn::Linear<T> pw1;
  nn::BatchNorm1d<T> norm1;
  nn::Gelu<T> act1;
  nn::Dropout<T> drop;
  nn::Linear<T> pw2;
  nn::BatchNorm1d<T> norm2;
  nn::Gelu<T> act2;
  void collect(nn::ParamRefs<T>& out);
  void collect_buffers(nn::BufferRefs<T>& out);
};

// Dense 2C->H -> GELU -> dense H->C on the concatenation [f1; f2].
template <typename T>
class ConcatMlp {
 public:
  ConcatMlp(const std::string& prefix, std::size_t channels, std::size_t hidden, Rng& rng);
  Embedding<T> forward(const Embedding<T>& f1, const Embedding<T>& f2, const nn::Context& ctx);
  std::pair<Embedding<T>, Embedding<T>> backward(const Embedding<T>& dy);

  nn::Linear<T> fc1;
  nn::Gelu<T> act;
  nn::Linear<T> fc2;
  void collect(nn::ParamRefs<T>& out);

 private:
  std::size_t channels_;
};

// Self-attention across the two branch tokens (Q/K/V projections, 2x2
// softmax mixing) followed by the mean over tokens.
template <typename T>
class PairAttention {
 public:
  PairAttention(const std::string& prefix, std::size_t channels, Rng& rng);
  Embedding<T> forward(const Embedding<T>& f1, const Embedding<T>& f2, const nn::Context& ctx);
  std::pair<Embedding<T>, Embedding<T>> backward(const Embedding<T>& dy);

  nn::Linear<T> query;
  nn::Linear<T> key;
  nn::Linear<T> value;
  void collect(nn::ParamRefs<T>& out);

 private:
  std::size_t channels_;
  std::size_t batch_ = 0;
  std::vector<T> q_, k_, v_;
  std::vector<T> attn_;  // [B, 2, 2]
};

// Parameter-free element-wise sum.
template <typename T>
Embedding<T> fuse_sum(const Embedding<T>& f1, const Embedding<T>& f2);

// The fusion decoder: merge (or an alternative strategy selected by
// FusionConfig::mode), bottleneck, and the affine classification head.
// Alternative strategies replace only the merge step.
template <typename T>
class FusionDecoder {
  FusionConfig cfg_;
  Rng init_rng_;

 public:
  FusionDecoder(const std::string& prefix, const FusionConfig& cfg, std::uint64_t seed);

  // Fused [B, C] vector produced by the configured strategy.
  Embedding<T> fuse(const Embedding<T>& f1, const Embedding<T>& f2, const nn::Context& ctx);
  std::pair<Embedding<T>, Embedding<T>> fuse_backward(const Embedding<T>& dy);

  // logits [B, K]
  Embedding<T> forward(const Embedding<T>& f1, const Embedding<T>& f2, const nn::Context& ctx);
  std::pair<Embedding<T>, Embedding<T>> backward(const Embedding<T>& dlogits);

  Embedding<T> classify(const Embedding<T>& e, const nn::Context& ctx);

  const FusionConfig& config() const { return cfg_; }
  nn::ParamRefs<T> parameters();
  nn::BufferRefs<T> buffers();

  std::optional<MergeConv<T>> merge;
  std::optional<ConcatMlp<T>> concat_mlp;
  std::optional<PairAttention<T>> attention;
  Bottleneck<T> bottleneck;
  nn::Linear<T> head;
};

}  // namespace strokenext
