#pragma once

// Layer primitives with explicit forward/backward passes. Activations are
// row-major [rows, channels] buffers (a channels-last feature map is simply
// rows = batch*height*width). Every layer accumulates parameter gradients
// into Param::grad on backward; callers zero them between steps.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "strokenext/rng.hpp"
#include "strokenext/tensor.hpp"

namespace strokenext::nn {

template <typename T>
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::vector<T> grad;

  Param() = default;
  Param(std::string n, std::vector<std::size_t> s);

  std::size_t size() const { return value.size(); }
  void zero_grad();
};

// Non-trainable state that still belongs to a checkpoint (running statistics).
template <typename T>
struct Buffer {
  std::string name;
  std::vector<T> value;
};

template <typename T>
using ParamRefs = std::vector<Param<T>*>;
template <typename T>
using BufferRefs = std::vector<Buffer<T>*>;

struct Context {
  bool training = false;   // batch statistics, dropout active
  bool record = false;     // keep activations for a following backward()
  Rng* rng = nullptr;      // dropout masks; required when training
};

// Weight initializers shared by every module.
template <typename T>
void init_trunc_normal(Param<T>& p, Rng& rng, double stddev = 0.02);
template <typename T>
void init_constant(Param<T>& p, T value);

// y = x W^T + b, W stored [out, in].
template <typename T>
class Linear {
 public:
  Linear(const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
         bool bias = true);

  std::vector<T> forward(std::span<const T> x, std::size_t rows, const Context& ctx);
  std::vector<T> backward(std::span<const T> dy);
  // Forward without touching recorded state.
  std::vector<T> apply(std::span<const T> x, std::size_t rows) const;

  Param<T> weight;
  Param<T> bias;  // empty when constructed without bias
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

  void collect(ParamRefs<T>& out);

 private:
  std::size_t in_, out_;
  std::size_t rows_ = 0;
  std::vector<T> input_;
};

// Normalization over the channel axis of each row.
template <typename T>
class LayerNorm {
 public:
  LayerNorm(const std::string& prefix, std::size_t channels, double eps = 1e-6);

  std::vector<T> forward(std::span<const T> x, std::size_t rows, const Context& ctx);
  std::vector<T> backward(std::span<const T> dy);

  Param<T> weight;
  Param<T> bias;
  void collect(ParamRefs<T>& out);

 private:
  std::size_t channels_;
  double eps_;
  std::size_t rows_ = 0;
  std::vector<T> xhat_;
  std::vector<T> rstd_;
};

// Exact (erf) GELU.
template <typename T>
T gelu(T x);
template <typename T>
T gelu_grad(T x);

template <typename T>
class Gelu {
 public:
  std::vector<T> forward(std::span<const T> x, const Context& ctx);
  std::vector<T> backward(std::span<const T> dy);

 private:
  std::vector<T> input_;
};

// Per-channel k x k convolution on channels-last maps, stride 1, zero padding.
// Weight is stored [k, k, channels].
template <typename T>
class DepthwiseConv2d {
 public:
  DepthwiseConv2d(const std::string& prefix, std::size_t channels, std::size_t kernel,
                  std::size_t padding, Rng& rng);

  FeatureMap<T> forward(const FeatureMap<T>& x, const Context& ctx);
  FeatureMap<T> backward(const FeatureMap<T>& dy);

  Param<T> weight;
  Param<T> bias;
  void collect(ParamRefs<T>& out);

 private:
  std::size_t channels_, kernel_, padding_;
  FeatureMap<T> input_;
};

// Non-overlapping convolution with kernel == stride == patch (stem and
// downsampling layers). Weight stored [out, patch, patch, in].
template <typename T>
class PatchConv2d {
 public:
  PatchConv2d(const std::string& prefix, std::size_t in, std::size_t out, std::size_t patch,
              Rng& rng);

  FeatureMap<T> forward(const FeatureMap<T>& x, const Context& ctx);
  FeatureMap<T> backward(const FeatureMap<T>& dy);

  void collect(ParamRefs<T>& out) { proj_.collect(out); }
  Linear<T>& projection() { return proj_; }

 private:
  std::size_t in_, out_, patch_;
  std::size_t in_h_ = 0, in_w_ = 0, batch_ = 0;
  Linear<T> proj_;
};

// Batch normalization over [batch, channels]. In identity mode the layer is
// bypassed entirely (used by configured-weight tests).
template <typename T>
class BatchNorm1d {
 public:
  BatchNorm1d(const std::string& prefix, std::size_t channels, double eps = 1e-5,
              double momentum = 0.1);

  std::vector<T> forward(std::span<const T> x, std::size_t rows, const Context& ctx);
  std::vector<T> backward(std::span<const T> dy);

  Param<T> weight;
  Param<T> bias;
  Buffer<T> running_mean;
  Buffer<T> running_var;
  bool identity = false;

  void collect(ParamRefs<T>& out);
  void collect_buffers(BufferRefs<T>& out);

 private:
  std::size_t channels_;
  double eps_, momentum_;
  std::size_t rows_ = 0;
  bool batch_stats_ = false;
  std::vector<T> xhat_;
  std::vector<T> rstd_;  // per channel
};

// Inverted dropout: kept activations are scaled by 1/(1-rate) during training.
template <typename T>
class Dropout {
 public:
  explicit Dropout(double rate) : rate_(rate) {}
  std::vector<T> forward(std::span<const T> x, const Context& ctx);
  std::vector<T> backward(std::span<const T> dy);
  double rate() const { return rate_; }

 private:
  double rate_;
  std::vector<T> mask_;  // empty when the last forward was the identity
};

// Spatial mean per channel: [B,C,H,W] -> [B,C].
template <typename T>
Embedding<T> global_pool(const FeatureMap<T>& f);
template <typename T>
FeatureMap<T> global_pool_backward(const Embedding<T>& dy, std::size_t height,
                                   std::size_t width);

}  // namespace strokenext::nn
