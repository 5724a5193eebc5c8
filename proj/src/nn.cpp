#include "strokenext/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace strokenext::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

namespace {

// Eigen picks its vectorized reduction order from the buffer address, so
// products run on owned (aligned) copies to keep results bitwise reproducible.
template <typename T>
RowMat<T> owned(const T* data, std::size_t rows, std::size_t cols) {
  return Eigen::Map<const RowMat<T>>(data, rows, cols);
}

template <typename T>
void store(const RowMat<T>& m, std::vector<T>& out) {
  out.assign(m.data(), m.data() + m.size());
}

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string join(const std::string& prefix, const char* name) {
  return prefix.empty() ? std::string(name) : prefix + "." + name;
}

}  // namespace

template <typename T>
Param<T>::Param(std::string n, std::vector<std::size_t> s)
    : name(std::move(n)), shape(std::move(s)), value(product(shape), T(0)),
      grad(value.size(), T(0)) {}

template <typename T>
void Param<T>::zero_grad() {
  std::fill(grad.begin(), grad.end(), T(0));
}

template <typename T>
void init_trunc_normal(Param<T>& p, Rng& rng, double stddev) {
  for (auto& v : p.value) v = static_cast<T>(rng.truncated_normal(stddev));
}

template <typename T>
void init_constant(Param<T>& p, T value) {
  std::fill(p.value.begin(), p.value.end(), value);
}

// ---------------------------------------------------------------- Linear

template <typename T>
Linear<T>::Linear(const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                  bool with_bias)
    : weight(join(prefix, "weight"), {out, in}), in_(in), out_(out) {
  init_trunc_normal(weight, rng);
  if (with_bias) bias = Param<T>(join(prefix, "bias"), {out});
}

template <typename T>
void Linear<T>::collect(ParamRefs<T>& out) {
  out.push_back(&weight);
  if (bias.size()) out.push_back(&bias);
}

template <typename T>
std::vector<T> Linear<T>::forward(std::span<const T> x, std::size_t rows, const Context& ctx) {
  std::vector<T> y = apply(x, rows);
  if (ctx.record) {
    rows_ = rows;
    input_.assign(x.begin(), x.end());
  }
  return y;
}

template <typename T>
std::vector<T> Linear<T>::apply(std::span<const T> x, std::size_t rows) const {
  if (x.size() != rows * in_) {
    throw ShapeError("linear: expected " + std::to_string(rows * in_) + " inputs, got " +
                     std::to_string(x.size()));
  }
  const RowMat<T> X = owned(x.data(), rows, in_);
  const RowMat<T> W = owned(weight.value.data(), out_, in_);
  RowMat<T> Y(rows, out_);
  Y.noalias() = X * W.transpose();
  std::vector<T> y;
  store(Y, y);
  if (bias.size()) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t o = 0; o < out_; ++o) y[r * out_ + o] += bias.value[o];
    }
  }
  return y;
}

template <typename T>
std::vector<T> Linear<T>::backward(std::span<const T> dy) {
  if (dy.size() != rows_ * out_ || input_.size() != rows_ * in_) {
    throw ShapeError("linear: backward without matching recorded forward");
  }
  const RowMat<T> dY = owned(dy.data(), rows_, out_);
  const RowMat<T> X = owned(input_.data(), rows_, in_);
  const RowMat<T> W = owned(weight.value.data(), out_, in_);
  RowMat<T> dW(out_, in_);
  dW.noalias() = dY.transpose() * X;
  for (std::size_t i = 0; i < weight.grad.size(); ++i) weight.grad[i] += dW.data()[i];
  if (bias.size()) {
    for (std::size_t r = 0; r < rows_; ++r) {
      for (std::size_t o = 0; o < out_; ++o) bias.grad[o] += dy[r * out_ + o];
    }
  }
  RowMat<T> dX(rows_, in_);
  dX.noalias() = dY * W;
  std::vector<T> dx;
  store(dX, dx);
  return dx;
}

// ------------------------------------------------------------- LayerNorm

template <typename T>
LayerNorm<T>::LayerNorm(const std::string& prefix, std::size_t channels, double eps)
    : weight(join(prefix, "weight"), {channels}), bias(join(prefix, "bias"), {channels}),
      channels_(channels), eps_(eps) {
  init_constant(weight, T(1));
}

template <typename T>
void LayerNorm<T>::collect(ParamRefs<T>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

template <typename T>
std::vector<T> LayerNorm<T>::forward(std::span<const T> x, std::size_t rows,
                                     const Context& ctx) {
  const std::size_t C = channels_;
  if (x.size() != rows * C) throw ShapeError("layer norm: channel mismatch");
  std::vector<T> y(x.size());
  if (ctx.record) {
    xhat_.resize(x.size());
    rstd_.resize(rows);
    rows_ = rows;
  }
  const T* w = weight.value.data();
  const T* b = bias.value.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * C;
    T* yr = y.data() + r * C;
    T mean = 0;
    for (std::size_t c = 0; c < C; ++c) mean += xr[c];
    mean /= static_cast<T>(C);
    T var = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const T d = xr[c] - mean;
      var += d * d;
    }
    var /= static_cast<T>(C);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps_));
    if (ctx.record) {
      rstd_[r] = rstd;
      T* hr = xhat_.data() + r * C;
      for (std::size_t c = 0; c < C; ++c) {
        hr[c] = (xr[c] - mean) * rstd;
        yr[c] = hr[c] * w[c] + b[c];
      }
    } else {
      for (std::size_t c = 0; c < C; ++c) yr[c] = (xr[c] - mean) * rstd * w[c] + b[c];
    }
  }
  return y;
}

template <typename T>
std::vector<T> LayerNorm<T>::backward(std::span<const T> dy) {
  const std::size_t C = channels_;
  if (dy.size() != rows_ * C || xhat_.size() != dy.size()) {
    throw ShapeError("layer norm: backward without matching recorded forward");
  }
  std::vector<T> dx(dy.size());
  const T* w = weight.value.data();
  T* dw = weight.grad.data();
  T* db = bias.grad.data();
  std::vector<T> g(C);
  for (std::size_t r = 0; r < rows_; ++r) {
    const T* dyr = dy.data() + r * C;
    const T* hr = xhat_.data() + r * C;
    T mean_g = 0, mean_gh = 0;
    for (std::size_t c = 0; c < C; ++c) {
      dw[c] += dyr[c] * hr[c];
      db[c] += dyr[c];
      g[c] = dyr[c] * w[c];
      mean_g += g[c];
      mean_gh += g[c] * hr[c];
    }
    mean_g /= static_cast<T>(C);
    mean_gh /= static_cast<T>(C);
    T* dxr = dx.data() + r * C;
    for (std::size_t c = 0; c < C; ++c) {
      dxr[c] = rstd_[r] * (g[c] - mean_g - hr[c] * mean_gh);
    }
  }
  return dx;
}

// ------------------------------------------------------------------ GELU

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * static_cast<T>(0.5 * std::numbers::inv_sqrtpi *
                                                           std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T>
std::vector<T> Gelu<T>::forward(std::span<const T> x, const Context& ctx) {
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu(x[i]);
  if (ctx.record) input_.assign(x.begin(), x.end());
  return y;
}

template <typename T>
std::vector<T> Gelu<T>::backward(std::span<const T> dy) {
  if (dy.size() != input_.size()) throw ShapeError("gelu: backward without recorded forward");
  std::vector<T> dx(dy.size());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * gelu_grad(input_[i]);
  return dx;
}

// ------------------------------------------------------- DepthwiseConv2d

template <typename T>
DepthwiseConv2d<T>::DepthwiseConv2d(const std::string& prefix, std::size_t channels,
                                    std::size_t kernel, std::size_t padding, Rng& rng)
    : weight(join(prefix, "weight"), {kernel, kernel, channels}),
      bias(join(prefix, "bias"), {channels}), channels_(channels), kernel_(kernel),
      padding_(padding) {
  init_trunc_normal(weight, rng);
}

template <typename T>
void DepthwiseConv2d<T>::collect(ParamRefs<T>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

template <typename T>
FeatureMap<T> DepthwiseConv2d<T>::forward(const FeatureMap<T>& x, const Context& ctx) {
  if (x.channels != channels_) {
    throw ShapeError("depthwise conv: expected " + std::to_string(channels_) +
                     " channels, got " + std::to_string(x.channels));
  }
  const std::size_t C = channels_, H = x.height, W = x.width, K = kernel_;
  const auto pad = static_cast<std::ptrdiff_t>(padding_);
  const std::size_t Ho = H + 2 * padding_ - K + 1;
  const std::size_t Wo = W + 2 * padding_ - K + 1;
  FeatureMap<T> y(x.batch, C, Ho, Wo);
  const T* w = weight.value.data();
  const T* b = bias.value.data();
  for (std::size_t n = 0; n < x.batch; ++n) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        T* out = &y.values[((n * Ho + oy) * Wo + ox) * C];
        std::copy(b, b + C, out);
        for (std::size_t ky = 0; ky < K; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < K; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            const T* in = &x.values[((n * H + static_cast<std::size_t>(iy)) * W +
                                     static_cast<std::size_t>(ix)) * C];
            const T* wk = w + (ky * K + kx) * C;
            for (std::size_t c = 0; c < C; ++c) out[c] += in[c] * wk[c];
          }
        }
      }
    }
  }
  if (ctx.record) input_ = x;
  return y;
}

template <typename T>
FeatureMap<T> DepthwiseConv2d<T>::backward(const FeatureMap<T>& dy) {
  const FeatureMap<T>& x = input_;
  const std::size_t C = channels_, H = x.height, W = x.width, K = kernel_;
  const std::size_t Ho = dy.height, Wo = dy.width;
  if (dy.batch != x.batch || dy.channels != C || x.values.empty()) {
    throw ShapeError("depthwise conv: backward without matching recorded forward");
  }
  const auto pad = static_cast<std::ptrdiff_t>(padding_);
  FeatureMap<T> dx(x.batch, C, H, W);
  const T* w = weight.value.data();
  T* dw = weight.grad.data();
  T* db = bias.grad.data();
  for (std::size_t n = 0; n < x.batch; ++n) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const T* g = &dy.values[((n * Ho + oy) * Wo + ox) * C];
        for (std::size_t c = 0; c < C; ++c) db[c] += g[c];
        for (std::size_t ky = 0; ky < K; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < K; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            const std::size_t off = ((n * H + static_cast<std::size_t>(iy)) * W +
                                     static_cast<std::size_t>(ix)) * C;
            const T* in = &x.values[off];
            T* din = &dx.values[off];
            const T* wk = w + (ky * K + kx) * C;
            T* dwk = dw + (ky * K + kx) * C;
            for (std::size_t c = 0; c < C; ++c) {
              dwk[c] += in[c] * g[c];
              din[c] += wk[c] * g[c];
            }
          }
        }
      }
    }
  }
  return dx;
}

// ----------------------------------------------------------- PatchConv2d

template <typename T>
PatchConv2d<T>::PatchConv2d(const std::string& prefix, std::size_t in, std::size_t out,
                            std::size_t patch, Rng& rng)
    : in_(in), out_(out), patch_(patch), proj_(prefix, patch * patch * in, out, rng) {
  proj_.weight.shape = {out, patch, patch, in};
}

template <typename T>
FeatureMap<T> PatchConv2d<T>::forward(const FeatureMap<T>& x, const Context& ctx) {
  if (x.channels != in_) {
    throw ShapeError("patch conv: expected " + std::to_string(in_) + " channels, got " +
                     std::to_string(x.channels));
  }
  if (x.height % patch_ != 0 || x.width % patch_ != 0) {
    throw ShapeError("patch conv: spatial dims " + std::to_string(x.height) + "x" +
                     std::to_string(x.width) + " not divisible by " + std::to_string(patch_));
  }
  const std::size_t P = patch_, Ho = x.height / P, Wo = x.width / P;
  const std::size_t rows = x.batch * Ho * Wo, row_len = P * P * in_;
  std::vector<T> patches(rows * row_len);
  for (std::size_t n = 0; n < x.batch; ++n) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        T* dst = &patches[((n * Ho + oy) * Wo + ox) * row_len];
        for (std::size_t ky = 0; ky < P; ++ky) {
          const T* src = &x.values[((n * x.height + oy * P + ky) * x.width + ox * P) * in_];
          std::copy(src, src + P * in_, dst + ky * P * in_);
        }
      }
    }
  }
  if (ctx.record) {
    batch_ = x.batch;
    in_h_ = x.height;
    in_w_ = x.width;
  }
  FeatureMap<T> y;
  y.batch = x.batch;
  y.channels = out_;
  y.height = Ho;
  y.width = Wo;
  y.values = proj_.forward(patches, rows, ctx);
  return y;
}

template <typename T>
FeatureMap<T> PatchConv2d<T>::backward(const FeatureMap<T>& dy) {
  const std::size_t P = patch_, Ho = dy.height, Wo = dy.width, row_len = P * P * in_;
  const std::vector<T> dpatches = proj_.backward(dy.values);
  FeatureMap<T> dx(batch_, in_, in_h_, in_w_);
  for (std::size_t n = 0; n < batch_; ++n) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const T* src = &dpatches[((n * Ho + oy) * Wo + ox) * row_len];
        for (std::size_t ky = 0; ky < P; ++ky) {
          T* dst = &dx.values[((n * in_h_ + oy * P + ky) * in_w_ + ox * P) * in_];
          std::copy(src + ky * P * in_, src + (ky + 1) * P * in_, dst);
        }
      }
    }
  }
  return dx;
}

// ----------------------------------------------------------- BatchNorm1d

template <typename T>
BatchNorm1d<T>::BatchNorm1d(const std::string& prefix, std::size_t channels, double eps,
                            double momentum)
    : weight(join(prefix, "weight"), {channels}), bias(join(prefix, "bias"), {channels}),
      running_mean{join(prefix, "running_mean"), std::vector<T>(channels, T(0))},
      running_var{join(prefix, "running_var"), std::vector<T>(channels, T(1))},
      channels_(channels), eps_(eps), momentum_(momentum) {
  init_constant(weight, T(1));
}

template <typename T>
void BatchNorm1d<T>::collect(ParamRefs<T>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

template <typename T>
void BatchNorm1d<T>::collect_buffers(BufferRefs<T>& out) {
  out.push_back(&running_mean);
  out.push_back(&running_var);
}

template <typename T>
std::vector<T> BatchNorm1d<T>::forward(std::span<const T> x, std::size_t rows,
                                       const Context& ctx) {
  const std::size_t C = channels_;
  if (x.size() != rows * C) throw ShapeError("batch norm: channel mismatch");
  if (ctx.record) rows_ = rows;
  if (identity) return {x.begin(), x.end()};

  std::vector<T> mean(C, T(0)), rstd(C);
  if (ctx.training) {
    std::vector<T> var(C, T(0));
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < C; ++c) mean[c] += x[r * C + c];
    }
    for (auto& m : mean) m /= static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < C; ++c) {
        const T d = x[r * C + c] - mean[c];
        var[c] += d * d;
      }
    }
    const auto mom = static_cast<T>(momentum_);
    for (std::size_t c = 0; c < C; ++c) {
      const T biased = var[c] / static_cast<T>(rows);
      rstd[c] = T(1) / std::sqrt(biased + static_cast<T>(eps_));
      const T unbiased = rows > 1 ? var[c] / static_cast<T>(rows - 1) : biased;
      running_mean.value[c] = (T(1) - mom) * running_mean.value[c] + mom * mean[c];
      running_var.value[c] = (T(1) - mom) * running_var.value[c] + mom * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running_mean.value[c];
      rstd[c] = T(1) / std::sqrt(running_var.value[c] + static_cast<T>(eps_));
    }
  }
  if (ctx.record) batch_stats_ = ctx.training;

  std::vector<T> y(x.size());
  if (ctx.record) xhat_.resize(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      const T h = (x[r * C + c] - mean[c]) * rstd[c];
      if (ctx.record) xhat_[r * C + c] = h;
      y[r * C + c] = h * weight.value[c] + bias.value[c];
    }
  }
  if (ctx.record) rstd_ = std::move(rstd);
  return y;
}

template <typename T>
std::vector<T> BatchNorm1d<T>::backward(std::span<const T> dy) {
  const std::size_t C = channels_;
  if (dy.size() != rows_ * C) throw ShapeError("batch norm: backward shape mismatch");
  if (identity) return {dy.begin(), dy.end()};
  if (xhat_.size() != dy.size()) throw ShapeError("batch norm: backward without recorded forward");
  std::vector<T> dx(dy.size());
  std::vector<T> sum_g(C, T(0)), sum_gh(C, T(0));
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      const T g = dy[r * C + c];
      const T h = xhat_[r * C + c];
      weight.grad[c] += g * h;
      bias.grad[c] += g;
      sum_g[c] += g;
      sum_gh[c] += g * h;
    }
  }
  const auto n = static_cast<T>(rows_);
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      const T scale = weight.value[c] * rstd_[c];
      const T g = dy[r * C + c];
      if (batch_stats_) {
        const T h = xhat_[r * C + c];
        dx[r * C + c] = scale * (g - sum_g[c] / n - h * sum_gh[c] / n);
      } else {
        dx[r * C + c] = scale * g;
      }
    }
  }
  return dx;
}

// --------------------------------------------------------------- Dropout

template <typename T>
std::vector<T> Dropout<T>::forward(std::span<const T> x, const Context& ctx) {
  if (!ctx.training || rate_ <= 0.0) {
    if (ctx.record) mask_.clear();
    return {x.begin(), x.end()};
  }
  if (!ctx.rng) throw ConfigError("dropout in training mode requires an rng");
  const auto keep_scale = static_cast<T>(1.0 / (1.0 - rate_));
  mask_.resize(x.size());
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask_[i] = ctx.rng->bernoulli(rate_) ? T(0) : keep_scale;
    y[i] = x[i] * mask_[i];
  }
  return y;
}

template <typename T>
std::vector<T> Dropout<T>::backward(std::span<const T> dy) {
  if (mask_.empty()) return {dy.begin(), dy.end()};
  std::vector<T> dx(dy.size());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * mask_[i];
  return dx;
}

// ------------------------------------------------------------------ pool

template <typename T>
Embedding<T> global_pool(const FeatureMap<T>& f) {
  Embedding<T> e(f.batch, f.channels);
  const std::size_t hw = f.height * f.width;
  for (std::size_t n = 0; n < f.batch; ++n) {
    T* out = &e.values[n * f.channels];
    for (std::size_t p = 0; p < hw; ++p) {
      const T* in = &f.values[(n * hw + p) * f.channels];
      for (std::size_t c = 0; c < f.channels; ++c) out[c] += in[c];
    }
    for (std::size_t c = 0; c < f.channels; ++c) out[c] /= static_cast<T>(hw);
  }
  return e;
}

template <typename T>
FeatureMap<T> global_pool_backward(const Embedding<T>& dy, std::size_t height,
                                   std::size_t width) {
  FeatureMap<T> dx(dy.batch, dy.channels, height, width);
  const std::size_t hw = height * width;
  const T inv = T(1) / static_cast<T>(hw);
  for (std::size_t n = 0; n < dy.batch; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      T* out = &dx.values[(n * hw + p) * dy.channels];
      for (std::size_t c = 0; c < dy.channels; ++c) out[c] = dy.values[n * dy.channels + c] * inv;
    }
  }
  return dx;
}

#define STROKENEXT_INSTANTIATE(T)                                                  \
  template struct Param<T>;                                                        \
  template void init_trunc_normal<T>(Param<T>&, Rng&, double);                     \
  template void init_constant<T>(Param<T>&, T);                                    \
  template class Linear<T>;                                                        \
  template class LayerNorm<T>;                                                     \
  template T gelu<T>(T);                                                           \
  template T gelu_grad<T>(T);                                                      \
  template class Gelu<T>;                                                          \
  template class DepthwiseConv2d<T>;                                               \
  template class PatchConv2d<T>;                                                   \
  template class BatchNorm1d<T>;                                                   \
  template class Dropout<T>;                                                       \
  template Embedding<T> global_pool<T>(const FeatureMap<T>&);                      \
  template FeatureMap<T> global_pool_backward<T>(const Embedding<T>&, std::size_t, \
                                                 std::size_t);

STROKENEXT_INSTANTIATE(float)
STROKENEXT_INSTANTIATE(double)

}  // namespace strokenext::nn
