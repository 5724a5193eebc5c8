#include "strokenext/fusion.hpp"

#include <cmath>

#include "strokenext/errors.hpp"

namespace strokenext {

std::string_view to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::k2conv: return "k2conv";
    case FusionMode::sum: return "sum";
    case FusionMode::concat_mlp: return "concat_mlp";
    case FusionMode::attention2: return "attention2";
  }
  return "?";
}

FusionMode parse_fusion_mode(std::string_view text) {
  for (auto m : {FusionMode::k2conv, FusionMode::sum, FusionMode::concat_mlp,
                 FusionMode::attention2}) {
    if (to_string(m) == text) return m;
  }
  throw ConfigError("unknown fusion mode '" + std::string(text) +
                    "' (expected k2conv|sum|concat_mlp|attention2)");
}

void FusionConfig::validate() const {
  if (channels < 1) throw ConfigError("fusion channels must be >= 1");
  if (hidden_width < 1) throw ConfigError("hidden width must be >= 1");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1)");
  }
}

template <typename T>
StackedPair<T> stack_pair(const Embedding<T>& f1, const Embedding<T>& f2) {
  if (f1.batch != f2.batch || f1.channels != f2.channels) {
    throw ShapeError("stack_pair: branch embeddings differ in shape");
  }
  StackedPair<T> s{f1.batch, f1.channels, std::vector<T>(f1.values.size() * 2)};
  for (std::size_t i = 0; i < f1.values.size(); ++i) {
    s.values[2 * i] = f1.values[i];
    s.values[2 * i + 1] = f2.values[i];
  }
  return s;
}

template <typename T>
std::pair<Embedding<T>, Embedding<T>> unstack_pair(const StackedPair<T>& s) {
  Embedding<T> f1(s.batch, s.channels), f2(s.batch, s.channels);
  for (std::size_t i = 0; i < f1.values.size(); ++i) {
    f1.values[i] = s.values[2 * i];
    f2.values[i] = s.values[2 * i + 1];
  }
  return {std::move(f1), std::move(f2)};
}

namespace {

template <typename T>
Embedding<T> wrap(std::size_t batch, std::size_t channels, std::vector<T> values) {
  Embedding<T> e;
  e.batch = batch;
  e.channels = channels;
  e.values = std::move(values);
  return e;
}

}  // namespace

// ------------------------------------------------------------ MergeConv

template <typename T>
MergeConv<T>::MergeConv(const std::string& prefix, std::size_t channels, Rng& rng)
    : conv(prefix + ".conv", 2 * channels, channels, rng),
      norm(prefix + ".norm", channels),
      channels_(channels) {
  // Stored as [C_out, C_in * 2] which is the row-major [C_out, C_in, 2] tensor.
  conv.weight.shape = {channels, channels, 2};
}

template <typename T>
void MergeConv<T>::collect(nn::ParamRefs<T>& out) {
  conv.collect(out);
  norm.collect(out);
}

template <typename T>
Embedding<T> MergeConv<T>::pre_activation(const StackedPair<T>& s) {
  return wrap(s.batch, channels_, conv.apply(s.values, s.batch));
}

template <typename T>
Embedding<T> MergeConv<T>::forward(const StackedPair<T>& s, const nn::Context& ctx) {
  if (s.channels != channels_) throw ShapeError("merge: channel mismatch");
  std::vector<T> h = conv.forward(s.values, s.batch, ctx);
  h = norm.forward(h, s.batch, ctx);
  h = act.forward(h, ctx);
  return wrap(s.batch, channels_, std::move(h));
}

template <typename T>
StackedPair<T> MergeConv<T>::backward(const Embedding<T>& dy) {
  std::vector<T> g = act.backward(dy.values);
  g = norm.backward(g);
  g = conv.backward(g);
  return {dy.batch, channels_, std::move(g)};
}

// ----------------------------------------------------------- Bottleneck

template <typename T>
Bottleneck<T>::Bottleneck(const std::string& prefix, std::size_t channels, std::size_t hidden,
                          double dropout, Rng& rng)
    : pw1(prefix + ".pw1", channels, hidden, rng),
      norm1(prefix + ".norm1", hidden),
      drop(dropout),
      pw2(prefix + ".pw2", hidden, channels, rng),
      norm2(prefix + ".norm2", channels) {}

template <typename T>
void Bottleneck<T>::collect(nn::ParamRefs<T>& out) {
  pw1.collect(out);
  norm1.collect(out);
  pw2.collect(out);
  norm2.collect(out);
}

template <typename T>
void Bottleneck<T>::collect_buffers(nn::BufferRefs<T>& out) {
  norm1.collect_buffers(out);
  norm2.collect_buffers(out);
}

template <typename T>
Embedding<T> Bottleneck<T>::forward(const Embedding<T>& e, const nn::Context& ctx) {
  const std::size_t B = e.batch;
  std::vector<T> h = pw1.forward(e.values, B, ctx);
  h = norm1.forward(h, B, ctx);
  h = act1.forward(h, ctx);
  h = drop.forward(h, ctx);
  h = pw2.forward(h, B, ctx);
  h = norm2.forward(h, B, ctx);
  h = act2.forward(h, ctx);
  return wrap(B, pw2.out_features(), std::move(h));
}

template <typename T>
Embedding<T> Bottleneck<T>::backward(const Embedding<T>& dy) {
  std::vector<T> g = act2.backward(dy.values);
  g = norm2.backward(g);
  g = pw2.backward(g);
  g = drop.backward(g);
  g = act1.backward(g);
  g = norm1.backward(g);
  g = pw1.backward(g);
  return wrap(dy.batch, pw1.in_features(), std::move(g));
}

// ------------------------------------------------------------ ConcatMlp

template <typename T>
ConcatMlp<T>::ConcatMlp(const std::string& prefix, std::size_t channels, std::size_t hidden,
                        Rng& rng)
    : fc1(prefix + ".fc1", 2 * channels, hidden, rng),
      fc2(prefix + ".fc2", hidden, channels, rng),
      channels_(channels) {}

template <typename T>
void ConcatMlp<T>::collect(nn::ParamRefs<T>& out) {
  fc1.collect(out);
  fc2.collect(out);
}

template <typename T>
Embedding<T> ConcatMlp<T>::forward(const Embedding<T>& f1, const Embedding<T>& f2,
                                   const nn::Context& ctx) {
  if (f1.channels != channels_ || f2.channels != channels_ || f1.batch != f2.batch) {
    throw ShapeError("concat_mlp: branch shape mismatch");
  }
  const std::size_t B = f1.batch, C = channels_;
  std::vector<T> cat(B * 2 * C);
  for (std::size_t b = 0; b < B; ++b) {
    std::copy_n(&f1.values[b * C], C, &cat[b * 2 * C]);
    std::copy_n(&f2.values[b * C], C, &cat[b * 2 * C + C]);
  }
  std::vector<T> h = fc1.forward(cat, B, ctx);
  h = act.forward(h, ctx);
  h = fc2.forward(h, B, ctx);
  return wrap(B, C, std::move(h));
}

template <typename T>
std::pair<Embedding<T>, Embedding<T>> ConcatMlp<T>::backward(const Embedding<T>& dy) {
  const std::size_t B = dy.batch, C = channels_;
  std::vector<T> g = fc2.backward(dy.values);
  g = act.backward(g);
  g = fc1.backward(g);
  Embedding<T> d1(B, C), d2(B, C);
  for (std::size_t b = 0; b < B; ++b) {
    std::copy_n(&g[b * 2 * C], C, &d1.values[b * C]);
    std::copy_n(&g[b * 2 * C + C], C, &d2.values[b * C]);
  }
  return {std::move(d1), std::move(d2)};
}

// -------------------------------------------------------- PairAttention

template <typename T>
PairAttention<T>::PairAttention(const std::string& prefix, std::size_t channels, Rng& rng)
    : query(prefix + ".query", channels, channels, rng),
      key(prefix + ".key", channels, channels, rng),
      value(prefix + ".value", channels, channels, rng),
      channels_(channels) {}

template <typename T>
void PairAttention<T>::collect(nn::ParamRefs<T>& out) {
  query.collect(out);
  key.collect(out);
  value.collect(out);
}

template <typename T>
Embedding<T> PairAttention<T>::forward(const Embedding<T>& f1, const Embedding<T>& f2,
                                       const nn::Context& ctx) {
  if (f1.channels != channels_ || f2.channels != channels_ || f1.batch != f2.batch) {
    throw ShapeError("attention2: branch shape mismatch");
  }
  const std::size_t B = f1.batch, C = channels_;
  // Tokens as rows (b, t).
  std::vector<T> tokens(B * 2 * C);
  for (std::size_t b = 0; b < B; ++b) {
    std::copy_n(&f1.values[b * C], C, &tokens[(2 * b) * C]);
    std::copy_n(&f2.values[b * C], C, &tokens[(2 * b + 1) * C]);
  }
  std::vector<T> q = query.forward(tokens, 2 * B, ctx);
  std::vector<T> k = key.forward(tokens, 2 * B, ctx);
  std::vector<T> v = value.forward(tokens, 2 * B, ctx);
  const T scale = T(1) / std::sqrt(static_cast<T>(C));
  std::vector<T> attn(B * 4);
  Embedding<T> y(B, C);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < 2; ++t) {
      T s[2];
      for (std::size_t u = 0; u < 2; ++u) {
        T dot = 0;
        for (std::size_t c = 0; c < C; ++c) dot += q[(2 * b + t) * C + c] * k[(2 * b + u) * C + c];
        s[u] = dot * scale;
      }
      const T m = std::max(s[0], s[1]);
      const T e0 = std::exp(s[0] - m), e1 = std::exp(s[1] - m);
      attn[b * 4 + t * 2 + 0] = e0 / (e0 + e1);
      attn[b * 4 + t * 2 + 1] = e1 / (e0 + e1);
    }
    for (std::size_t c = 0; c < C; ++c) {
      T acc = 0;
      for (std::size_t t = 0; t < 2; ++t) {
        for (std::size_t u = 0; u < 2; ++u) acc += attn[b * 4 + t * 2 + u] * v[(2 * b + u) * C + c];
      }
      y.values[b * C + c] = acc / T(2);
    }
  }
  if (ctx.record) {
    batch_ = B;
    q_ = std::move(q);
    k_ = std::move(k);
    v_ = std::move(v);
    attn_ = std::move(attn);
  }
  return y;
}

template <typename T>
std::pair<Embedding<T>, Embedding<T>> PairAttention<T>::backward(const Embedding<T>& dy) {
  const std::size_t B = batch_, C = channels_;
  if (dy.batch != B || attn_.size() != B * 4) {
    throw ShapeError("attention2: backward without recorded forward");
  }
  const T scale = T(1) / std::sqrt(static_cast<T>(C));
  std::vector<T> dq(B * 2 * C, T(0)), dk(B * 2 * C, T(0)), dv(B * 2 * C, T(0));
  for (std::size_t b = 0; b < B; ++b) {
    const T* g = &dy.values[b * C];  // d out_t = g / 2 for both tokens
    for (std::size_t t = 0; t < 2; ++t) {
      T da[2];
      for (std::size_t u = 0; u < 2; ++u) {
        const T a = attn_[b * 4 + t * 2 + u];
        T dot = 0;
        for (std::size_t c = 0; c < C; ++c) {
          dot += g[c] * v_[(2 * b + u) * C + c];
          dv[(2 * b + u) * C + c] += a * g[c] / T(2);
        }
        da[u] = dot / T(2);
      }
      const T a0 = attn_[b * 4 + t * 2], a1 = attn_[b * 4 + t * 2 + 1];
      const T mean = a0 * da[0] + a1 * da[1];
      const T ds[2] = {a0 * (da[0] - mean), a1 * (da[1] - mean)};
      for (std::size_t u = 0; u < 2; ++u) {
        for (std::size_t c = 0; c < C; ++c) {
          dq[(2 * b + t) * C + c] += ds[u] * k_[(2 * b + u) * C + c] * scale;
          dk[(2 * b + u) * C + c] += ds[u] * q_[(2 * b + t) * C + c] * scale;
        }
      }
    }
  }
  const std::vector<T> gq = query.backward(dq);
  const std::vector<T> gk = key.backward(dk);
  const std::vector<T> gv = value.backward(dv);
  Embedding<T> d1(B, C), d2(B, C);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t r0 = (2 * b) * C + c, r1 = (2 * b + 1) * C + c;
      d1.values[b * C + c] = gq[r0] + gk[r0] + gv[r0];
      d2.values[b * C + c] = gq[r1] + gk[r1] + gv[r1];
    }
  }
  return {std::move(d1), std::move(d2)};
}

template <typename T>
Embedding<T> fuse_sum(const Embedding<T>& f1, const Embedding<T>& f2) {
  if (f1.batch != f2.batch || f1.channels != f2.channels) {
    throw ShapeError("sum fusion: branch shape mismatch");
  }
  Embedding<T> y = f1;
  for (std::size_t i = 0; i < y.values.size(); ++i) y.values[i] += f2.values[i];
  return y;
}

// -------------------------------------------------------- FusionDecoder

template <typename T>
FusionDecoder<T>::FusionDecoder(const std::string& prefix, const FusionConfig& cfg,
                                std::uint64_t seed)
    : cfg_((cfg.validate(), cfg)),
      init_rng_(seed),
      bottleneck(prefix + ".bottleneck", cfg.channels, cfg.hidden_width, cfg.dropout_rate,
                 init_rng_),
      head(prefix + ".head", cfg.channels, cfg.num_classes, init_rng_) {
  switch (cfg.mode) {
    case FusionMode::k2conv:
      merge.emplace(prefix + ".merge", cfg.channels, init_rng_);
      break;
    case FusionMode::concat_mlp:
      concat_mlp.emplace(prefix + ".concat_mlp", cfg.channels, cfg.hidden_width, init_rng_);
      break;
    case FusionMode::attention2:
      attention.emplace(prefix + ".attention", cfg.channels, init_rng_);
      break;
    case FusionMode::sum:
      break;
  }
}

template <typename T>
nn::ParamRefs<T> FusionDecoder<T>::parameters() {
  nn::ParamRefs<T> out;
  if (merge) merge->collect(out);
  if (concat_mlp) concat_mlp->collect(out);
  if (attention) attention->collect(out);
  bottleneck.collect(out);
  head.collect(out);
  return out;
}

template <typename T>
nn::BufferRefs<T> FusionDecoder<T>::buffers() {
  nn::BufferRefs<T> out;
  if (merge) merge->collect_buffers(out);
  bottleneck.collect_buffers(out);
  return out;
}

template <typename T>
Embedding<T> FusionDecoder<T>::fuse(const Embedding<T>& f1, const Embedding<T>& f2,
                                    const nn::Context& ctx) {
  if (f1.channels != cfg_.channels) {
    throw ShapeError("fusion: expected " + std::to_string(cfg_.channels) +
                     " channels, got " + std::to_string(f1.channels));
  }
  switch (cfg_.mode) {
    case FusionMode::k2conv: return merge->forward(stack_pair(f1, f2), ctx);
    case FusionMode::sum: return fuse_sum(f1, f2);
    case FusionMode::concat_mlp: return concat_mlp->forward(f1, f2, ctx);
    case FusionMode::attention2: return attention->forward(f1, f2, ctx);
  }
  throw ConfigError("unknown fusion mode");
}

template <typename T>
std::pair<Embedding<T>, Embedding<T>> FusionDecoder<T>::fuse_backward(const Embedding<T>& dy) {
  switch (cfg_.mode) {
    case FusionMode::k2conv: return unstack_pair(merge->backward(dy));
    case FusionMode::sum: return {dy, dy};
    case FusionMode::concat_mlp: return concat_mlp->backward(dy);
    case FusionMode::attention2: return attention->backward(dy);
  }
  throw ConfigError("unknown fusion mode");
}

template <typename T>
Embedding<T> FusionDecoder<T>::classify(const Embedding<T>& e, const nn::Context& ctx) {
  return wrap(e.batch, cfg_.num_classes, head.forward(e.values, e.batch, ctx));
}

template <typename T>
Embedding<T> FusionDecoder<T>::forward(const Embedding<T>& f1, const Embedding<T>& f2,
                                       const nn::Context& ctx) {
  return classify(bottleneck.forward(fuse(f1, f2, ctx), ctx), ctx);
}

template <typename T>
std::pair<Embedding<T>, Embedding<T>> FusionDecoder<T>::backward(const Embedding<T>& dlogits) {
  Embedding<T> g = wrap(dlogits.batch, cfg_.channels, head.backward(dlogits.values));
  g = bottleneck.backward(g);
  return fuse_backward(g);
}

#define STROKENEXT_INSTANTIATE(T)                                                    \
  template StackedPair<T> stack_pair<T>(const Embedding<T>&, const Embedding<T>&);   \
  template std::pair<Embedding<T>, Embedding<T>> unstack_pair<T>(const StackedPair<T>&); \
  template class MergeConv<T>;                                                       \
  template class Bottleneck<T>;                                                      \
  template class ConcatMlp<T>;                                                       \
  template class PairAttention<T>;                                                   \
  template Embedding<T> fuse_sum<T>(const Embedding<T>&, const Embedding<T>&);       \
  template class FusionDecoder<T>;

STROKENEXT_INSTANTIATE(float)
STROKENEXT_INSTANTIATE(double)

}  // namespace strokenext
