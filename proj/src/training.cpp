#include "strokenext/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "strokenext/errors.hpp"

namespace strokenext::training {

template <typename T>
double smoothed_ce(const Embedding<T>& logits, std::span<const std::size_t> targets,
                   double eps, Embedding<T>* grad) {
  const std::size_t B = logits.batch, K = logits.channels;
  if (targets.size() != B) throw ShapeError("loss: target count differs from batch size");
  if (grad) *grad = Embedding<T>(B, K);
  double total = 0.0;
  std::vector<double> logp(K);
  for (std::size_t b = 0; b < B; ++b) {
    if (targets[b] >= K) throw ShapeError("loss: target index out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(logits.at(b, k)));
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(logits.at(b, k)) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t k = 0; k < K; ++k) {
      logp[k] = static_cast<double>(logits.at(b, k)) - lse;
      const double q = (k == targets[b] ? 1.0 - eps : 0.0) + eps / static_cast<double>(K);
      total -= q * logp[k];
      if (grad) {
        grad->at(b, k) = static_cast<T>((std::exp(logp[k]) - q) / static_cast<double>(B));
      }
    }
  }
  return total / static_cast<double>(B);
}

template <typename T>
void adamw_step(std::span<T> params, std::span<const T> grads, Moments& moments,
                std::uint64_t step, double lr, double weight_decay, const AdamWConfig& cfg) {
  if (params.size() != grads.size()) throw ShapeError("adamw: grad/param size mismatch");
  if (moments.m.size() != params.size()) {
    moments.m.assign(params.size(), 0.0);
    moments.v.assign(params.size(), 0.0);
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    double& m = moments.m[i];
    double& v = moments.v[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    const double theta = params[i];
    params[i] = static_cast<T>(theta - lr * m_hat / (std::sqrt(v_hat) + cfg.eps) -
                               lr * weight_decay * theta);
  }
}

template <typename T>
AdamW<T>::AdamW(nn::ParamRefs<T> params, AdamWConfig cfg) : params_(std::move(params)) {
  state_.config = cfg;
  state_.moments.resize(params_.size());
}

template <typename T>
void AdamW<T>::step(double lr, double weight_decay) {
  if (state_.moments.size() != params_.size()) {
    throw ConfigError("optimizer state does not match the parameter list");
  }
  ++state_.step;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    adamw_step<T>(params_[i]->value, params_[i]->grad, state_.moments[i], state_.step, lr,
                  weight_decay, state_.config);
  }
}

double plateau_step(PlateauState& state, const PlateauConfig& cfg, double val_loss) {
  if (val_loss < state.best * (1.0 - cfg.threshold)) {
    state.best = val_loss;
    state.bad_epochs = 0;
  } else {
    ++state.bad_epochs;
    if (state.bad_epochs >= cfg.patience) {
      state.lr = std::max(state.lr * cfg.factor, cfg.min_lr);
      state.bad_epochs = 0;
    }
  }
  return state.lr;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ConfigError("smoothing must lie in [0, 1)");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
  if (image_size < 32 || image_size % 32 != 0) {
    throw ConfigError("image size must be a positive multiple of 32");
  }
  augment.validate();
}

Checkpoint capture(StrokeNeXt<float>& model) {
  Checkpoint ckpt;
  ckpt.model = model.config();
  for (auto* p : model.parameters()) ckpt.params.push_back({p->name, p->shape, p->value});
  for (auto* b : model.buffers()) {
    ckpt.buffers.push_back({b->name, {b->value.size()}, b->value});
  }
  return ckpt;
}

void restore(StrokeNeXt<float>& model, const Checkpoint& ckpt) {
  auto params = model.parameters();
  auto buffers = model.buffers();
  if (params.size() != ckpt.params.size() || buffers.size() != ckpt.buffers.size()) {
    throw ConfigError("checkpoint tensor count does not match the model");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = ckpt.params[i];
    if (src.name != params[i]->name || src.values.size() != params[i]->value.size()) {
      throw ConfigError("checkpoint tensor '" + src.name + "' does not match the model");
    }
    params[i]->value = src.values;
  }
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    const auto& src = ckpt.buffers[i];
    if (src.name != buffers[i]->name || src.values.size() != buffers[i]->value.size()) {
      throw ConfigError("checkpoint buffer '" + src.name + "' does not match the model");
    }
    buffers[i]->value = src.values;
  }
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> order,
                                                   std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t end = std::min(order.size(), i + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

namespace {

std::size_t count_correct(const Embedding<float>& logits, std::span<const std::size_t> targets) {
  std::size_t correct = 0;
  for (std::size_t b = 0; b < logits.batch; ++b) {
    const auto row = logits.row(b);
    const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) -
                                               row.begin());
    correct += pred == targets[b];
  }
  return correct;
}

std::vector<std::size_t> labels_of(const data::DatasetIndex& index,
                                   std::span<const std::size_t> positions) {
  std::vector<std::size_t> out;
  out.reserve(positions.size());
  for (auto p : positions) out.push_back(index.samples[p].label);
  return out;
}

}  // namespace

PassStats evaluate_loss(StrokeNeXt<float>& model, const LabelledSplit& split,
                        std::size_t batch_size, int image_size, double smoothing) {
  const auto& index = *split.index;
  std::vector<std::size_t> order(index.size());
  std::iota(order.begin(), order.end(), 0);
  data::AugmentConfig no_aug;
  no_aug.enabled = false;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  const nn::Context ctx{};  // evaluation: running statistics, no dropout, nothing recorded
  for (const auto& batch : make_batches(order, batch_size)) {
    const auto x = data::make_batch(*split.images, batch, no_aug, 0, 0, image_size);
    const auto logits = model.forward(x, ctx);
    const auto targets = labels_of(index, batch);
    loss_sum += smoothed_ce<float>(logits, targets, smoothing) * static_cast<double>(batch.size());
    correct += count_correct(logits, targets);
  }
  const auto n = static_cast<double>(index.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

TrainResult train(StrokeNeXt<float>& model, const LabelledSplit& train_split,
                  const LabelledSplit& val_split, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (!train_split.index || train_split.index->size() == 0 || !val_split.index ||
      val_split.index->size() == 0) {
    throw DatasetError("training needs non-empty train and validation splits");
  }
  const auto& index = *train_split.index;
  AdamW<float> optimizer(model.parameters());
  PlateauState sched;
  sched.lr = cfg.lr;

  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(index.size());

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, 0x53485546ULL, epoch));
    shuffle_rng.shuffle(order.begin(), order.end());
    Rng dropout_rng(derive_seed(cfg.seed, 0x44524f50ULL, epoch));
    const nn::Context ctx{true, true, &dropout_rng};

    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    const auto batches = make_batches(order, cfg.batch_size);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      if (cfg.max_steps && result.history.steps >= cfg.max_steps) break;
      const auto& batch = batches[bi];
      const auto x = data::make_batch(*train_split.images, batch, cfg.augment, cfg.seed, epoch,
                                      cfg.image_size);
      const auto targets = labels_of(index, batch);
      model.zero_grad();
      const auto logits = model.forward(x, ctx);
      Embedding<float> dlogits;
      const double loss = smoothed_ce<float>(logits, targets, cfg.smoothing, &dlogits);
      if (!std::isfinite(loss)) {
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(bi));
      }
      model.backward(dlogits);
      optimizer.step(sched.lr, cfg.weight_decay);
      ++result.history.steps;
      loss_sum += loss * static_cast<double>(batch.size());
      correct += count_correct(logits, targets);
      seen += batch.size();
    }
    if (seen == 0) break;

    const PassStats val = evaluate_loss(model, val_split, cfg.batch_size, cfg.image_size,
                                        cfg.smoothing);
    if (!std::isfinite(val.loss)) {
      throw NumericalError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    rec.val_loss = val.loss;
    rec.val_accuracy = val.accuracy;
    rec.lr = sched.lr;

    auto snapshot = [&] {
      Checkpoint c = capture(model);
      c.optimizer = optimizer.state();
      c.scheduler = sched;
      c.epoch = epoch;
      c.image_size = cfg.image_size;
      c.class_names = index.class_names;
      return c;
    };
    plateau_step(sched, cfg.scheduler, val.loss);
    if (val.loss < best_val) {
      best_val = val.loss;
      result.history.best_epoch = epoch;
      result.best = snapshot();
    }
    result.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (epoch == cfg.epochs || (cfg.max_steps && result.history.steps >= cfg.max_steps)) {
      result.last = snapshot();
    }
  }
  if (result.last.params.empty()) {
    result.last = capture(model);
    result.last.optimizer = optimizer.state();
    result.last.scheduler = sched;
  }
  return result;
}

template double smoothed_ce<float>(const Embedding<float>&, std::span<const std::size_t>, double,
                                   Embedding<float>*);
template double smoothed_ce<double>(const Embedding<double>&, std::span<const std::size_t>,
                                    double, Embedding<double>*);
template void adamw_step<float>(std::span<float>, std::span<const float>, Moments&,
                                std::uint64_t, double, double, const AdamWConfig&);
template void adamw_step<double>(std::span<double>, std::span<const double>, Moments&,
                                 std::uint64_t, double, double, const AdamWConfig&);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace strokenext::training
