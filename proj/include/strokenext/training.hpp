#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "strokenext/data.hpp"
#include "strokenext/model.hpp"

namespace strokenext::training {

// Mean over the batch of -sum_k q_k log softmax(logits)_k with
// q = (1 - eps) * onehot + eps / K. When `grad` is non-null it receives
// d(loss)/d(logits).
template <typename T>
double smoothed_ce(const Embedding<T>& logits, std::span<const std::size_t> targets,
                   double eps, Embedding<T>* grad = nullptr);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moments for one parameter tensor.
struct Moments {
  std::vector<double> m;
  std::vector<double> v;
};

struct OptimizerState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::vector<Moments> moments;  // parallel to the parameter list
};

// One decoupled-weight-decay Adam update of a single tensor. `step` is the
// 1-based step index used for bias correction.
template <typename T>
void adamw_step(std::span<T> params, std::span<const T> grads, Moments& moments,
                std::uint64_t step, double lr, double weight_decay, const AdamWConfig& cfg);

template <typename T>
class AdamW {
 public:
  AdamW(nn::ParamRefs<T> params, AdamWConfig cfg = {});
  void step(double lr, double weight_decay);

  OptimizerState& state() { return state_; }
  const OptimizerState& state() const { return state_; }

 private:
  nn::ParamRefs<T> params_;
  OptimizerState state_;
};

struct PlateauConfig {
  double factor = 0.1;
  std::size_t patience = 3;
  double threshold = 1e-4;  // relative improvement required
  double min_lr = 1e-7;
};

struct PlateauState {
  double lr = 1e-4;
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
};

// Reduce-on-plateau on a monitored loss; returns the new learning rate.
double plateau_step(PlateauState& state, const PlateauConfig& cfg, double val_loss);

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 80;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double smoothing = 0.1;
  PlateauConfig scheduler;
  std::uint64_t seed = 0;
  int image_size = data::kImageSize;
  data::AugmentConfig augment;
  // Optional cap on optimizer steps (0 = unlimited).
  std::size_t max_steps = 0;

  void validate() const;  // throws ConfigError
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double train_accuracy = 0;
  double val_loss = 0;
  double val_accuracy = 0;
  double lr = 0;
  bool operator==(const EpochRecord&) const = default;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t steps = 0;
  std::size_t best_epoch = 0;
  bool operator==(const TrainHistory&) const = default;
};

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> values;
  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  ModelConfig model;
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> buffers;
  OptimizerState optimizer;
  PlateauState scheduler;
  std::uint64_t epoch = 0;
  std::uint64_t split_seed = 0;
  std::array<double, 3> split_ratios{0.8, 0.1, 0.1};
  bool split_stratified = false;
  int image_size = data::kImageSize;
  std::vector<std::string> class_names;
};

Checkpoint capture(StrokeNeXt<float>& model);
// Copies the checkpoint's tensors into the model (names and shapes must match).
void restore(StrokeNeXt<float>& model, const Checkpoint& ckpt);

// One labelled partition with its decoded images.
struct LabelledSplit {
  const data::DatasetIndex* index = nullptr;
  const data::ImageCache* images = nullptr;
};

struct TrainResult {
  Checkpoint best;  // lowest validation loss
  Checkpoint last;
  TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

TrainResult train(StrokeNeXt<float>& model, const LabelledSplit& train_split,
                  const LabelledSplit& val_split, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

// Mean smoothed loss and accuracy of an evaluation-mode pass.
struct PassStats {
  double loss = 0;
  double accuracy = 0;
};
PassStats evaluate_loss(StrokeNeXt<float>& model, const LabelledSplit& split,
                        std::size_t batch_size, int image_size, double smoothing);

// Consecutive batches over `n` positions; a trailing batch of one sample is
// folded into the previous batch (batch statistics need two rows).
std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> order,
                                                   std::size_t batch_size);

}  // namespace strokenext::training
