#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "strokenext/data.hpp"
#include "strokenext/model.hpp"

namespace strokenext::metrics {

struct PredictionRecord {
  std::string sample_id;
  std::size_t true_label = 0;
  std::size_t pred_label = 0;
  std::vector<double> probs;

  bool operator==(const PredictionRecord&) const = default;
};

using PredictionLog = std::vector<PredictionRecord>;

// Argmax with ties resolved to the lowest index.
std::size_t argmax(std::span<const double> probs);
PredictionRecord make_record(std::string sample_id, std::size_t true_label,
                             std::vector<double> probs);

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;  // row = true class, column = predicted

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t k) : classes(k), counts(k * k, 0) {}

  std::uint64_t& at(std::size_t t, std::size_t p) { return counts[t * classes + p]; }
  std::uint64_t at(std::size_t t, std::size_t p) const { return counts[t * classes + p]; }
  std::uint64_t total() const;
  bool operator==(const ConfusionMatrix&) const = default;
};

// num_classes == 0 takes the class count from the probability vectors.
ConfusionMatrix confusion(const PredictionLog& records, std::size_t num_classes = 0);

struct BasicMetrics {
  double accuracy = 0;
  // Support-weighted averages.
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  // Unweighted averages over classes.
  double macro_precision = 0;
  double macro_recall = 0;
  double macro_f1 = 0;
  double balanced_accuracy = 0;
};

BasicMetrics basic_metrics(const ConfusionMatrix& cm);

// Matthews correlation; 0 when the denominator vanishes.
double mcc(const ConfusionMatrix& cm);

// labels: 1 = positive, 0 = negative.
double auroc(std::span<const double> scores, std::span<const int> labels);
double auprc(std::span<const double> scores, std::span<const int> labels);

// Mean of (p_positive - y)^2.
double brier(const PredictionLog& records, std::size_t positive_class);
// Mean over records of sum_k (p_k - onehot_k)^2.
double brier_multiclass(const PredictionLog& records);

inline constexpr std::size_t kDefaultEceBins = 15;
double ece(const PredictionLog& records, std::size_t n_bins = kDefaultEceBins);

struct ClassStats {
  double sensitivity = 0;
  double specificity = 0;
  std::uint64_t support = 0;
};
std::vector<ClassStats> sens_spec(const ConfusionMatrix& cm);

struct ReportOptions {
  std::size_t positive_class = 1;
  std::size_t ece_bins = kDefaultEceBins;
  bool multiclass_brier = false;
  std::vector<std::string> class_names;  // optional, echoed in the report
};

struct EvalReport {
  std::size_t n = 0;
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
  std::optional<double> auroc, auprc;  // absent when a class is missing
  double balanced_accuracy = 0, mcc = 0, brier = 0, ece = 0;
  BasicMetrics basic;
  std::vector<ClassStats> per_class;
  ConfusionMatrix confusion;
  ReportOptions options;

  nlohmann::json to_json() const;
};

EvalReport compute_report(const PredictionLog& records, std::size_t num_classes,
                          const ReportOptions& options);

// CSV: sample_id,true_label,pred_label,prob_0,...; probabilities use 17
// significant digits so values round-trip exactly.
std::string format_prediction_log(const PredictionLog& log);
void write_prediction_log(const std::filesystem::path& path, const PredictionLog& log);
PredictionLog parse_prediction_log(const std::string& text);
PredictionLog read_prediction_log(const std::filesystem::path& path);

// Deterministic inference pass over one split.
struct EvalResult {
  EvalReport report;
  PredictionLog log;
};
EvalResult evaluate(StrokeNeXt<float>& model, const data::DatasetIndex& split,
                    const data::ImageCache& images, std::size_t batch_size, int image_size,
                    const ReportOptions& options);

}  // namespace strokenext::metrics
