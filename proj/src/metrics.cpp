#include "strokenext/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "strokenext/errors.hpp"
#include "strokenext/io.hpp"
#include "strokenext/training.hpp"

namespace strokenext::metrics {

std::size_t argmax(std::span<const double> probs) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < probs.size(); ++k) {
    if (probs[k] > probs[best]) best = k;
  }
  return best;
}

PredictionRecord make_record(std::string sample_id, std::size_t true_label,
                             std::vector<double> probs) {
  const std::size_t pred = argmax(probs);
  return {std::move(sample_id), true_label, pred, std::move(probs)};
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

ConfusionMatrix confusion(const PredictionLog& records, std::size_t num_classes) {
  if (records.empty()) throw EvaluationError("confusion matrix of an empty prediction log");
  const std::size_t K = num_classes ? num_classes : records.front().probs.size();
  ConfusionMatrix cm(K);
  for (const auto& r : records) {
    if (r.true_label >= K || r.pred_label >= K) {
      throw EvaluationError("label out of range for sample '" + r.sample_id + "'");
    }
    ++cm.at(r.true_label, r.pred_label);
  }
  return cm;
}

BasicMetrics basic_metrics(const ConfusionMatrix& cm) {
  const std::size_t K = cm.classes;
  const auto N = static_cast<double>(cm.total());
  if (N == 0) throw EvaluationError("metrics of an empty confusion matrix");
  BasicMetrics m;
  std::uint64_t correct = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < K; ++c) {
    std::uint64_t support = 0, predicted = 0;
    for (std::size_t j = 0; j < K; ++j) {
      support += cm.at(c, j);
      predicted += cm.at(j, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    correct += tp;
    const double precision = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
    const double recall = support ? static_cast<double>(tp) / static_cast<double>(support) : 0.0;
    const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    const double w = static_cast<double>(support);
    m.precision += w * precision;
    m.recall += w * recall;
    m.f1 += w * f1;
    m.macro_precision += precision;
    m.macro_recall += recall;
    m.macro_f1 += f1;
    if (support) {
      m.balanced_accuracy += recall;
      ++present;
    }
  }
  m.accuracy = static_cast<double>(correct) / N;
  m.precision /= N;
  m.recall /= N;
  m.f1 /= N;
  m.macro_precision /= static_cast<double>(K);
  m.macro_recall /= static_cast<double>(K);
  m.macro_f1 /= static_cast<double>(K);
  m.balanced_accuracy /= static_cast<double>(present);
  return m;
}

double mcc(const ConfusionMatrix& cm) {
  if (cm.classes == 2) {
    const auto tn = static_cast<double>(cm.at(0, 0));
    const auto fp = static_cast<double>(cm.at(0, 1));
    const auto fn = static_cast<double>(cm.at(1, 0));
    const auto tp = static_cast<double>(cm.at(1, 1));
    const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    if (den == 0.0) return 0.0;
    return (tp * tn - fp * fn) / std::sqrt(den);
  }
  // Multiclass generalization (reduces to the binary formula for K = 2).
  const std::size_t K = cm.classes;
  const auto s = static_cast<double>(cm.total());
  double c = 0, sum_pt = 0, sum_pp = 0, sum_tt = 0;
  for (std::size_t k = 0; k < K; ++k) {
    double t = 0, p = 0;
    for (std::size_t j = 0; j < K; ++j) {
      t += static_cast<double>(cm.at(k, j));
      p += static_cast<double>(cm.at(j, k));
    }
    c += static_cast<double>(cm.at(k, k));
    sum_pt += p * t;
    sum_pp += p * p;
    sum_tt += t * t;
  }
  const double den = std::sqrt((s * s - sum_pp) * (s * s - sum_tt));
  return den == 0.0 ? 0.0 : (c * s - sum_pt) / den;
}

namespace {

void check_scores(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw EvaluationError("scores/labels size mismatch");
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_scores(scores, labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney U with average ranks for ties.
  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        rank_sum_pos += avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw EvaluationError("AUROC needs both classes present");
  const double np = static_cast<double>(n_pos);
  return (rank_sum_pos - np * (np + 1) / 2) / (np * static_cast<double>(n_neg));
}

double auprc(std::span<const double> scores, std::span<const int> labels) {
  check_scores(scores, labels);
  const auto n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (n_pos == 0) throw EvaluationError("AUPRC needs at least one positive sample");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? tp : fp) += 1;
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

double brier(const PredictionLog& records, std::size_t positive_class) {
  if (records.empty()) throw EvaluationError("Brier score of an empty log");
  double sum = 0.0;
  for (const auto& r : records) {
    const double y = r.true_label == positive_class ? 1.0 : 0.0;
    const double d = r.probs.at(positive_class) - y;
    sum += d * d;
  }
  return sum / static_cast<double>(records.size());
}

double brier_multiclass(const PredictionLog& records) {
  if (records.empty()) throw EvaluationError("Brier score of an empty log");
  double sum = 0.0;
  for (const auto& r : records) {
    for (std::size_t k = 0; k < r.probs.size(); ++k) {
      const double d = r.probs[k] - (k == r.true_label ? 1.0 : 0.0);
      sum += d * d;
    }
  }
  return sum / static_cast<double>(records.size());
}

double ece(const PredictionLog& records, std::size_t n_bins) {
  if (records.empty() || n_bins == 0) return 0.0;
  std::vector<double> conf_sum(n_bins, 0.0);
  std::vector<std::size_t> hits(n_bins, 0), count(n_bins, 0);
  for (const auto& r : records) {
    const double conf = *std::max_element(r.probs.begin(), r.probs.end());
    // Bin b covers (b/n, (b+1)/n].
    auto b = static_cast<std::ptrdiff_t>(std::ceil(conf * static_cast<double>(n_bins))) - 1;
    b = std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(n_bins) - 1);
    conf_sum[static_cast<std::size_t>(b)] += conf;
    hits[static_cast<std::size_t>(b)] += r.pred_label == r.true_label;
    ++count[static_cast<std::size_t>(b)];
  }
  const auto N = static_cast<double>(records.size());
  double total = 0.0;
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (!count[b]) continue;
    const auto nb = static_cast<double>(count[b]);
    total += nb / N * std::abs(static_cast<double>(hits[b]) / nb - conf_sum[b] / nb);
  }
  return total;
}

std::vector<ClassStats> sens_spec(const ConfusionMatrix& cm) {
  const std::size_t K = cm.classes;
  const std::uint64_t total = cm.total();
  std::vector<ClassStats> out(K);
  for (std::size_t c = 0; c < K; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < K; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t fn = row - tp;
    const std::uint64_t fp = col - tp;
    const std::uint64_t tn = total - tp - fn - fp;
    out[c].support = row;
    out[c].sensitivity = row ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    out[c].specificity = tn + fp ? static_cast<double>(tn) / static_cast<double>(tn + fp) : 0.0;
  }
  return out;
}

EvalReport compute_report(const PredictionLog& records, std::size_t num_classes,
                          const ReportOptions& options) {
  EvalReport rep;
  rep.options = options;
  rep.n = records.size();
  rep.confusion = confusion(records, num_classes);
  rep.basic = basic_metrics(rep.confusion);
  rep.accuracy = rep.basic.accuracy;
  rep.precision = rep.basic.precision;
  rep.recall = rep.basic.recall;
  rep.f1 = rep.basic.f1;
  rep.balanced_accuracy = rep.basic.balanced_accuracy;
  rep.mcc = mcc(rep.confusion);
  rep.per_class = sens_spec(rep.confusion);
  rep.brier = options.multiclass_brier ? brier_multiclass(records)
                                       : brier(records, options.positive_class);
  rep.ece = ece(records, options.ece_bins);

  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& r : records) {
    scores.push_back(r.probs.at(options.positive_class));
    labels.push_back(r.true_label == options.positive_class ? 1 : 0);
  }
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos > 0 && pos < static_cast<std::ptrdiff_t>(labels.size())) {
    rep.auroc = auroc(scores, labels);
  }
  if (pos > 0) rep.auprc = auprc(scores, labels);
  return rep;
}

nlohmann::json EvalReport::to_json() const {
  using nlohmann::json;
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json per = json::array();
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    json e = {{"class", c},
              {"sensitivity", per_class[c].sensitivity},
              {"specificity", per_class[c].specificity},
              {"support", per_class[c].support}};
    if (c < options.class_names.size()) e["name"] = options.class_names[c];
    per.push_back(e);
  }
  json grid = json::array();
  for (std::size_t t = 0; t < confusion.classes; ++t) {
    json row = json::array();
    for (std::size_t p = 0; p < confusion.classes; ++p) row.push_back(confusion.at(t, p));
    grid.push_back(row);
  }
  return {
      {"n", n},
      {"accuracy", accuracy},
      {"precision", precision},
      {"recall", recall},
      {"f1", f1},
      {"auroc", opt(auroc)},
      {"auprc", opt(auprc)},
      {"balanced_accuracy", balanced_accuracy},
      {"mcc", mcc},
      {"brier", brier},
      {"ece", ece},
      {"macro",
       {{"precision", basic.macro_precision},
        {"recall", basic.macro_recall},
        {"f1", basic.macro_f1}}},
      {"per_class", per},
      {"confusion", {{"rows", "true"}, {"columns", "predicted"}, {"counts", grid}}},
      {"metadata",
       {{"averaging", "weighted"},
        {"ece_bins", options.ece_bins},
        {"ece_binning", "equal-width over (0,1] on max-probability confidence"},
        {"brier_variant", options.multiclass_brier ? "multiclass" : "binary-positive-class"},
        {"positive_class", options.positive_class},
        {"class_names", options.class_names}}},
  };
}

// ------------------------------------------------------------------ CSV

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

std::size_t parse_index(const std::string& s, std::size_t line) {
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw EvaluationError("prediction log line " + std::to_string(line) + ": bad label '" + s + "'");
  }
}

}  // namespace

std::string format_prediction_log(const PredictionLog& log) {
  const std::size_t K = log.empty() ? 2 : log.front().probs.size();
  std::string out = "sample_id,true_label,pred_label";
  for (std::size_t k = 0; k < K; ++k) out += ",prob_" + std::to_string(k);
  out += "\n";
  char buf[40];
  for (const auto& r : log) {
    out += csv_field(r.sample_id) + "," + std::to_string(r.true_label) + "," +
           std::to_string(r.pred_label);
    for (double p : r.probs) {
      std::snprintf(buf, sizeof buf, ",%.17g", p);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

void write_prediction_log(const std::filesystem::path& path, const PredictionLog& log) {
  write_text_atomic(path, format_prediction_log(log));
}

PredictionLog parse_prediction_log(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw EvaluationError("prediction log is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);
  if (header.size() < 5 || header[0] != "sample_id" || header[1] != "true_label" ||
      header[2] != "pred_label") {
    throw EvaluationError("prediction log has an unexpected header: " + line);
  }
  const std::size_t K = header.size() - 3;
  for (std::size_t k = 0; k < K; ++k) {
    if (header[3 + k] != "prob_" + std::to_string(k)) {
      throw EvaluationError("prediction log header column '" + header[3 + k] + "' unexpected");
    }
  }
  PredictionLog log;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size()) {
      throw EvaluationError("prediction log line " + std::to_string(lineno) +
                            " has the wrong number of fields");
    }
    PredictionRecord r;
    r.sample_id = f[0];
    r.true_label = parse_index(f[1], lineno);
    r.pred_label = parse_index(f[2], lineno);
    for (std::size_t k = 0; k < K; ++k) {
      char* end = nullptr;
      const double v = std::strtod(f[3 + k].c_str(), &end);
      if (end == f[3 + k].c_str() || *end != '\0') {
        throw EvaluationError("prediction log line " + std::to_string(lineno) +
                              ": bad probability '" + f[3 + k] + "'");
      }
      r.probs.push_back(v);
    }
    log.push_back(std::move(r));
  }
  return log;
}

PredictionLog read_prediction_log(const std::filesystem::path& path) {
  return parse_prediction_log(read_text(path));
}

EvalResult evaluate(StrokeNeXt<float>& model, const data::DatasetIndex& split,
                    const data::ImageCache& images, std::size_t batch_size, int image_size,
                    const ReportOptions& options) {
  if (split.size() == 0) throw EvaluationError("cannot evaluate an empty split");
  if (images.size() != split.size()) throw EvaluationError("image cache does not match split");
  std::vector<std::size_t> order(split.size());
  std::iota(order.begin(), order.end(), 0);
  data::AugmentConfig no_aug;
  no_aug.enabled = false;
  const nn::Context ctx{};
  EvalResult result;
  for (const auto& batch : training::make_batches(order, std::max<std::size_t>(batch_size, 1))) {
    const auto x = data::make_batch(images, batch, no_aug, 0, 0, image_size);
    const auto logits = model.forward(x, ctx);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto row = logits.row(b);
      double mx = -std::numeric_limits<double>::infinity();
      for (float v : row) mx = std::max(mx, static_cast<double>(v));
      std::vector<double> probs(row.size());
      double z = 0.0;
      for (std::size_t k = 0; k < row.size(); ++k) {
        probs[k] = std::exp(static_cast<double>(row[k]) - mx);
        z += probs[k];
      }
      for (auto& p : probs) p /= z;
      const auto& sample = split.samples[batch[b]];
      result.log.push_back(make_record(sample.id, sample.label, std::move(probs)));
    }
  }
  result.report = compute_report(result.log, model.config().fusion.num_classes, options);
  return result;
}

}  // namespace strokenext::metrics
