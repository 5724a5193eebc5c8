#include "strokenext/stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>

#include "strokenext/errors.hpp"

namespace strokenext::stats {

namespace {

std::map<std::string, const metrics::PredictionRecord*> by_id(const metrics::PredictionLog& log,
                                                             const char* which) {
  std::map<std::string, const metrics::PredictionRecord*> out;
  for (const auto& r : log) {
    if (!out.emplace(r.sample_id, &r).second) {
      throw ComparisonError(std::string("log ") + which + " lists sample '" + r.sample_id +
                            "' more than once");
    }
  }
  return out;
}

std::string join_ids(const std::vector<std::string>& ids) {
  constexpr std::size_t kShown = 10;
  std::string s;
  for (std::size_t i = 0; i < ids.size() && i < kShown; ++i) {
    if (i) s += ", ";
    s += ids[i];
  }
  if (ids.size() > kShown) s += ", ... (" + std::to_string(ids.size()) + " total)";
  return s;
}

}  // namespace

Discordance discordant_counts(const metrics::PredictionLog& log_a,
                              const metrics::PredictionLog& log_b) {
  const auto a = by_id(log_a, "A");
  const auto b = by_id(log_b, "B");

  std::vector<std::string> only_a, only_b;
  for (const auto& [id, _] : a) {
    if (!b.count(id)) only_a.push_back(id);
  }
  for (const auto& [id, _] : b) {
    if (!a.count(id)) only_b.push_back(id);
  }
  if (!only_a.empty() || !only_b.empty()) {
    std::string msg = "prediction logs cover different samples;";
    if (!only_a.empty()) msg += " only in A: " + join_ids(only_a) + ";";
    if (!only_b.empty()) msg += " only in B: " + join_ids(only_b) + ";";
    throw ComparisonError(msg);
  }

  Discordance d;
  for (const auto& [id, ra] : a) {
    const auto* rb = b.at(id);
    if (ra->true_label != rb->true_label) {
      throw ComparisonError("sample '" + id + "' has different true labels in the two logs");
    }
    const bool ok_a = ra->pred_label == ra->true_label;
    const bool ok_b = rb->pred_label == rb->true_label;
    if (ok_a && !ok_b) ++d.b;
    if (ok_b && !ok_a) ++d.c;
  }
  return d;
}

double chi2_sf_1dof(double x) {
  if (!(x > 0.0)) return 1.0;
  return std::erfc(std::sqrt(x / 2.0));
}

double exact_binomial_p(std::uint64_t b, std::uint64_t c) {
  const std::uint64_t n = b + c;
  if (n == 0) return 1.0;
  const std::uint64_t k = std::min(b, c);
  // log-space binomial terms keep large n finite.
  double tail = 0.0;
  const double log_half_n = static_cast<double>(n) * std::log(0.5);
  for (std::uint64_t i = 0; i <= k; ++i) {
    const double log_choose = std::lgamma(static_cast<double>(n) + 1) -
                              std::lgamma(static_cast<double>(i) + 1) -
                              std::lgamma(static_cast<double>(n - i) + 1);
    tail += std::exp(log_choose + log_half_n);
  }
  return std::min(1.0, 2.0 * tail);
}

McNemarResult mcnemar(std::uint64_t b, std::uint64_t c, double alpha, bool with_exact) {
  McNemarResult r;
  r.b = b;
  r.c = c;
  r.alpha = alpha;
  const std::uint64_t n = b + c;
  if (n > 0) {
    const double diff = std::abs(static_cast<double>(b) - static_cast<double>(c)) - 1.0;
    const double corrected = std::max(diff, 0.0);
    r.chi2 = corrected * corrected / static_cast<double>(n);
  }
  r.p_value = chi2_sf_1dof(r.chi2);
  r.significant = r.p_value < alpha;
  if (with_exact && n < kExactThreshold) r.exact_p_value = exact_binomial_p(b, c);
  return r;
}

nlohmann::json to_json(const McNemarResult& r) {
  nlohmann::json j = {{"b", r.b},         {"c", r.c},         {"chi2", r.chi2},
                      {"p_value", r.p_value}, {"alpha", r.alpha}, {"significant", r.significant},
                      {"statistic", "continuity-corrected chi-square, 1 dof"}};
  if (r.exact_p_value) j["exact_p_value"] = *r.exact_p_value;
  return j;
}

}  // namespace strokenext::stats
