#pragma once

#include <cstdint>
#include <optional>

#include <nlohmann/json.hpp>

#include "strokenext/metrics.hpp"

namespace strokenext::stats {

struct Discordance {
  std::uint64_t b = 0;  // A correct, B wrong
  std::uint64_t c = 0;  // B correct, A wrong
};

// Throws ComparisonError when the logs do not cover the same sample ids.
Discordance discordant_counts(const metrics::PredictionLog& log_a,
                              const metrics::PredictionLog& log_b);

// Survival function of the chi-square distribution with one degree of freedom.
double chi2_sf_1dof(double x);

// Two-sided exact binomial McNemar p-value, min(1, 2 * P[X <= min(b,c)]) with
// X ~ Bin(b+c, 1/2).
double exact_binomial_p(std::uint64_t b, std::uint64_t c);

inline constexpr std::uint64_t kExactThreshold = 25;

struct McNemarResult {
  std::uint64_t b = 0;
  std::uint64_t c = 0;
  double chi2 = 0;
  double p_value = 1;
  double alpha = 0.05;
  bool significant = false;
  // Present when requested and b + c < kExactThreshold.
  std::optional<double> exact_p_value;
};

McNemarResult mcnemar(std::uint64_t b, std::uint64_t c, double alpha = 0.05,
                      bool with_exact = false);

nlohmann::json to_json(const McNemarResult& r);

}  // namespace strokenext::stats
