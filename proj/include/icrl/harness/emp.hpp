#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <stdexcept>
#include <vector>

namespace icrl::harness {

/// Expected maximum of `n` i.i.d. draws from the empirical distribution of
/// `scores`.
inline double emp(std::vector<double> scores, int n) {
  if (scores.empty()) throw std::invalid_argument("emp: empty score pool");
  if (n < 1) throw std::invalid_argument("emp: budget must be >= 1");
  std::sort(scores.begin(), scores.end());
  const double K = double(scores.size());
  const double Kn = std::pow(K, n);
  double total = 0;
  if (Kn < 9007199254740992.0) {
    // Integer weights i^n - (i-1)^n are exact here, so integer pools give
    // the exact rational value rounded once.
    double prev = 0;
    for (std::size_t i = 1; i <= scores.size(); ++i) {
      double cur = std::pow(double(i), n);
      total += scores[i - 1] * (cur - prev);
      prev = cur;
    }
    return total / Kn;
  }
  double prev = 0;
  for (std::size_t i = 1; i <= scores.size(); ++i) {
    double cur = std::pow(double(i) / K, n);
    total += scores[i - 1] * (cur - prev);
    prev = cur;
  }
  return total;
}

struct EmpCurve {
  std::vector<int> budget;
  std::vector<double> value;
  std::vector<double> stddev;

  std::size_t size() const { return budget.size(); }

  /// CSV with header `budget,value,std`.
  void write_csv(std::ostream& os) const {
    os << "budget,value,std\n";
    os.precision(10);
    for (std::size_t i = 0; i < budget.size(); ++i) os << budget[i] << ',' << value[i] << ',' << stddev[i] << '\n';
  }
};

/// EMP at budgets 1..max_budget with bootstrap standard deviations from
/// `resamples` resamples of the pool drawn with `seed`.
inline EmpCurve emp_curve(const std::vector<double>& scores, int max_budget, int resamples = 1000, std::uint64_t seed = 0) {
  if (scores.empty()) throw std::invalid_argument("emp: empty score pool");
  if (max_budget < 1) throw std::invalid_argument("emp: budget must be >= 1");
  EmpCurve c;
  std::vector<double> sorted(scores);
  std::sort(sorted.begin(), sorted.end());
  for (int n = 1; n <= max_budget; ++n) {
    c.budget.push_back(n);
    c.value.push_back(emp(sorted, n));
  }
  // Guard against pow rounding breaking monotonicity by an ulp.
  for (std::size_t i = 1; i < c.value.size(); ++i) c.value[i] = std::max(c.value[i], c.value[i - 1]);
  if (!c.value.empty()) c.value.back() = std::min(c.value.back(), sorted.back());

  std::vector<double> sum(std::size_t(max_budget), 0.0), sum_sq(std::size_t(max_budget), 0.0);
  if (resamples > 0) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, scores.size() - 1);
    std::vector<double> pool(scores.size());
    for (int r = 0; r < resamples; ++r) {
      for (auto& p : pool) p = scores[pick(rng)];
      std::sort(pool.begin(), pool.end());
      for (int n = 1; n <= max_budget; ++n) {
        double v = emp(pool, n);
        sum[std::size_t(n - 1)] += v;
        sum_sq[std::size_t(n - 1)] += v * v;
      }
    }
  }
  for (int n = 0; n < max_budget; ++n) {
    if (resamples < 2) {
      c.stddev.push_back(0.0);
      continue;
    }
    double m = sum[std::size_t(n)] / resamples;
    double var = (sum_sq[std::size_t(n)] - resamples * m * m) / (resamples - 1);
    c.stddev.push_back(std::sqrt(std::max(0.0, var)));
  }
  return c;
}

}  // namespace icrl::harness
