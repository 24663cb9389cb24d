#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace branchrl {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

inline double softplus(double x) {
  // log(1 + e^x), overflow safe
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double sigmoid(double x) {
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename It>
double logsumexp(It begin, It end) {
  double m = -std::numeric_limits<double>::infinity();
  for (It it = begin; it != end; ++it) m = std::max(m, *it);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (It it = begin; it != end; ++it) s += std::exp(*it - m);
  return m + std::log(s);
}

/// Formats a double the same way on every run (CSV cells, filenames).
inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return std::string(buf);
}

struct PearsonResult {
  double r = 0.0;
  bool defined = false;
};

template <typename Xs, typename Ys>
PearsonResult pearson(const Xs& xs, const Ys& ys) {
  const std::size_t n = xs.size();
  if (n != static_cast<std::size_t>(ys.size()) || n < 2)
    throw std::invalid_argument("pearson: need two equal-length series, n >= 2");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  PearsonResult out;
  if (sxx <= 0.0 || syy <= 0.0) return out;  // zero variance: undefined, not NaN
  out.r = sxy / std::sqrt(sxx * syy);
  out.defined = true;
  return out;
}

/// Upper regularized incomplete gamma Q(a, x); used for chi-square tails.
inline double gamma_q(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw std::invalid_argument("gamma_q: bad arguments");
  if (x == 0.0) return 1.0;
  const double gln = std::lgamma(a);
  if (x < a + 1.0) {
    // series for P(a,x)
    double ap = a, sum = 1.0 / a, del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-15) break;
    }
    return 1.0 - sum * std::exp(-x + a * std::log(x) - gln);
  }
  // continued fraction for Q(a,x)
  const double tiny = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
  for (int i = 1; i < 500; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - gln) * h;
}

/// Chi-square goodness-of-fit p-value for equal expected counts.
inline double chi_square_uniform_pvalue(const std::vector<long long>& counts) {
  if (counts.size() < 2) throw std::invalid_argument("chi_square: need >= 2 bins");
  long long total = 0;
  for (long long c : counts) total += c;
  if (total == 0) throw std::invalid_argument("chi_square: empty sample");
  const double expected = static_cast<double>(total) / static_cast<double>(counts.size());
  double stat = 0.0;
  for (long long c : counts) {
    const double d = static_cast<double>(c) - expected;
    stat += d * d / expected;
  }
  const double dof = static_cast<double>(counts.size() - 1);
  return gamma_q(0.5 * dof, 0.5 * stat);
}

}  // namespace branchrl
