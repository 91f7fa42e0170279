#pragma once

// Shared test helpers: finite-difference checking and brute-force oracles.
// Everything here is written independently of the library code it checks.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "adaptcast/tensor.hpp"

namespace testsupport {

using adaptcast::ad::Shape;
using adaptcast::ad::Tensor;
using Td = Tensor<double>;

inline Td random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(adaptcast::ad::numel(shape));
  for (auto& x : v) x = u(rng);
  return Td::from(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero (for kinks and divisions).
inline Td away_from_zero(std::mt19937_64& rng, Shape shape, double lo = 0.1, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(adaptcast::ad::numel(shape));
  for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return Td::from(std::move(shape), std::move(v), true);
}

struct CheckResult {
  double rel_error = 0.0;
  std::size_t checked = 0;
};

// ||a - n|| / max(||a||, ||n||, tiny) over every input element, where a is
// the reverse-mode gradient of f(inputs) and n the central difference.
inline CheckResult gradcheck(std::vector<Td> inputs, const std::function<Td(const std::vector<Td>&)>& f,
                             double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  const Td loss = f(inputs);
  adaptcast::ad::backward(loss);
  double diff = 0.0, na = 0.0, nn = 0.0;
  CheckResult r;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double keep = data[i];
      double plus, minus;
      {
        adaptcast::ad::NoGradGuard g;
        data[i] = keep + h;
        plus = f(inputs).item();
        data[i] = keep - h;
        minus = f(inputs).item();
      }
      data[i] = keep;
      const double num = (plus - minus) / (2 * h);
      diff += (num - analytic[i]) * (num - analytic[i]);
      na += analytic[i] * analytic[i];
      nn += num * num;
      ++r.checked;
    }
  }
  r.rel_error = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  return r;
}

// Weighted sum with fixed random weights, so every output element matters.
inline Td weighted_sum(const Td& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Td w = random_tensor(rng, y.shape(), -1.0, 1.0, false);
  return adaptcast::ad::sum(adaptcast::ad::mul(y, w));
}

// ---------------------------------------------------------------------------
// Oracles

// Type-7 quantile computed from the textbook definition.
inline double oracle_quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const double fl = std::floor(pos);
  const std::size_t i = static_cast<std::size_t>(fl);
  if (i + 1 >= v.size()) return v.back();
  return v[i] * (1.0 - (pos - fl)) + v[i + 1] * (pos - fl);
}

inline std::vector<std::size_t> oracle_iqr(const std::vector<double>& v, double m) {
  const double q1 = oracle_quantile(v, 0.25), q3 = oracle_quantile(v, 0.75);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] < q1 - m * (q3 - q1) || v[i] > q3 + m * (q3 - q1)) out.push_back(i);
  return out;
}

// Exhaustive KNN: full distance table, stable sort of candidates.
inline Eigen::MatrixXd oracle_knn(const Eigen::MatrixXd& X, int k, const std::vector<double>& w) {
  const auto R = X.rows(), C = X.cols();
  std::vector<double> sd(static_cast<std::size_t>(C));
  for (Eigen::Index c = 0; c < C; ++c) {
    std::vector<double> obs;
    for (Eigen::Index r = 0; r < R; ++r)
      if (!std::isnan(X(r, c))) obs.push_back(X(r, c));
    const double mean = std::accumulate(obs.begin(), obs.end(), 0.0) / static_cast<double>(obs.size());
    double var = 0.0;
    for (double o : obs) var += (o - mean) * (o - mean);
    var /= static_cast<double>(obs.size());
    sd[static_cast<std::size_t>(c)] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  auto dist = [&](Eigen::Index a, Eigen::Index b) {
    double s = 0.0;
    int n = 0;
    for (Eigen::Index c = 0; c < C; ++c) {
      if (std::isnan(X(a, c)) || std::isnan(X(b, c))) continue;
      const double z = (X(a, c) - X(b, c)) / sd[static_cast<std::size_t>(c)];
      s += w[static_cast<std::size_t>(c)] * z * z;
      ++n;
    }
    if (n == 0) return std::numeric_limits<double>::infinity();
    return std::sqrt(s * static_cast<double>(C) / n);
  };
  Eigen::MatrixXd out = X;
  for (Eigen::Index r = 0; r < R; ++r)
    for (Eigen::Index c = 0; c < C; ++c) {
      if (!std::isnan(X(r, c))) continue;
      std::vector<Eigen::Index> cand;
      for (Eigen::Index q = 0; q < R; ++q)
        if (q != r && !std::isnan(X(q, c)) && std::isfinite(dist(r, q))) cand.push_back(q);
      if (cand.empty()) {
        double s = 0.0;
        int n = 0;
        for (Eigen::Index q = 0; q < R; ++q)
          if (!std::isnan(X(q, c))) {
            s += X(q, c);
            ++n;
          }
        out(r, c) = s / n;
        continue;
      }
      std::stable_sort(cand.begin(), cand.end(),
                       [&](Eigen::Index a, Eigen::Index b) { return dist(r, a) < dist(r, b); });
      const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), cand.size());
      double s = 0.0;
      for (std::size_t i = 0; i < take; ++i) s += X(cand[i], c);
      out(r, c) = s / static_cast<double>(take);
    }
  return out;
}

// Pearson r from the covariance definition.
inline double oracle_pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a[i];
    sb += b[i];
  }
  const double ma = sa / n, mb = sb / n;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return (sab / n) / std::sqrt((saa / n) * (sbb / n));
}

// Exact Shapley values by averaging marginal contributions over all feature
// orderings; the value of a coalition is the mean output over background
// rows with the coalition's features copied from x.
inline std::vector<double> oracle_shapley(const std::function<double(const Eigen::RowVectorXd&)>& f,
                                          const Eigen::MatrixXd& background,
                                          const Eigen::RowVectorXd& x) {
  const int F = static_cast<int>(x.size());
  auto value = [&](const std::vector<char>& in) {
    double s = 0.0;
    for (Eigen::Index b = 0; b < background.rows(); ++b) {
      Eigen::RowVectorXd r = background.row(b);
      for (int i = 0; i < F; ++i)
        if (in[static_cast<std::size_t>(i)]) r(i) = x(i);
      s += f(r);
    }
    return s / static_cast<double>(background.rows());
  };
  std::vector<int> perm(static_cast<std::size_t>(F));
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<double> phi(static_cast<std::size_t>(F), 0.0);
  double count = 0.0;
  do {
    std::vector<char> in(static_cast<std::size_t>(F), 0);
    double prev = value(in);
    for (int i : perm) {
      in[static_cast<std::size_t>(i)] = 1;
      const double cur = value(in);
      phi[static_cast<std::size_t>(i)] += cur - prev;
      prev = cur;
    }
    count += 1.0;
  } while (std::next_permutation(perm.begin(), perm.end()));
  for (auto& p : phi) p /= count;
  return phi;
}

// Scalar replay of the smoothed-validation early-stopping rule; returns the
// last epoch run (0-based) and the best epoch.
inline std::pair<int, int> oracle_early_stop(const std::vector<double>& val, double beta, int patience,
                                             double min_delta) {
  double s = val[0], best = val[0];
  int best_epoch = 0, since = 0;
  for (std::size_t t = 1; t < val.size(); ++t) {
    s = beta * val[t] + (1 - beta) * s;
    if (best - s >= min_delta) {
      best = s;
      best_epoch = static_cast<int>(t);
      since = 0;
    } else if (++since >= patience) {
      return {static_cast<int>(t), best_epoch};
    }
  }
  return {static_cast<int>(val.size()) - 1, best_epoch};
}

}  // namespace testsupport
