#pragma once

// Cohort-level feature selection: |Pearson r|, binned mutual information,
// random-forest RFE, and a three-way vote.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "adaptcast/common.hpp"

namespace adaptcast {

struct SelectionResult {
  std::string method;
  std::vector<int> selected;  // best first
  std::vector<double> scores;
  std::vector<int> votes;              // ensemble only
  std::vector<int> elimination_order;  // rfe only, first eliminated first
};

inline void to_json(nlohmann::json& j, const SelectionResult& r) {
  j = {{"method", r.method}, {"selected", r.selected}, {"scores", r.scores}};
  if (!r.votes.empty()) j["votes"] = r.votes;
  if (!r.elimination_order.empty()) j["elimination_order"] = r.elimination_order;
}

namespace detail {

// Feature indices sorted by score descending, ties to the lower index.
inline std::vector<int> rank_desc(const std::vector<double>& scores) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  return idx;
}

inline void check_xy(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, Eigen::Index min_rows) {
  if (X.rows() != y.size())
    throw ShapeError("feature selection: X has " + std::to_string(X.rows()) + " rows, y has " +
                     std::to_string(y.size()));
  if (X.rows() < min_rows)
    throw ContractError("feature selection: need at least " + std::to_string(min_rows) + " rows");
  if (!X.allFinite() || !y.allFinite())
    throw ContractError("feature selection: inputs contain missing or non-finite values");
}

}  // namespace detail

inline double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double ma = a.mean(), mb = b.mean();
  double sab = 0, saa = 0, sbb = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double da = a(i) - ma, db = b(i) - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0 || sbb <= 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// Features with |r| above `threshold`, strongest first; back-filled from the
// ranking when fewer than target_k pass.
inline SelectionResult select_correlation(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                          double threshold = 0.05, int target_k = 15) {
  detail::check_xy(X, y, 2);
  SelectionResult res;
  res.method = "correlation";
  for (Eigen::Index f = 0; f < X.cols(); ++f)
    res.scores.push_back(std::abs(pearson(X.col(f), y)));
  const auto ranking = detail::rank_desc(res.scores);
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(target_k), ranking.size());
  for (int f : ranking)
    if (res.selected.size() < k && res.scores[static_cast<std::size_t>(f)] > threshold)
      res.selected.push_back(f);
  for (int f : ranking) {
    if (res.selected.size() >= k) break;
    if (std::find(res.selected.begin(), res.selected.end(), f) == res.selected.end())
      res.selected.push_back(f);
  }
  return res;
}

// Equal-frequency bin codes. Tied values share the bin of their lowest rank.
inline std::vector<int> equal_frequency_bins(const Eigen::VectorXd& v, int bins) {
  const auto n = static_cast<std::size_t>(v.size());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return v(static_cast<Eigen::Index>(a)) < v(static_cast<Eigen::Index>(b));
  });
  std::vector<int> code(n);
  std::size_t first_rank = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (r > 0 && v(static_cast<Eigen::Index>(order[r])) != v(static_cast<Eigen::Index>(order[r - 1])))
      first_rank = r;
    code[order[r]] = static_cast<int>(first_rank * static_cast<std::size_t>(bins) / n);
  }
  return code;
}

// Plug-in MI (nats) of two discrete codings.
inline double discrete_mutual_information(const std::vector<int>& a, const std::vector<int>& b,
                                          int bins) {
  const std::size_t n = a.size();
  std::vector<double> joint(static_cast<std::size_t>(bins * bins), 0.0), pa(static_cast<std::size_t>(bins), 0.0),
      pb(static_cast<std::size_t>(bins), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    joint[static_cast<std::size_t>(a[i] * bins + b[i])] += 1.0;
    pa[static_cast<std::size_t>(a[i])] += 1.0;
    pb[static_cast<std::size_t>(b[i])] += 1.0;
  }
  double mi = 0;
  const double N = static_cast<double>(n);
  for (int i = 0; i < bins; ++i)
    for (int j = 0; j < bins; ++j) {
      const double pij = joint[static_cast<std::size_t>(i * bins + j)] / N;
      if (pij <= 0) continue;
      mi += pij * std::log(pij / ((pa[static_cast<std::size_t>(i)] / N) * (pb[static_cast<std::size_t>(j)] / N)));
    }
  return mi;
}

inline double mutual_information(const Eigen::VectorXd& a, const Eigen::VectorXd& b, int bins = 8) {
  return discrete_mutual_information(equal_frequency_bins(a, bins), equal_frequency_bins(b, bins), bins);
}

inline SelectionResult select_mutual_info(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                          int target_k = 15, int bins = 8) {
  detail::check_xy(X, y, bins);
  SelectionResult res;
  res.method = "mi";
  const auto ybins = equal_frequency_bins(y, bins);
  for (Eigen::Index f = 0; f < X.cols(); ++f)
    res.scores.push_back(discrete_mutual_information(equal_frequency_bins(X.col(f), bins), ybins, bins));
  const auto ranking = detail::rank_desc(res.scores);
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(target_k), ranking.size());
  res.selected.assign(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(k));
  return res;
}

// ---------------------------------------------------------------------------
// Random forest regressor

struct ForestConfig {
  int n_trees = 100;
  int max_depth = 6;
  std::uint64_t seed = 0;
};

struct RegressionTree {
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0;
    int left = -1, right = -1;
    double value = 0;
  };
  std::vector<Node> nodes;

  double predict(const Eigen::RowVectorXd& x) const {
    int i = 0;
    while (nodes[static_cast<std::size_t>(i)].feature >= 0) {
      const auto& n = nodes[static_cast<std::size_t>(i)];
      i = x(n.feature) <= n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(i)].value;
  }
  int depth() const {
    std::function<int(int)> rec = [&](int i) -> int {
      const auto& n = nodes[static_cast<std::size_t>(i)];
      return n.feature < 0 ? 0 : 1 + std::max(rec(n.left), rec(n.right));
    };
    return nodes.empty() ? 0 : rec(0);
  }
};

struct ForestModel {
  std::vector<RegressionTree> trees;
  std::vector<double> feature_importances;

  double predict(const Eigen::RowVectorXd& x) const {
    double s = 0;
    for (const auto& t : trees) s += t.predict(x);
    return trees.empty() ? 0.0 : s / static_cast<double>(trees.size());
  }
};

namespace detail {

struct TreeBuilder {
  const Eigen::MatrixXd& X;
  const Eigen::VectorXd& y;
  int max_depth;
  int mtry;
  Rng& rng;
  RegressionTree tree;
  std::vector<double>& importance;

  int build(std::vector<std::size_t>& idx, int depth) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    double sum = 0, ss = 0;
    for (auto i : idx) {
      sum += y(static_cast<Eigen::Index>(i));
      ss += y(static_cast<Eigen::Index>(i)) * y(static_cast<Eigen::Index>(i));
    }
    const double n = static_cast<double>(idx.size());
    tree.nodes[static_cast<std::size_t>(id)].value = sum / n;
    const double sse = ss - sum * sum / n;
    if (depth >= max_depth || idx.size() < 2 || sse <= 1e-12 * std::max(1.0, ss)) return id;

    // Sample mtry candidate features without replacement.
    std::vector<int> feats(static_cast<std::size_t>(X.cols()));
    std::iota(feats.begin(), feats.end(), 0);
    for (int k = 0; k < mtry; ++k) {
      std::uniform_int_distribution<int> pick(k, static_cast<int>(feats.size()) - 1);
      std::swap(feats[static_cast<std::size_t>(k)], feats[static_cast<std::size_t>(pick(rng))]);
    }
    double best_gain = 0;
    int best_f = -1;
    double best_thr = 0;
    std::vector<std::size_t> sorted = idx;
    for (int k = 0; k < mtry; ++k) {
      const int f = feats[static_cast<std::size_t>(k)];
      std::sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) {
        return X(static_cast<Eigen::Index>(a), f) < X(static_cast<Eigen::Index>(b), f);
      });
      double ls = 0, lss = 0;
      for (std::size_t p = 0; p + 1 < sorted.size(); ++p) {
        const double v = y(static_cast<Eigen::Index>(sorted[p]));
        ls += v;
        lss += v * v;
        const double xa = X(static_cast<Eigen::Index>(sorted[p]), f);
        const double xb = X(static_cast<Eigen::Index>(sorted[p + 1]), f);
        if (xa == xb) continue;
        const double nl = static_cast<double>(p + 1), nr = n - nl;
        const double rs = sum - ls, rss = ss - lss;
        const double child = (lss - ls * ls / nl) + (rss - rs * rs / nr);
        const double gain = sse - child;
        if (gain > best_gain) {
          best_gain = gain;
          best_f = f;
          best_thr = 0.5 * (xa + xb);
        }
      }
    }
    if (best_f < 0) return id;
    importance[static_cast<std::size_t>(best_f)] += best_gain;
    std::vector<std::size_t> left, right;
    for (auto i : idx)
      (X(static_cast<Eigen::Index>(i), best_f) <= best_thr ? left : right).push_back(i);
    idx.clear();
    idx.shrink_to_fit();
    const int l = build(left, depth + 1);
    const int r = build(right, depth + 1);
    auto& node = tree.nodes[static_cast<std::size_t>(id)];
    node.feature = best_f;
    node.threshold = best_thr;
    node.left = l;
    node.right = r;
    return id;
  }
};

}  // namespace detail

// Bootstrap trees, sqrt(F) candidate features per split, variance-reduction
// splits. Importances are total SSE reduction per feature, normalized to 1.
inline ForestModel fit_forest(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                              const ForestConfig& cfg = {}, int jobs = 1) {
  detail::check_xy(X, y, 2);
  const auto F = static_cast<std::size_t>(X.cols());
  const int mtry = std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(F)))));
  ForestModel model;
  model.trees.resize(static_cast<std::size_t>(cfg.n_trees));
  std::vector<std::vector<double>> per_tree(static_cast<std::size_t>(cfg.n_trees),
                                            std::vector<double>(F, 0.0));
  parallel_for(static_cast<std::size_t>(cfg.n_trees), jobs, [&](std::size_t t) {
    Rng rng(mix_seed(cfg.seed, t));
    std::uniform_int_distribution<std::size_t> pick(0, static_cast<std::size_t>(X.rows()) - 1);
    std::vector<std::size_t> boot(static_cast<std::size_t>(X.rows()));
    for (auto& b : boot) b = pick(rng);
    detail::TreeBuilder builder{X, y, cfg.max_depth, mtry, rng, {}, per_tree[t]};
    builder.build(boot, 0);
    model.trees[t] = std::move(builder.tree);
  });
  model.feature_importances.assign(F, 0.0);
  for (const auto& imp : per_tree)
    for (std::size_t f = 0; f < F; ++f) model.feature_importances[f] += imp[f];
  const double total = std::accumulate(model.feature_importances.begin(),
                                       model.feature_importances.end(), 0.0);
  if (total > 0)
    for (auto& v : model.feature_importances) v /= total;
  return model;
}

// Drops the least important surviving feature (ties: higher index) until
// target_k remain. Scores rank features by survival: later is better.
inline SelectionResult select_rfe(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                  int target_k = 15, ForestConfig forest = {}, int jobs = 1) {
  detail::check_xy(X, y, 2);
  const int F = static_cast<int>(X.cols());
  SelectionResult res;
  res.method = "rfe";
  res.scores.assign(static_cast<std::size_t>(F), 0.0);
  std::vector<int> alive(static_cast<std::size_t>(F));
  std::iota(alive.begin(), alive.end(), 0);
  if (F <= target_k) {
    warn("select_rfe: " + std::to_string(F) + " features <= target " + std::to_string(target_k) +
         ", keeping all");
    res.selected = alive;
    std::fill(res.scores.begin(), res.scores.end(), 1.0);
    return res;
  }
  std::vector<double> last_importance;
  int round = 0;
  const std::uint64_t base_seed = forest.seed;
  while (static_cast<int>(alive.size()) > target_k) {
    Eigen::MatrixXd sub(X.rows(), static_cast<Eigen::Index>(alive.size()));
    for (std::size_t c = 0; c < alive.size(); ++c) sub.col(static_cast<Eigen::Index>(c)) = X.col(alive[c]);
    forest.seed = mix_seed(base_seed, static_cast<std::uint64_t>(round));
    const auto model = fit_forest(sub, y, forest, jobs);
    std::size_t worst = 0;
    for (std::size_t c = 1; c < alive.size(); ++c)
      if (model.feature_importances[c] <= model.feature_importances[worst]) worst = c;
    res.scores[static_cast<std::size_t>(alive[worst])] = static_cast<double>(round);
    res.elimination_order.push_back(alive[worst]);
    alive.erase(alive.begin() + static_cast<std::ptrdiff_t>(worst));
    ++round;
  }
  // Survivors: ordered by importance in the final fit.
  Eigen::MatrixXd sub(X.rows(), static_cast<Eigen::Index>(alive.size()));
  for (std::size_t c = 0; c < alive.size(); ++c) sub.col(static_cast<Eigen::Index>(c)) = X.col(alive[c]);
  forest.seed = mix_seed(base_seed, static_cast<std::uint64_t>(round));
  const auto final_model = fit_forest(sub, y, forest, jobs);
  const auto order = detail::rank_desc(final_model.feature_importances);
  for (std::size_t r = 0; r < order.size(); ++r) {
    const int f = alive[static_cast<std::size_t>(order[r])];
    res.selected.push_back(f);
    res.scores[static_cast<std::size_t>(f)] = static_cast<double>(round) +
                                              static_cast<double>(order.size() - r);
  }
  return res;
}

struct EnsembleConfig {
  double corr_threshold = 0.05;
  int mi_bins = 8;
  ForestConfig forest;
};

// One vote per sub-method selection; ties broken by the mean normalized rank
// across the three full rankings, then by lower index.
inline SelectionResult select_ensemble(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                       int target_k = 15, const EnsembleConfig& cfg = {},
                                       int jobs = 1) {
  const auto corr = select_correlation(X, y, cfg.corr_threshold, target_k);
  const auto mi = select_mutual_info(X, y, target_k, cfg.mi_bins);
  const auto rfe = select_rfe(X, y, target_k, cfg.forest, jobs);
  const auto F = static_cast<std::size_t>(X.cols());
  SelectionResult res;
  res.method = "ensemble";
  res.votes.assign(F, 0);
  std::vector<double> mean_rank(F, 0.0);
  const double denom = F > 1 ? static_cast<double>(F - 1) : 1.0;
  for (const auto* sub : {&corr, &mi, &rfe}) {
    for (int f : sub->selected) ++res.votes[static_cast<std::size_t>(f)];
    const auto ranking = detail::rank_desc(sub->scores);
    for (std::size_t r = 0; r < ranking.size(); ++r)
      mean_rank[static_cast<std::size_t>(ranking[r])] += static_cast<double>(r) / denom / 3.0;
  }
  std::vector<int> idx(F);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    const auto ua = static_cast<std::size_t>(a), ub = static_cast<std::size_t>(b);
    if (res.votes[ua] != res.votes[ub]) return res.votes[ua] > res.votes[ub];
    if (mean_rank[ua] != mean_rank[ub]) return mean_rank[ua] < mean_rank[ub];
    return a < b;
  });
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(target_k), F);
  res.selected.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  for (std::size_t f = 0; f < F; ++f)
    res.scores.push_back(static_cast<double>(res.votes[f]) + (1.0 - mean_rank[f]) * 0.5);
  return res;
}

inline SelectionResult select_features(const std::string& method, const Eigen::MatrixXd& X,
                                       const Eigen::VectorXd& y, int target_k,
                                       std::uint64_t seed, int jobs = 1) {
  ForestConfig forest;
  forest.seed = seed;
  if (method == "correlation") return select_correlation(X, y, 0.05, target_k);
  if (method == "mi") return select_mutual_info(X, y, target_k);
  if (method == "rfe") return select_rfe(X, y, target_k, forest, jobs);
  if (method == "ensemble") {
    EnsembleConfig cfg;
    cfg.forest = forest;
    return select_ensemble(X, y, target_k, cfg, jobs);
  }
  throw ConfigError("unknown selection method '" + method + "'", "method");
}

}  // namespace adaptcast
