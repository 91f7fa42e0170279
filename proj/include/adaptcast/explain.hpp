#pragma once

// Kernel SHAP over temporally aggregated windows.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "adaptcast/common.hpp"
#include "adaptcast/dataio.hpp"
#include "adaptcast/model.hpp"

namespace adaptcast {

// Per-feature mean over the w time steps.
inline Eigen::VectorXd aggregate_temporal(const Eigen::MatrixXd& x) {
  if (x.rows() == 0) throw ContractError("aggregate_temporal: empty window");
  return x.colwise().mean().transpose();
}

// Constant-in-time window whose every row is v.
inline Eigen::MatrixXd broadcast_temporal(const Eigen::VectorXd& v, int w) {
  return v.transpose().replicate(w, 1);
}

// Maps a batch of aggregated rows [n x F] to one output per row.
using BatchFn = std::function<Eigen::VectorXd(const Eigen::MatrixXd&)>;

struct Attribution {
  std::vector<std::string> feature_names;
  std::vector<double> phi;
  double base_value = 0.0;
  double fx = 0.0;  // model output on the instance
  int instance = 0;
};

struct KernelShapConfig {
  int full_enumeration_max = 12;
  int n_coalitions = 2048;  // sampled budget when F exceeds the enumeration limit
  double ridge = 1e-8;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::size_t eval_chunk = 8192;  // rows per model call
};

inline double shapley_kernel_weight(int F, int s) {
  double c = 1.0;  // C(F, s)
  for (int k = 1; k <= s; ++k) c = c * static_cast<double>(F - s + k) / static_cast<double>(k);
  return static_cast<double>(F - 1) / (c * static_cast<double>(s) * static_cast<double>(F - s));
}

namespace shap_detail {

struct Coalitions {
  std::vector<std::vector<char>> masks;  // 1 = feature taken from the instance
  std::vector<double> weights;
};

inline Coalitions enumerate(int F) {
  Coalitions c;
  for (std::uint64_t bits = 1; bits + 1 < (std::uint64_t{1} << F); ++bits) {
    std::vector<char> m(static_cast<std::size_t>(F));
    int s = 0;
    for (int i = 0; i < F; ++i) {
      m[static_cast<std::size_t>(i)] = static_cast<char>((bits >> i) & 1U);
      s += m[static_cast<std::size_t>(i)];
    }
    c.masks.push_back(std::move(m));
    c.weights.push_back(shapley_kernel_weight(F, s));
  }
  return c;
}

// Sizes drawn with probability proportional to the total kernel mass of
// each size, (F-1)/(s(F-s)); members uniform within a size. Equal weights.
inline Coalitions sample(int F, int budget, Rng& rng) {
  std::vector<double> mass;
  for (int s = 1; s < F; ++s) mass.push_back(static_cast<double>(F - 1) / (s * static_cast<double>(F - s)));
  std::discrete_distribution<int> size_dist(mass.begin(), mass.end());
  std::vector<int> idx(static_cast<std::size_t>(F));
  Coalitions c;
  for (int k = 0; k < budget; ++k) {
    const int s = size_dist(rng) + 1;
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<char> m(static_cast<std::size_t>(F), 0);
    for (int i = 0; i < s; ++i) m[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 1;
    c.masks.push_back(std::move(m));
    c.weights.push_back(1.0);
  }
  return c;
}

inline Eigen::VectorXd eval_chunked(const BatchFn& f, const Eigen::MatrixXd& rows, std::size_t chunk) {
  Eigen::VectorXd out(rows.rows());
  for (Eigen::Index s = 0; s < rows.rows(); s += static_cast<Eigen::Index>(chunk)) {
    const Eigen::Index n = std::min<Eigen::Index>(static_cast<Eigen::Index>(chunk), rows.rows() - s);
    const Eigen::VectorXd part = f(rows.middleRows(s, n));
    if (part.size() != n) throw ShapeError("kernel_shap: model returned the wrong number of outputs");
    out.segment(s, n) = part;
  }
  return out;
}

}  // namespace shap_detail

// Shapley values for each instance row. Absent features take background
// values and the output is averaged over the background set; the weighted
// least-squares fit is constrained so that sum(phi) = f(x) - base_value.
inline std::vector<Attribution> kernel_shap(const BatchFn& f, const Eigen::MatrixXd& background,
                                            const Eigen::MatrixXd& instances,
                                            const std::vector<std::string>& names = {},
                                            const KernelShapConfig& cfg = {}) {
  const Eigen::Index F = background.cols();
  if (F < 1) throw ContractError("kernel_shap: need at least one feature");
  if (background.rows() < 1) throw ContractError("kernel_shap: empty background");
  if (instances.cols() != F) throw ShapeError("kernel_shap: instance width differs from background");
  if (!names.empty() && static_cast<Eigen::Index>(names.size()) != F)
    throw ShapeError("kernel_shap: feature name count differs from width");
  const double base = shap_detail::eval_chunked(f, background, cfg.eval_chunk).mean();
  const Eigen::Index B = background.rows();
  const int Fi = static_cast<int>(F);
  shap_detail::Coalitions shared;
  const bool full = Fi <= cfg.full_enumeration_max;
  if (full && Fi > 1) shared = shap_detail::enumerate(Fi);

  std::vector<Attribution> out(static_cast<std::size_t>(instances.rows()));
  parallel_for(out.size(), resolve_jobs(cfg.jobs), [&](std::size_t n) {
    const Eigen::RowVectorXd x = instances.row(static_cast<Eigen::Index>(n));
    Attribution a;
    a.feature_names = names;
    a.instance = static_cast<int>(n);
    a.base_value = base;
    a.fx = shap_detail::eval_chunked(f, x, 1)(0);
    const double gap = a.fx - base;
    if (Fi == 1) {
      a.phi = {gap};
      out[n] = std::move(a);
      return;
    }
    shap_detail::Coalitions sampled;
    if (!full) {
      Rng rng(mix_seed(cfg.seed, n));
      sampled = shap_detail::sample(Fi, cfg.n_coalitions, rng);
    }
    const auto& co = full ? shared : sampled;
    const auto Z = static_cast<Eigen::Index>(co.masks.size());

    // v(z): mean over background rows with the coalition copied from x
    Eigen::MatrixXd rows(Z * B, F);
    for (Eigen::Index z = 0; z < Z; ++z)
      for (Eigen::Index b = 0; b < B; ++b) {
        auto r = rows.row(z * B + b);
        r = background.row(b);
        for (Eigen::Index i = 0; i < F; ++i)
          if (co.masks[static_cast<std::size_t>(z)][static_cast<std::size_t>(i)]) r(i) = x(i);
      }
    const Eigen::VectorXd fv = shap_detail::eval_chunked(f, rows, cfg.eval_chunk);

    // Eliminate phi_F through the constraint, then solve the normal equations.
    const Eigen::Index P = F - 1;
    Eigen::MatrixXd AtWA = Eigen::MatrixXd::Zero(P, P);
    Eigen::VectorXd AtWy = Eigen::VectorXd::Zero(P);
    Eigen::VectorXd arow(P);
    for (Eigen::Index z = 0; z < Z; ++z) {
      const auto& m = co.masks[static_cast<std::size_t>(z)];
      const double vz = fv.segment(z * B, B).mean();
      const double zl = m[static_cast<std::size_t>(P)];
      const double y = vz - base - zl * gap;
      for (Eigen::Index i = 0; i < P; ++i) arow(i) = static_cast<double>(m[static_cast<std::size_t>(i)]) - zl;
      const double w = co.weights[static_cast<std::size_t>(z)];
      AtWA.noalias() += w * arow * arow.transpose();
      AtWy.noalias() += w * y * arow;
    }
    Eigen::VectorXd sol;
    const Eigen::FullPivLU<Eigen::MatrixXd> lu(AtWA);
    if (lu.rank() < P) {
      warn("kernel_shap: singular weighted system, using ridge " + std::to_string(cfg.ridge));
      sol = (AtWA + cfg.ridge * Eigen::MatrixXd::Identity(P, P)).ldlt().solve(AtWy);
    } else {
      sol = lu.solve(AtWy);
    }
    a.phi.assign(sol.data(), sol.data() + P);
    a.phi.push_back(gap - sol.sum());
    out[n] = std::move(a);
  });
  return out;
}

// Batch function for a trained model: each aggregated row is broadcast back
// to a constant window and the first horizon output is returned.
template <class T>
BatchFn model_batch_fn(ModelParams<T>& params) {
  return [&params](const Eigen::MatrixXd& rows) {
    const auto W = static_cast<std::size_t>(params.config.window);
    const auto F = static_cast<std::size_t>(rows.cols());
    const auto N = static_cast<std::size_t>(rows.rows());
    std::vector<T> v(N * W * F);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t t = 0; t < W; ++t)
        for (std::size_t f = 0; f < F; ++f)
          v[(n * W + t) * F + f] = static_cast<T>(std::clamp(rows(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(f)), 0.0, 1.0));
    ad::NoGradGuard guard;
    const auto y = run_model(params, ad::Tensor<T>::from({N, W, F}, std::move(v))).yhat;
    const auto D = static_cast<std::size_t>(params.config.horizon);
    Eigen::VectorXd out(static_cast<Eigen::Index>(N));
    for (std::size_t n = 0; n < N; ++n) out(static_cast<Eigen::Index>(n)) = static_cast<double>(y.values()[n * D]);
    return out;
  };
}

// Aggregated rows for a set of windows.
inline Eigen::MatrixXd aggregate_windows(const std::vector<WindowSample>& samples,
                                         const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw ContractError("aggregate_windows: no windows");
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), samples[idx[0]].x.cols());
  for (std::size_t r = 0; r < idx.size(); ++r)
    out.row(static_cast<Eigen::Index>(r)) = aggregate_temporal(samples[idx[r]].x).transpose();
  return out;
}

// Explains a trained model on `targets`: background rows are a seeded sample
// (without replacement) of `pool`, instances are evenly spaced targets.
template <class T>
std::vector<Attribution> explain_windows(ModelParams<T>& model, const WindowSet& pool, const WindowSet& targets,
                                         const std::vector<std::string>& names, int n_background = 50,
                                         int n_instances = 100, const KernelShapConfig& cfg = {}) {
  if (pool.empty() || targets.empty()) throw ContractError("explain_windows: empty window set");
  if (n_background < 1 || n_instances < 1) throw ConfigError("sample counts must be >= 1", "background");
  std::vector<std::size_t> bg(pool.size());
  std::iota(bg.begin(), bg.end(), std::size_t{0});
  Rng rng(mix_seed(cfg.seed, 31));
  std::shuffle(bg.begin(), bg.end(), rng);
  bg.resize(std::min(bg.size(), static_cast<std::size_t>(n_background)));
  std::sort(bg.begin(), bg.end());
  const std::size_t n = std::min(targets.size(), static_cast<std::size_t>(n_instances));
  std::vector<std::size_t> inst;
  for (std::size_t k = 0; k < n; ++k) inst.push_back(k * targets.size() / n);
  return kernel_shap(model_batch_fn(model), aggregate_windows(pool.samples, bg),
                     aggregate_windows(targets.samples, inst), names, cfg);
}

struct ShapSummary {
  std::vector<std::string> feature_names;
  std::vector<double> mean_abs, signed_mean;
  std::vector<int> ranking;  // by mean_abs descending, ties to the lower index
};

inline std::vector<int> rank_by_magnitude(const std::vector<double>& v) {
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return v[static_cast<std::size_t>(a)] > v[static_cast<std::size_t>(b)];
  });
  return idx;
}

inline ShapSummary shap_summary(const std::vector<Attribution>& attrs) {
  if (attrs.empty()) throw ContractError("shap_summary: no attributions");
  const std::size_t F = attrs[0].phi.size();
  ShapSummary s;
  s.feature_names = attrs[0].feature_names;
  s.mean_abs.assign(F, 0.0);
  s.signed_mean.assign(F, 0.0);
  for (const auto& a : attrs) {
    if (a.phi.size() != F) throw ShapeError("shap_summary: attribution widths differ");
    for (std::size_t i = 0; i < F; ++i) {
      s.mean_abs[i] += std::abs(a.phi[i]);
      s.signed_mean[i] += a.phi[i];
    }
  }
  for (std::size_t i = 0; i < F; ++i) {
    s.mean_abs[i] /= static_cast<double>(attrs.size());
    s.signed_mean[i] /= static_cast<double>(attrs.size());
  }
  s.ranking = rank_by_magnitude(s.mean_abs);
  return s;
}

// Cohort level: plain average of subject-level summaries.
inline ShapSummary cohort_summary(const std::vector<ShapSummary>& subjects) {
  if (subjects.empty()) throw ContractError("cohort_summary: no subjects");
  ShapSummary s = subjects[0];
  for (std::size_t k = 1; k < subjects.size(); ++k) {
    if (subjects[k].mean_abs.size() != s.mean_abs.size())
      throw ShapeError("cohort_summary: summaries have different widths");
    for (std::size_t i = 0; i < s.mean_abs.size(); ++i) {
      s.mean_abs[i] += subjects[k].mean_abs[i];
      s.signed_mean[i] += subjects[k].signed_mean[i];
    }
  }
  for (std::size_t i = 0; i < s.mean_abs.size(); ++i) {
    s.mean_abs[i] /= static_cast<double>(subjects.size());
    s.signed_mean[i] /= static_cast<double>(subjects.size());
  }
  s.ranking = rank_by_magnitude(s.mean_abs);
  return s;
}

inline void write_shap_csv(const ShapSummary& s, std::ostream& out) {
  out << "feature,mean_abs,signed_mean\n";
  for (int i : s.ranking) {
    const auto k = static_cast<std::size_t>(i);
    out << (s.feature_names.empty() ? "f" + std::to_string(i) : s.feature_names[k]) << ','
        << format_double(s.mean_abs[k]) << ',' << format_double(s.signed_mean[k]) << '\n';
  }
}

}  // namespace adaptcast
