#pragma once

// Phase 1 (supervised training with an optional adversarial domain term),
// Phase 2 (label-free test-time adaptation) and Phase 3 (inference).

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "adaptcast/common.hpp"
#include "adaptcast/model.hpp"
#include "adaptcast/preprocess.hpp"
#include "adaptcast/tensor.hpp"

namespace adaptcast {

enum class AdaptMode { kNone, kTrainOnly, kTestOnly, kBoth };
enum class TtaMethod { kConsistency, kEntropy, kTemporal };
enum class MainLoss { kMse, kRmse };

inline const char* to_string(AdaptMode m) {
  switch (m) {
    case AdaptMode::kNone: return "none";
    case AdaptMode::kTrainOnly: return "train-only";
    case AdaptMode::kTestOnly: return "test-only";
    case AdaptMode::kBoth: return "both";
  }
  return "?";
}
inline AdaptMode parse_adapt_mode(const std::string& s) {
  if (s == "none") return AdaptMode::kNone;
  if (s == "train-only") return AdaptMode::kTrainOnly;
  if (s == "test-only") return AdaptMode::kTestOnly;
  if (s == "both") return AdaptMode::kBoth;
  throw ConfigError("unknown mode '" + s + "'", "mode");
}
inline const char* to_string(TtaMethod m) {
  switch (m) {
    case TtaMethod::kConsistency: return "consistency";
    case TtaMethod::kEntropy: return "entropy";
    case TtaMethod::kTemporal: return "temporal";
  }
  return "?";
}
inline TtaMethod parse_tta_method(const std::string& s) {
  if (s == "consistency") return TtaMethod::kConsistency;
  if (s == "entropy") return TtaMethod::kEntropy;
  if (s == "temporal") return TtaMethod::kTemporal;
  throw ConfigError("unknown tta_method '" + s + "'", "tta_method");
}
inline const char* to_string(MainLoss m) { return m == MainLoss::kMse ? "mse" : "rmse"; }
inline MainLoss parse_main_loss(const std::string& s) {
  if (s == "mse") return MainLoss::kMse;
  if (s == "rmse") return MainLoss::kRmse;
  throw ConfigError("unknown main_loss '" + s + "'", "main_loss");
}

inline const std::vector<AdaptMode>& all_modes() {
  static const std::vector<AdaptMode> m = {AdaptMode::kNone, AdaptMode::kTrainOnly,
                                           AdaptMode::kTestOnly, AdaptMode::kBoth};
  return m;
}

struct AdaptConfig {
  AdaptMode mode = AdaptMode::kBoth;
  double alpha = 1.0;
  double lr = 1e-3;
  double lr_tta = 1e-4;
  int tta_epochs = 10;
  TtaMethod tta_method = TtaMethod::kConsistency;
  std::vector<double> noise_levels = {0.01, 0.02};
  double confidence_threshold = 0.9;
  int patience = 30;
  double min_delta = 1e-4;
  double smoothing_beta = 0.1;
  int max_epochs = 100;
  int batch_size = 16;
  MainLoss main_loss = MainLoss::kMse;
  bool tta_norm_only = true;  // adapt normalization affine terms only
  std::uint64_t seed = 0;

  bool uses_domain() const { return mode == AdaptMode::kTrainOnly || mode == AdaptMode::kBoth; }
  bool uses_tta() const { return mode == AdaptMode::kTestOnly || mode == AdaptMode::kBoth; }
  double effective_alpha() const { return uses_domain() ? alpha : 0.0; }

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0,1]", "alpha");
    if (!(lr > 0)) throw ConfigError("lr must be > 0", "lr");
    if (!(lr_tta > 0)) throw ConfigError("lr_tta must be > 0", "lr_tta");
    if (tta_epochs < 1) throw ConfigError("tta_epochs must be >= 1", "tta_epochs");
    if (noise_levels.size() != 2 || !(noise_levels[0] > 0) || !(noise_levels[1] > 0))
      throw ConfigError("noise_levels must hold two positive values", "noise_levels");
    if (!(confidence_threshold > 0))
      throw ConfigError("confidence_threshold must be > 0", "confidence_threshold");
    if (patience < 1) throw ConfigError("patience must be >= 1", "patience");
    if (!(min_delta >= 0)) throw ConfigError("min_delta must be >= 0", "min_delta");
    if (!(smoothing_beta > 0 && smoothing_beta <= 1))
      throw ConfigError("smoothing_beta must be in (0,1]", "smoothing_beta");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1", "max_epochs");
    if (batch_size != 8 && batch_size != 16 && batch_size != 32)
      throw ConfigError("batch_size must be in {8,16,32}", "batch_size");
  }
};

inline void to_json(nlohmann::json& j, const AdaptConfig& c) {
  j = {{"mode", to_string(c.mode)},
       {"alpha", c.alpha},
       {"lr", c.lr},
       {"lr_tta", c.lr_tta},
       {"tta_epochs", c.tta_epochs},
       {"tta_method", to_string(c.tta_method)},
       {"noise_levels", c.noise_levels},
       {"confidence_threshold", c.confidence_threshold},
       {"patience", c.patience},
       {"min_delta", c.min_delta},
       {"smoothing_beta", c.smoothing_beta},
       {"max_epochs", c.max_epochs},
       {"batch_size", c.batch_size},
       {"main_loss", to_string(c.main_loss)},
       {"tta_norm_only", c.tta_norm_only},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, AdaptConfig& c) {
  c = AdaptConfig{};
  if (j.contains("mode")) c.mode = parse_adapt_mode(j["mode"].get<std::string>());
  if (j.contains("tta_method")) c.tta_method = parse_tta_method(j["tta_method"].get<std::string>());
  if (j.contains("main_loss")) c.main_loss = parse_main_loss(j["main_loss"].get<std::string>());
  c.alpha = j.value("alpha", c.alpha);
  c.lr = j.value("lr", c.lr);
  c.lr_tta = j.value("lr_tta", c.lr_tta);
  c.tta_epochs = j.value("tta_epochs", c.tta_epochs);
  c.noise_levels = j.value("noise_levels", c.noise_levels);
  c.confidence_threshold = j.value("confidence_threshold", c.confidence_threshold);
  c.patience = j.value("patience", c.patience);
  c.min_delta = j.value("min_delta", c.min_delta);
  c.smoothing_beta = j.value("smoothing_beta", c.smoothing_beta);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.tta_norm_only = j.value("tta_norm_only", c.tta_norm_only);
  c.seed = j.value("seed", c.seed);
}

// ---------------------------------------------------------------------------
// Loss

// main(yhat, y) + alpha * CE(dhat, d). The domain term is part of the graph
// whenever dhat is given, so alpha = 0 contributes exact zeros.
template <class T>
ad::Tensor<T> combined_loss(const ad::Tensor<T>& yhat, const ad::Tensor<T>& y,
                            const ad::Tensor<T>& dhat, std::span<const int> d, double alpha,
                            MainLoss main = MainLoss::kMse) {
  ad::Tensor<T> loss = ad::mse_loss(yhat, y);
  if (main == MainLoss::kRmse) loss = ad::sqrt(loss);
  if (dhat.defined())
    loss = ad::add(loss, ad::scale(ad::cross_entropy(dhat, d), static_cast<T>(alpha)));
  return loss;
}

// ---------------------------------------------------------------------------
// Early stopping on the exponentially smoothed validation loss.

class EarlyStopper {
 public:
  EarlyStopper(double beta, int patience, double min_delta)
      : beta_(beta), patience_(patience), min_delta_(min_delta) {}

  // Feeds the raw loss of the next epoch; true when it is the new best.
  bool observe(double raw) {
    const double s = smoothed_.empty() ? raw : beta_ * raw + (1.0 - beta_) * smoothed_.back();
    smoothed_.push_back(s);
    const int epoch = static_cast<int>(smoothed_.size()) - 1;
    if (epoch == 0 || best_ - s >= min_delta_) {
      best_ = s;
      best_epoch_ = epoch;
      wait_ = 0;
      return true;
    }
    ++wait_;
    return false;
  }
  bool should_stop() const { return wait_ >= patience_; }
  double best() const { return best_; }
  int best_epoch() const { return best_epoch_; }
  const std::vector<double>& smoothed() const { return smoothed_; }

 private:
  double beta_;
  int patience_;
  double min_delta_;
  std::vector<double> smoothed_;
  double best_ = 0.0;
  int best_epoch_ = -1;
  int wait_ = 0;
};

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::vector<double> smoothed_val;
  int stop_epoch = -1;  // last epoch run (0-based)
  int best_epoch = -1;  // restored checkpoint
  double best_smoothed = 0.0;
  bool early_stopped = false;
};

inline void to_json(nlohmann::json& j, const TrainHistory& h) {
  j = {{"train_loss", h.train_loss},       {"val_loss", h.val_loss},
       {"smoothed_val", h.smoothed_val},   {"stop_epoch", h.stop_epoch},
       {"best_epoch", h.best_epoch},       {"best_smoothed", h.best_smoothed},
       {"early_stopped", h.early_stopped}};
}

// Generic epoch loop: run_epoch(e) returns (train loss, raw val loss);
// on_best() snapshots, restore_best() is called once at the end.
inline TrainHistory fit_with_early_stopping(int max_epochs, double beta, int patience,
                                            double min_delta,
                                            const std::function<std::pair<double, double>(int)>& run_epoch,
                                            const std::function<void()>& on_best,
                                            const std::function<void()>& restore_best) {
  EarlyStopper stopper(beta, patience, min_delta);
  TrainHistory h;
  for (int e = 0; e < max_epochs; ++e) {
    const auto [train, val] = run_epoch(e);
    h.train_loss.push_back(train);
    h.val_loss.push_back(val);
    if (stopper.observe(val)) on_best();
    h.stop_epoch = e;
    if (stopper.should_stop()) {
      h.early_stopped = true;
      break;
    }
  }
  h.smoothed_val = stopper.smoothed();
  h.best_epoch = stopper.best_epoch();
  h.best_smoothed = stopper.best();
  restore_best();
  return h;
}

// Windows fed to one Phase-1 run, plus the domain count for the head.
struct FoldWindows {
  WindowSet train, val, test;
};

template <class T>
double validation_loss(ModelParams<T>& model, const WindowSet& val) {
  const Eigen::MatrixXd pred = predict(model, val.samples);
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < val.samples.size(); ++i)
    for (Eigen::Index j = 0; j < pred.cols(); ++j) {
      const double d = pred(static_cast<Eigen::Index>(i), j) - val.samples[i].y(j);
      s += d * d;
      ++n;
    }
  return s / static_cast<double>(n);
}

// Phase 1. Mutates `model` into the restored best-smoothed checkpoint.
template <class T>
TrainHistory train_phase1(ModelParams<T>& model, const WindowSet& train, const WindowSet& val,
                          const AdaptConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw ConfigError("train_phase1: empty training set", "train");
  if (val.empty()) throw ConfigError("train_phase1: empty validation set", "val");
  const double alpha = cfg.effective_alpha();
  const bool domain = cfg.uses_domain() && model.config.kind == ModelKind::kAdaptive;
  if (cfg.uses_domain() && model.config.kind != ModelKind::kAdaptive)
    throw ConfigError("the LSTM baseline has no domain head; use mode none", "mode");
  for (auto& [name, s] : model.batchnorm) s.frozen = false;

  Rng rng(mix_seed(cfg.seed, 1));
  ad::AdamState<T> adam;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<int> labels;
  ModelParams<T> best = model.clone();
  auto span = std::span<ad::NamedTensor<T>>(model.tensors);

  auto run_epoch = [&](int) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    for (std::size_t s = 0; s < order.size(); s += bs) {
      const std::span<const std::size_t> idx(order.data() + s, std::min(bs, order.size() - s));
      const auto x = batch_inputs<T>(train.samples, idx);
      const auto y = batch_targets<T>(train.samples, idx);
      ForwardOptions<T> opt;
      opt.train = true;
      opt.return_domain = domain;
      opt.rng = &rng;
      const auto out = run_model(model, x, opt);
      labels.clear();
      for (auto i : idx) labels.push_back(train.samples[i].domain);
      const auto loss = combined_loss(out.yhat, y, out.dhat, labels, alpha, cfg.main_loss);
      ad::backward(loss);
      ad::adam_step(span, adam, cfg.lr);
      ad::zero_grad(span);
      total += static_cast<double>(loss.item());
      ++batches;
    }
    return std::pair{total / static_cast<double>(batches), validation_loss(model, val)};
  };
  return fit_with_early_stopping(
      cfg.max_epochs, cfg.smoothing_beta, cfg.patience, cfg.min_delta, run_epoch,
      [&] { best.assign_from(model); }, [&] { model.assign_from(best); });
}

// ---------------------------------------------------------------------------
// Test-time adaptation. The windows type carries inputs only.

class UnlabeledWindows {
 public:
  static UnlabeledWindows from(const WindowSet& ws) {
    UnlabeledWindows u;
    u.stride_ = ws.stride;
    for (const auto& s : ws.samples) {
      WindowSample c;
      c.x = s.x;
      c.t0 = s.t0;
      c.domain = -1;
      u.samples_.push_back(std::move(c));
    }
    std::stable_sort(u.samples_.begin(), u.samples_.end(),
                     [](const WindowSample& a, const WindowSample& b) { return a.t0 < b.t0; });
    return u;
  }
  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  std::size_t stride() const { return stride_; }
  std::size_t start(std::size_t i) const { return samples_[i].t0; }
  const std::vector<WindowSample>& inputs() const { return samples_; }

 private:
  std::vector<WindowSample> samples_;
  std::size_t stride_ = 1;
};

struct TtaHistory {
  std::string method;
  std::vector<double> epoch_loss;  // running mean while adapting
  std::vector<double> eval_loss;   // fixed-noise objective before and after each epoch
  bool skipped = false;
  std::string note;
};

inline void to_json(nlohmann::json& j, const TtaHistory& h) {
  j = {{"method", h.method}, {"epoch_loss", h.epoch_loss}, {"eval_loss", h.eval_loss},
       {"skipped", h.skipped}, {"note", h.note}};
}

// (1/3) * [MSE(a,b) + MSE(a,c) + MSE(b,c)]
template <class T>
ad::Tensor<T> pairwise_consistency(const ad::Tensor<T>& a, const ad::Tensor<T>& b,
                                   const ad::Tensor<T>& c) {
  return ad::scale(ad::add(ad::add(ad::mse_loss(a, b), ad::mse_loss(a, c)), ad::mse_loss(b, c)),
                   static_cast<T>(1.0 / 3.0));
}

// Mean over consecutive pairs of squared differences on the overlapping
// horizon entries, plus the first-step agreement between each window and
// its one-step-shifted neighbour. `pairs` index rows of yhat.
template <class T>
ad::Tensor<T> temporal_smoothness(const ad::Tensor<T>& yhat,
                                  const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  using namespace ad;
  const std::size_t delta = yhat.dim(1);
  std::vector<Tensor<T>> a, b;
  for (auto [i, j] : pairs) {
    a.push_back(slice(yhat, 0, i, 1));
    b.push_back(slice(yhat, 0, j, 1));
  }
  const Tensor<T> A = concat(a, 0), Bn = concat(b, 0);  // [P, delta]
  Tensor<T> loss = mse_loss(slice(A, 1, 0, 1), slice(Bn, 1, 0, 1));
  if (delta > 1) loss = add(loss, mse_loss(slice(A, 1, 1, delta - 1), slice(Bn, 1, 0, delta - 1)));
  return loss;
}

namespace adapt_detail {

template <class T>
ad::Tensor<T> add_noise(const ad::Tensor<T>& x, double sd, Rng& rng) {
  std::normal_distribution<double> n(0.0, sd);
  std::vector<T> v = x.values();
  for (auto& e : v) e = static_cast<T>(static_cast<double>(e) + n(rng));
  return ad::Tensor<T>::from(x.shape(), std::move(v));
}

// Per-window spread of the (original, aug1, aug2) predictions, averaged over
// the horizon. Population standard deviation across the three.
template <class T>
std::vector<double> prediction_spread(const ad::Tensor<T>& o, const ad::Tensor<T>& a,
                                      const ad::Tensor<T>& b) {
  const std::size_t B = o.dim(0), D = o.dim(1);
  std::vector<double> out(B, 0.0);
  for (std::size_t r = 0; r < B; ++r) {
    for (std::size_t j = 0; j < D; ++j) {
      const double p[3] = {static_cast<double>(o.values()[r * D + j]),
                           static_cast<double>(a.values()[r * D + j]),
                           static_cast<double>(b.values()[r * D + j])};
      const double m = (p[0] + p[1] + p[2]) / 3.0;
      double v = 0.0;
      for (double q : p) v += (q - m) * (q - m);
      out[r] += std::sqrt(v / 3.0);
    }
    out[r] /= static_cast<double>(D);
  }
  return out;
}

// Batches for one epoch. Temporal batches overlap by one window so every
// consecutive pair is seen exactly once.
inline std::vector<std::vector<std::size_t>> tta_batches(std::size_t n, std::size_t bs, bool temporal,
                                                         Rng* shuffle) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::vector<std::size_t>> out;
  if (temporal) {
    for (std::size_t s = 0; s + 1 < n; s += bs)
      out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                       order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + bs + 1)));
    return out;
  }
  if (shuffle) std::shuffle(order.begin(), order.end(), *shuffle);
  for (std::size_t s = 0; s < n; s += bs)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + bs)));
  return out;
}

template <class T>
struct TtaObjective {
  ModelParams<T>& model;
  const UnlabeledWindows& windows;
  const AdaptConfig& cfg;

  ad::Tensor<T> yhat(const ad::Tensor<T>& x) {
    ForwardOptions<T> opt;  // eval mode: dropout off, batchnorm on running stats
    return run_model(model, x, opt).yhat;
  }

  // Loss of one batch; undefined tensor when nothing contributes.
  ad::Tensor<T> batch_loss(const std::vector<std::size_t>& idx, Rng& noise) {
    using namespace ad;
    const auto& s = windows.inputs();
    const Tensor<T> x = batch_inputs<T>(s, idx);
    if (cfg.tta_method == TtaMethod::kTemporal) {
      std::vector<std::pair<std::size_t, std::size_t>> pairs;
      for (std::size_t k = 0; k + 1 < idx.size(); ++k)
        if (windows.start(idx[k + 1]) == windows.start(idx[k]) + windows.stride()) pairs.emplace_back(k, k + 1);
      if (pairs.empty()) return {};
      return temporal_smoothness(yhat(x), pairs);
    }
    const Tensor<T> x1 = add_noise(x, cfg.noise_levels[0], noise);
    const Tensor<T> x2 = add_noise(x, cfg.noise_levels[1], noise);
    const Tensor<T> yo = yhat(x), y1 = yhat(x1), y2 = yhat(x2);
    if (cfg.tta_method == TtaMethod::kConsistency) return pairwise_consistency(yo, y1, y2);
    // entropy proxy: confident windows pull augmented predictions to sg(yo)
    const auto spread = prediction_spread(yo, y1, y2);
    const std::size_t B = idx.size(), D = yo.dim(1);
    std::vector<T> mask(B * D, T(0));
    std::size_t pass = 0;
    for (std::size_t r = 0; r < B; ++r)
      if (1.0 / (1.0 + spread[r]) >= cfg.confidence_threshold) {
        ++pass;
        for (std::size_t j = 0; j < D; ++j) mask[r * D + j] = T(1);
      }
    if (pass == 0) return {};
    const Tensor<T> m = Tensor<T>::from({B, D}, std::move(mask));
    const Tensor<T> target = detach(yo);
    const Tensor<T> l1 = sum(mul(m, square(sub(y1, target))));
    const Tensor<T> l2 = sum(mul(m, square(sub(y2, target))));
    return scale(add(l1, l2), static_cast<T>(0.5 / static_cast<double>(pass * D)));
  }

  // Objective over all windows with a fixed noise stream; no gradients.
  double evaluate(std::uint64_t noise_seed) {
    ad::NoGradGuard guard;
    Rng noise(noise_seed);
    const auto batches = tta_batches(windows.size(), static_cast<std::size_t>(cfg.batch_size),
                                     cfg.tta_method == TtaMethod::kTemporal, nullptr);
    double total = 0.0;
    std::size_t counted = 0;
    for (const auto& b : batches) {
      const auto l = batch_loss(b, noise);
      if (!l.defined()) continue;
      total += static_cast<double>(l.item());
      ++counted;
    }
    return counted ? total / static_cast<double>(counted) : 0.0;
  }

  bool any_confident() {
    ad::NoGradGuard guard;
    Rng noise(mix_seed(cfg.seed, 7));
    for (const auto& b : tta_batches(windows.size(), static_cast<std::size_t>(cfg.batch_size), false, nullptr))
      if (batch_loss(b, noise).defined()) return true;
    return false;
  }
};

}  // namespace adapt_detail

// Parameters updated during adaptation: the affine terms of every
// normalization layer, or everything when norm_only is off.
template <class T>
std::vector<ad::NamedTensor<T>> tta_parameters(const ModelParams<T>& model, bool norm_only) {
  std::vector<ad::NamedTensor<T>> out;
  auto ends_with = [](const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  for (const auto& p : model.tensors)
    if (!norm_only || ends_with(p.name, ".gamma") || ends_with(p.name, ".beta")) out.push_back(p);
  return out;
}

// Phase 2, one of the three objectives. Mutates `model`. Batchnorm running
// statistics stay frozen while the affine terms are trained.
template <class T>
TtaHistory test_time_adapt(ModelParams<T>& model, const UnlabeledWindows& windows,
                           const AdaptConfig& cfg) {
  cfg.validate();
  if (windows.empty()) throw ConfigError("test-time adaptation: empty test set", "test");
  TtaHistory h;
  h.method = to_string(cfg.tta_method);
  adapt_detail::TtaObjective<T> obj{model, windows, cfg};
  if (cfg.tta_method == TtaMethod::kTemporal && windows.size() < 2) {
    warn("tta_temporal: fewer than 2 windows, model left unchanged");
    h.skipped = true;
    h.note = "fewer than 2 windows";
    return h;
  }
  if (cfg.tta_method == TtaMethod::kEntropy && !obj.any_confident()) {
    warn("tta_entropy: no window reaches the confidence threshold, model left unchanged");
    h.skipped = true;
    h.note = "no confident window";
    return h;
  }
  for (auto& [name, s] : model.batchnorm) s.frozen = true;
  const std::uint64_t eval_seed = mix_seed(cfg.seed, 11);
  Rng noise(mix_seed(cfg.seed, 3));
  Rng shuffle(mix_seed(cfg.seed, 5));
  ad::AdamState<T> adam;
  auto trainable = tta_parameters(model, cfg.tta_norm_only);
  auto span = std::span<ad::NamedTensor<T>>(trainable);
  h.eval_loss.push_back(obj.evaluate(eval_seed));
  for (int e = 0; e < cfg.tta_epochs; ++e) {
    double total = 0.0;
    std::size_t counted = 0;
    for (const auto& b : adapt_detail::tta_batches(windows.size(), static_cast<std::size_t>(cfg.batch_size),
                                                   cfg.tta_method == TtaMethod::kTemporal, &shuffle)) {
      const auto loss = obj.batch_loss(b, noise);
      if (!loss.defined()) continue;
      ad::backward(loss);
      ad::adam_step(span, adam, cfg.lr_tta);
      model.zero_grad();
      total += static_cast<double>(loss.item());
      ++counted;
    }
    h.epoch_loss.push_back(counted ? total / static_cast<double>(counted) : 0.0);
    h.eval_loss.push_back(obj.evaluate(eval_seed));
  }
  for (auto& [name, s] : model.batchnorm) s.frozen = false;
  return h;
}

template <class T>
TtaHistory tta_consistency(ModelParams<T>& model, const UnlabeledWindows& w, AdaptConfig cfg) {
  cfg.tta_method = TtaMethod::kConsistency;
  return test_time_adapt(model, w, cfg);
}
template <class T>
TtaHistory tta_entropy(ModelParams<T>& model, const UnlabeledWindows& w, AdaptConfig cfg) {
  cfg.tta_method = TtaMethod::kEntropy;
  return test_time_adapt(model, w, cfg);
}
template <class T>
TtaHistory tta_temporal(ModelParams<T>& model, const UnlabeledWindows& w, AdaptConfig cfg) {
  cfg.tta_method = TtaMethod::kTemporal;
  return test_time_adapt(model, w, cfg);
}

// Mean prediction spread across (original, aug1, aug2) over all windows.
template <class T>
double mean_prediction_spread(ModelParams<T>& model, const UnlabeledWindows& windows,
                              const AdaptConfig& cfg, std::uint64_t noise_seed) {
  ad::NoGradGuard guard;
  Rng noise(noise_seed);
  adapt_detail::TtaObjective<T> obj{model, windows, cfg};
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& b : adapt_detail::tta_batches(windows.size(), 64, false, nullptr)) {
    const auto x = batch_inputs<T>(windows.inputs(), b);
    const auto x1 = adapt_detail::add_noise(x, cfg.noise_levels[0], noise);
    const auto x2 = adapt_detail::add_noise(x, cfg.noise_levels[1], noise);
    for (double s : adapt_detail::prediction_spread(obj.yhat(x), obj.yhat(x1), obj.yhat(x2))) {
      total += s;
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Modes

template <class T = float>
struct ModeResult {
  AdaptMode mode = AdaptMode::kNone;
  Eigen::MatrixXd test_pred;  // Phase 3, adapted model
  Eigen::MatrixXd val_pred;   // Phase-1 model
  TrainHistory history;
  std::optional<TtaHistory> tta;
  ModelParams<T> model;
};

// Phase 2 + 3 from an already trained Phase-1 model (copied, not mutated).
template <class T>
ModeResult<T> finish_mode(const ModelParams<T>& phase1, const TrainHistory& history,
                          const FoldWindows& fw, const AdaptConfig& cfg) {
  ModeResult<T> r;
  r.mode = cfg.mode;
  r.history = history;
  r.model = phase1.clone();
  r.val_pred = predict(r.model, fw.val.samples);
  if (cfg.uses_tta()) r.tta = test_time_adapt(r.model, UnlabeledWindows::from(fw.test), cfg);
  r.test_pred = predict(r.model, fw.test.samples);
  return r;
}

template <class T = float>
ModeResult<T> run_mode(const FoldWindows& fw, const ModelConfig& mcfg, const AdaptConfig& cfg) {
  cfg.validate();
  if (fw.test.empty()) throw ConfigError("run_mode: empty test set", "test");
  auto model = init_model<T>(mcfg, mix_seed(cfg.seed, 0));
  const auto history = train_phase1(model, fw.train, fw.val, cfg);
  return finish_mode(model, history, fw, cfg);
}

// All four modes on one fold. Phase 1 is shared between modes that train
// identically (none/test-only with alpha 0, train-only/both with alpha).
template <class T = float>
std::map<AdaptMode, ModeResult<T>> run_ablation(const FoldWindows& fw, const ModelConfig& mcfg,
                                                const AdaptConfig& base,
                                                const std::vector<AdaptMode>& modes = all_modes()) {
  std::map<AdaptMode, ModeResult<T>> out;
  std::optional<std::pair<ModelParams<T>, TrainHistory>> plain, adversarial;
  for (AdaptMode m : modes) {
    AdaptConfig cfg = base;
    cfg.mode = m;
    cfg.validate();
    auto& slot = cfg.uses_domain() ? adversarial : plain;
    if (!slot) {
      auto model = init_model<T>(mcfg, mix_seed(cfg.seed, 0));
      auto h = train_phase1(model, fw.train, fw.val, cfg);
      slot.emplace(std::move(model), std::move(h));
    }
    out.emplace(m, finish_mode(slot->first, slot->second, fw, cfg));
  }
  return out;
}

}  // namespace adaptcast
