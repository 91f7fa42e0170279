#pragma once

// The adaptive spatial-temporal forecaster and the plain recurrent baseline.
//
//   x [B,w,F]
//    -> multi-scale conv branches (k = 3, 5, 7, plus k = 3 dilated by 2)
//    -> channel attention gate
//    -> bidirectional LSTM stack
//    -> 8-head self-attention (pre-norm, residual)
//    -> temporal attention pooling  (+ projected mean CNN features)
//    -> regression head [B,delta]    and, via gradient reversal,
//    -> domain head [B,n_domains]

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "adaptcast/common.hpp"
#include "adaptcast/preprocess.hpp"
#include "adaptcast/tensor.hpp"

namespace adaptcast {

enum class ModelKind { kAdaptive, kLstmBaseline };

inline const char* to_string(ModelKind k) {
  return k == ModelKind::kAdaptive ? "adaptive" : "lstm";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "adaptive" || s == "ours") return ModelKind::kAdaptive;
  if (s == "lstm") return ModelKind::kLstmBaseline;
  throw ConfigError("unknown model '" + s + "'", "model");
}

struct ModelConfig {
  ModelKind kind = ModelKind::kAdaptive;
  int conv_layers = 1;
  int cnn_hidden = 16;
  int lstm_layers = 1;
  int lstm_hidden = 64;
  double cnn_dropout = 0.1;
  double lstm_dropout = 0.1;
  bool batchnorm = true;
  int heads = 8;
  std::vector<int> kernel_sizes = {3, 5, 7};
  int dilated_kernel = 3;
  int dilation = 2;
  int channel_reduction = 4;
  int temporal_attention_dim = 64;
  int domain_hidden = 64;
  int window = 3;
  int n_features = 15;
  int horizon = 1;
  int n_domains = 14;

  int branch_count() const { return static_cast<int>(kernel_sizes.size()) + 1; }
  int cnn_channels() const { return branch_count() * cnn_hidden; }
  int sequence_dim() const {
    return kind == ModelKind::kAdaptive ? 2 * lstm_hidden : lstm_hidden;
  }

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    auto in = [](int x, std::initializer_list<int> set) {
      return std::find(set.begin(), set.end(), x) != set.end();
    };
    if (!in(conv_layers, {1, 2})) v.push_back("conv_layers must be in {1,2}");
    if (!in(cnn_hidden, {16, 32, 64})) v.push_back("cnn_hidden must be in {16,32,64}");
    if (!in(lstm_layers, {1, 2, 3})) v.push_back("lstm_layers must be in {1,2,3}");
    if (!in(lstm_hidden, {64, 128, 256})) v.push_back("lstm_hidden must be in {64,128,256}");
    if (!(cnn_dropout >= 0.1 && cnn_dropout <= 0.5)) v.push_back("cnn_dropout must be in [0.1,0.5]");
    if (!(lstm_dropout >= 0.1 && lstm_dropout <= 0.5)) v.push_back("lstm_dropout must be in [0.1,0.5]");
    if (heads != 8) v.push_back("heads must be 8");
    if (heads > 0 && (2 * lstm_hidden) % heads != 0)
      v.push_back("2*lstm_hidden must be divisible by heads");
    if (kernel_sizes != std::vector<int>{3, 5, 7}) v.push_back("kernel_sizes must be {3,5,7}");
    if (dilated_kernel != 3 || dilation != 2) v.push_back("dilated branch must be kernel 3, dilation 2");
    if (window < 1) v.push_back("window must be >= 1");
    if (n_features < 1) v.push_back("n_features must be >= 1");
    if (horizon < 1) v.push_back("horizon must be >= 1");
    if (n_domains < 1) v.push_back("n_domains must be >= 1");
    if (channel_reduction < 1 || cnn_channels() % channel_reduction != 0)
      v.push_back("channel_reduction must divide the CNN channel count");
    return v;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid model config:";
    for (const auto& s : v) msg += " " + s + ";";
    throw ConfigError(msg, "model");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"kind", to_string(c.kind)},
       {"conv_layers", c.conv_layers},
       {"cnn_hidden", c.cnn_hidden},
       {"lstm_layers", c.lstm_layers},
       {"lstm_hidden", c.lstm_hidden},
       {"cnn_dropout", c.cnn_dropout},
       {"lstm_dropout", c.lstm_dropout},
       {"batchnorm", c.batchnorm},
       {"heads", c.heads},
       {"kernel_sizes", c.kernel_sizes},
       {"dilated_kernel", c.dilated_kernel},
       {"dilation", c.dilation},
       {"channel_reduction", c.channel_reduction},
       {"temporal_attention_dim", c.temporal_attention_dim},
       {"domain_hidden", c.domain_hidden},
       {"window", c.window},
       {"n_features", c.n_features},
       {"horizon", c.horizon},
       {"n_domains", c.n_domains}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  if (j.contains("kind")) c.kind = parse_model_kind(j["kind"].get<std::string>());
  c.conv_layers = j.value("conv_layers", c.conv_layers);
  c.cnn_hidden = j.value("cnn_hidden", c.cnn_hidden);
  c.lstm_layers = j.value("lstm_layers", c.lstm_layers);
  c.lstm_hidden = j.value("lstm_hidden", c.lstm_hidden);
  c.cnn_dropout = j.value("cnn_dropout", c.cnn_dropout);
  c.lstm_dropout = j.value("lstm_dropout", c.lstm_dropout);
  c.batchnorm = j.value("batchnorm", c.batchnorm);
  c.heads = j.value("heads", c.heads);
  c.kernel_sizes = j.value("kernel_sizes", c.kernel_sizes);
  c.dilated_kernel = j.value("dilated_kernel", c.dilated_kernel);
  c.dilation = j.value("dilation", c.dilation);
  c.channel_reduction = j.value("channel_reduction", c.channel_reduction);
  c.temporal_attention_dim = j.value("temporal_attention_dim", c.temporal_attention_dim);
  c.domain_hidden = j.value("domain_hidden", c.domain_hidden);
  c.window = j.value("window", c.window);
  c.n_features = j.value("n_features", c.n_features);
  c.horizon = j.value("horizon", c.horizon);
  c.n_domains = j.value("n_domains", c.n_domains);
}

template <class T>
struct ModelParams {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::vector<ad::NamedTensor<T>> tensors;
  std::map<std::string, ad::BatchNormState<T>> batchnorm;

  const ad::Tensor<T>& operator[](const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("model has no parameter '" + name + "'");
    return tensors[it->second].tensor;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.tensor.size();
    return n;
  }

  void add(std::string name, ad::Shape shape, std::vector<T> values) {
    index_[name] = tensors.size();
    tensors.push_back({std::move(name), ad::Tensor<T>::from(std::move(shape), std::move(values), true)});
  }

  // Deep copy: fresh leaves, so optimizer updates on the copy stay local.
  ModelParams clone() const {
    ModelParams out;
    out.config = config;
    out.seed = seed;
    out.batchnorm = batchnorm;
    for (const auto& t : tensors) out.add(t.name, t.tensor.shape(), t.tensor.values());
    return out;
  }

  // Copies values (not identity) from a structurally identical model.
  void assign_from(const ModelParams& other) {
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      auto dst = tensors[i].tensor.mutable_data();
      const auto src = other.tensors[i].tensor.data();
      std::copy(src.begin(), src.end(), dst.begin());
    }
    batchnorm = other.batchnorm;
  }

  void zero_grad() { ad::zero_grad<T>(std::span<ad::NamedTensor<T>>(tensors)); }

  bool operator==(const ModelParams& o) const {
    if (tensors.size() != o.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i].name != o.tensors[i].name ||
          tensors[i].tensor.shape() != o.tensors[i].tensor.shape() ||
          tensors[i].tensor.values() != o.tensors[i].tensor.values())
        return false;
    for (const auto& [k, s] : batchnorm) {
      const auto it = o.batchnorm.find(k);
      if (it == o.batchnorm.end() || it->second.running_mean != s.running_mean ||
          it->second.running_var != s.running_var)
        return false;
    }
    return batchnorm.size() == o.batchnorm.size();
  }

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

namespace model_detail {

template <class T>
struct Initializer {
  ModelParams<T>& p;
  Rng rng;

  void linear(const std::string& name, int in, int out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    uniform(name + ".w", {static_cast<std::size_t>(in), static_cast<std::size_t>(out)}, bound);
    uniform(name + ".b", {static_cast<std::size_t>(out)}, bound);
  }
  void uniform(const std::string& name, ad::Shape shape, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<T> v(ad::numel(shape));
    for (auto& x : v) x = static_cast<T>(u(rng));
    p.add(name, std::move(shape), std::move(v));
  }
  void norm(const std::string& name, int channels, bool with_state) {
    const auto c = static_cast<std::size_t>(channels);
    p.add(name + ".gamma", {c}, std::vector<T>(c, T(1)));
    p.add(name + ".beta", {c}, std::vector<T>(c, T(0)));
    if (with_state) p.batchnorm.emplace(name, ad::BatchNormState<T>(c));
  }
  void lstm(const std::string& name, int in, int hidden) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    const auto H4 = static_cast<std::size_t>(4 * hidden);
    uniform(name + ".wx", {static_cast<std::size_t>(in), H4}, bound);
    uniform(name + ".wh", {static_cast<std::size_t>(hidden), H4}, bound);
    uniform(name + ".b", {H4}, bound);
  }
};

}  // namespace model_detail

// Uniform fan-in initialization, bound 1/sqrt(fan_in); deterministic per seed.
template <class T = float>
ModelParams<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<T> p;
  p.config = cfg;
  p.seed = seed;
  model_detail::Initializer<T> init{p, Rng(seed)};
  const int H = cfg.cnn_hidden;
  const int Hd = cfg.lstm_hidden;
  if (cfg.kind == ModelKind::kAdaptive) {
    std::vector<std::pair<int, int>> branches;
    for (int k : cfg.kernel_sizes) branches.emplace_back(k, 1);
    branches.emplace_back(cfg.dilated_kernel, cfg.dilation);
    for (std::size_t b = 0; b < branches.size(); ++b)
      for (int l = 0; l < cfg.conv_layers; ++l) {
        const std::string base = "conv" + std::to_string(b) + "." + std::to_string(l);
        const int cin = l == 0 ? cfg.n_features : H;
        const int K = branches[b].first;
        const double bound = 1.0 / std::sqrt(static_cast<double>(cin * K));
        init.uniform(base + ".w",
                     {static_cast<std::size_t>(K), static_cast<std::size_t>(cin), static_cast<std::size_t>(H)},
                     bound);
        init.uniform(base + ".b", {static_cast<std::size_t>(H)}, bound);
        if (cfg.batchnorm) init.norm(base + ".bn", H, true);
      }
    const int C = cfg.cnn_channels();
    init.linear("ca.fc1", C, C / cfg.channel_reduction);
    init.linear("ca.fc2", C / cfg.channel_reduction, C);
    for (int l = 0; l < cfg.lstm_layers; ++l)
      for (const char* dir : {"fw", "bw"})
        init.lstm("lstm" + std::to_string(l) + "." + dir, l == 0 ? C : 2 * Hd, Hd);
    const int D = 2 * Hd;
    init.norm("attn.ln", D, false);
    for (const char* n : {"attn.q", "attn.k", "attn.v", "attn.o"}) init.linear(n, D, D);
    init.linear("temporal.proj", D, cfg.temporal_attention_dim);
    init.uniform("temporal.score",
                 {static_cast<std::size_t>(cfg.temporal_attention_dim), 1},
                 1.0 / std::sqrt(static_cast<double>(cfg.temporal_attention_dim)));
    init.linear("residual", C, D);
    init.linear("head", D, cfg.horizon);
    init.linear("domain.fc1", D, cfg.domain_hidden);
    init.linear("domain.fc2", cfg.domain_hidden, cfg.n_domains);
  } else {
    for (int l = 0; l < cfg.lstm_layers; ++l)
      init.lstm("lstm" + std::to_string(l) + ".fw", l == 0 ? cfg.n_features : Hd, Hd);
    init.linear("head", Hd, cfg.horizon);
  }
  return p;
}

template <class T>
struct ForwardOptions {
  bool train = false;
  bool return_domain = false;
  T grl_lambda = T(1);
  Rng* rng = nullptr;  // dropout masks; required when train is set
};

template <class T>
struct ForwardResult {
  ad::Tensor<T> yhat;              // [B, delta]
  ad::Tensor<T> dhat;              // [B, n_domains] when requested
  ad::Tensor<T> pooled;            // [B, D]
  ad::Tensor<T> channel_gates;     // [B, C]
  ad::Tensor<T> self_attention;    // [B*heads, w, w]
  ad::Tensor<T> temporal_weights;  // [B, w]
};

namespace model_detail {

template <class T>
ad::Tensor<T> linear(const ModelParams<T>& p, const std::string& name, const ad::Tensor<T>& x) {
  return ad::add(ad::matmul(x, p[name + ".w"]), p[name + ".b"]);
}

// One LSTM direction over [B, w, in]; returns [B, w, H] in time order.
template <class T>
ad::Tensor<T> lstm_direction(const ModelParams<T>& p, const std::string& name,
                             const ad::Tensor<T>& seq, int hidden, bool reverse) {
  using namespace ad;
  const std::size_t B = seq.dim(0), W = seq.dim(1);
  const auto H = static_cast<std::size_t>(hidden);
  const Tensor<T> xw = add(matmul(seq, p[name + ".wx"]), p[name + ".b"]);  // [B,W,4H]
  std::vector<Tensor<T>> outs(W);
  Tensor<T> h, c;
  for (std::size_t step = 0; step < W; ++step) {
    const std::size_t t = reverse ? W - 1 - step : step;
    Tensor<T> gates = reshape(slice(xw, 1, t, 1), {B, 4 * H});
    if (h.defined()) gates = add(gates, matmul(h, p[name + ".wh"]));
    const Tensor<T> sig = sigmoid(gates);
    const Tensor<T> i = slice(sig, 1, 0, H);
    const Tensor<T> f = slice(sig, 1, H, H);
    const Tensor<T> g = tanh(slice(gates, 1, 2 * H, H));
    const Tensor<T> o = slice(sig, 1, 3 * H, H);
    c = c.defined() ? add(mul(f, c), mul(i, g)) : mul(i, g);
    h = mul(o, tanh(c));
    outs[t] = reshape(h, {B, 1, H});
  }
  return concat(outs, 1);
}

template <class T>
ad::Tensor<T> input_tensor(const ModelConfig& cfg, const ad::Tensor<T>& x) {
  if (x.rank() != 3 || x.dim(1) != static_cast<std::size_t>(cfg.window) ||
      x.dim(2) != static_cast<std::size_t>(cfg.n_features))
    throw ShapeError("forward: expected input [B," + std::to_string(cfg.window) + "," +
                     std::to_string(cfg.n_features) + "], got " + ad::shape_str(x.shape()));
  for (T v : x.values())
    if (!std::isfinite(static_cast<double>(v))) throw ContractError("forward: non-finite input");
  return x;
}

}  // namespace model_detail

template <class T>
ForwardResult<T> forward(ModelParams<T>& params, const ad::Tensor<T>& x_in,
                         const ForwardOptions<T>& opt = {}) {
  using namespace ad;
  const auto& cfg = params.config;
  if (cfg.kind != ModelKind::kAdaptive)
    throw ContractError("forward: use forward_lstm_baseline for the baseline model");
  if (opt.train && (cfg.cnn_dropout > 0 || cfg.lstm_dropout > 0) && opt.rng == nullptr)
    throw ContractError("forward: train mode needs an RNG for dropout");
  const Tensor<T> x = model_detail::input_tensor(cfg, x_in);
  const std::size_t B = x.dim(0), W = x.dim(1);
  Rng dummy(0);
  Rng& rng = opt.rng ? *opt.rng : dummy;

  // (1) multi-scale convolution
  std::vector<std::pair<int, int>> branches;
  for (int k : cfg.kernel_sizes) branches.emplace_back(k, 1);
  branches.emplace_back(cfg.dilated_kernel, cfg.dilation);
  std::vector<Tensor<T>> feats;
  for (std::size_t b = 0; b < branches.size(); ++b) {
    Tensor<T> h = x;
    for (int l = 0; l < cfg.conv_layers; ++l) {
      const std::string base = "conv" + std::to_string(b) + "." + std::to_string(l);
      h = add(conv1d(h, params[base + ".w"], static_cast<std::size_t>(branches[b].second)),
              params[base + ".b"]);
      h = relu(h);
      if (cfg.batchnorm)
        h = batchnorm1d(h, params[base + ".bn.gamma"], params[base + ".bn.beta"],
                        params.batchnorm.at(base + ".bn"), opt.train);
    }
    feats.push_back(dropout(h, cfg.cnn_dropout, opt.train, rng));
  }
  Tensor<T> cnn = concat(feats, 2);  // [B, W, C]
  const auto C = static_cast<std::size_t>(cfg.cnn_channels());

  // (2) channel attention
  const Tensor<T> squeeze = mean(cnn, 1);  // [B, C]
  const Tensor<T> gates =
      sigmoid(model_detail::linear(params, "ca.fc2", relu(model_detail::linear(params, "ca.fc1", squeeze))));
  cnn = mul(cnn, reshape(gates, {B, 1, C}));

  // (3) bidirectional LSTM
  Tensor<T> seq = cnn;
  for (int l = 0; l < cfg.lstm_layers; ++l) {
    const std::string base = "lstm" + std::to_string(l);
    seq = concat(std::vector<Tensor<T>>{model_detail::lstm_direction(params, base + ".fw", seq, cfg.lstm_hidden, false),
                  model_detail::lstm_direction(params, base + ".bw", seq, cfg.lstm_hidden, true)},
                 2);
    seq = dropout(seq, cfg.lstm_dropout, opt.train, rng);
  }
  const auto D = static_cast<std::size_t>(2 * cfg.lstm_hidden);

  // (4) multi-head self-attention, pre-norm with residual
  const auto heads = static_cast<std::size_t>(cfg.heads);
  const std::size_t dh = D / heads;
  const Tensor<T> normed = layer_norm(seq, params["attn.ln.gamma"], params["attn.ln.beta"]);
  auto split_heads = [&](const Tensor<T>& t) {
    return reshape(transpose(reshape(t, {B, W, heads, dh}), {0, 2, 1, 3}), {B * heads, W, dh});
  };
  const Tensor<T> q = split_heads(model_detail::linear(params, "attn.q", normed));
  const Tensor<T> k = split_heads(model_detail::linear(params, "attn.k", normed));
  const Tensor<T> v = split_heads(model_detail::linear(params, "attn.v", normed));
  const Tensor<T> scores =
      scale(matmul(q, transpose(k, {0, 2, 1})), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  const Tensor<T> attn = softmax(scores, 2);  // [B*heads, W, W]
  const Tensor<T> ctx =
      reshape(transpose(reshape(matmul(attn, v), {B, heads, W, dh}), {0, 2, 1, 3}), {B, W, D});
  const Tensor<T> attended = add(seq, model_detail::linear(params, "attn.o", ctx));

  // (5) temporal attention pooling
  const Tensor<T> energy = tanh(model_detail::linear(params, "temporal.proj", attended));
  const Tensor<T> tw = softmax(reshape(matmul(energy, params["temporal.score"]), {B, W}), 1);
  Tensor<T> pooled = sum(mul(attended, reshape(tw, {B, W, 1})), 1);  // [B, D]

  // (6) residual from time-averaged CNN features
  pooled = add(pooled, model_detail::linear(params, "residual", mean(cnn, 1)));

  ForwardResult<T> out;
  out.pooled = pooled;
  out.channel_gates = gates;
  out.self_attention = attn;
  out.temporal_weights = tw;
  out.yhat = model_detail::linear(params, "head", pooled);  // (7)
  if (opt.return_domain) {
    const Tensor<T> rev = grad_reverse(pooled, opt.grl_lambda);
    out.dhat = model_detail::linear(params, "domain.fc2", relu(model_detail::linear(params, "domain.fc1", rev)));
  }
  return out;
}

// Stacked unidirectional LSTM, last hidden state -> linear head.
template <class T>
ad::Tensor<T> forward_lstm_baseline(ModelParams<T>& params, const ad::Tensor<T>& x_in,
                                    bool train = false, Rng* rng = nullptr) {
  using namespace ad;
  const auto& cfg = params.config;
  if (cfg.kind != ModelKind::kLstmBaseline)
    throw ContractError("forward_lstm_baseline: model is not the LSTM baseline");
  Tensor<T> seq = model_detail::input_tensor(cfg, x_in);
  Rng dummy(0);
  for (int l = 0; l < cfg.lstm_layers; ++l) {
    seq = model_detail::lstm_direction(params, "lstm" + std::to_string(l) + ".fw", seq, cfg.lstm_hidden, false);
    if (l + 1 < cfg.lstm_layers) seq = dropout(seq, cfg.lstm_dropout, train, rng ? *rng : dummy);
  }
  const std::size_t B = seq.dim(0), W = seq.dim(1), H = seq.dim(2);
  const Tensor<T> last = reshape(slice(seq, 1, W - 1, 1), {B, H});
  return model_detail::linear(params, "head", last);
}

// Dispatches on the model kind; dhat is only produced by the adaptive model.
template <class T>
ForwardResult<T> run_model(ModelParams<T>& params, const ad::Tensor<T>& x,
                           const ForwardOptions<T>& opt = {}) {
  if (params.config.kind == ModelKind::kAdaptive) return forward(params, x, opt);
  ForwardResult<T> r;
  r.yhat = forward_lstm_baseline(params, x, opt.train, opt.rng);
  return r;
}

// ---------------------------------------------------------------------------
// Batches

// Stacks windows [first, first+count) into [B, w, F], clamped to [0, 1].
template <class T>
ad::Tensor<T> batch_inputs(const std::vector<WindowSample>& samples,
                           std::span<const std::size_t> order) {
  if (order.empty()) throw ContractError("batch_inputs: empty batch");
  const auto& first = samples[order[0]];
  const auto W = static_cast<std::size_t>(first.x.rows());
  const auto F = static_cast<std::size_t>(first.x.cols());
  std::vector<T> v(order.size() * W * F);
  std::size_t k = 0;
  for (auto idx : order) {
    const auto& x = samples[idx].x;
    for (Eigen::Index t = 0; t < x.rows(); ++t)
      for (Eigen::Index f = 0; f < x.cols(); ++f)
        v[k++] = static_cast<T>(std::clamp(x(t, f), 0.0, 1.0));
  }
  return ad::Tensor<T>::from({order.size(), W, F}, std::move(v));
}

template <class T>
ad::Tensor<T> batch_targets(const std::vector<WindowSample>& samples,
                            std::span<const std::size_t> order) {
  const auto D = static_cast<std::size_t>(samples[order[0]].y.size());
  std::vector<T> v;
  v.reserve(order.size() * D);
  for (auto idx : order)
    for (Eigen::Index j = 0; j < samples[idx].y.size(); ++j) v.push_back(static_cast<T>(samples[idx].y(j)));
  return ad::Tensor<T>::from({order.size(), D}, std::move(v));
}

// Eval-mode predictions [n, delta] for a list of input windows.
template <class T>
Eigen::MatrixXd predict(ModelParams<T>& params, const std::vector<WindowSample>& samples,
                        std::size_t batch_size = 256) {
  ad::NoGradGuard no_grad;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(samples.size()), params.config.horizon);
  std::vector<std::size_t> order;
  for (std::size_t s = 0; s < samples.size(); s += batch_size) {
    order.clear();
    for (std::size_t i = s; i < std::min(samples.size(), s + batch_size); ++i) order.push_back(i);
    const auto y = run_model(params, batch_inputs<T>(samples, order)).yhat;
    for (std::size_t r = 0; r < order.size(); ++r)
      for (int j = 0; j < params.config.horizon; ++j)
        out(static_cast<Eigen::Index>(order[r]), j) =
            static_cast<double>(y.values()[r * static_cast<std::size_t>(params.config.horizon) + static_cast<std::size_t>(j)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: <stem>.bin holds raw arrays, <stem>.json the manifest.

template <class T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

template <class T>
void save_checkpoint(const ModelParams<T>& p, const std::filesystem::path& stem) {
  nlohmann::json manifest;
  manifest["format"] = "adaptcast-checkpoint-1";
  manifest["dtype"] = dtype_name<T>();
  manifest["config"] = p.config;
  manifest["seed"] = p.seed;
  auto bin_path = stem;
  bin_path += ".bin";
  manifest["data"] = bin_path.filename().string();
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw ConfigError("cannot write " + bin_path.string(), "output");
  std::size_t offset = 0;
  auto write = [&](std::span<const T> data) {
    bin.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(T)));
    const auto at = offset;
    offset += data.size();
    return at;
  };
  for (const auto& t : p.tensors) {
    const auto at = write(t.tensor.data());
    manifest["tensors"].push_back(
        {{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", at}, {"count", t.tensor.size()}});
  }
  for (const auto& [name, s] : p.batchnorm) {
    const auto m = write(s.running_mean);
    const auto v = write(s.running_var);
    manifest["batchnorm"].push_back(
        {{"name", name}, {"channels", s.running_mean.size()}, {"mean_offset", m}, {"var_offset", v}});
  }
  if (!bin) throw ConfigError("failed writing " + bin_path.string(), "output");
  auto json_path = stem;
  json_path += ".json";
  std::ofstream(json_path) << manifest.dump(2) << '\n';
}

template <class T>
ModelParams<T> load_checkpoint(const std::filesystem::path& stem) {
  auto json_path = stem;
  json_path += ".json";
  std::ifstream js(json_path);
  if (!js) throw ConfigError("cannot open " + json_path.string(), "checkpoint");
  const auto manifest = nlohmann::json::parse(js);
  if (manifest.at("dtype").get<std::string>() != dtype_name<T>())
    throw ConfigError("checkpoint dtype " + manifest.at("dtype").get<std::string>() +
                          " does not match " + dtype_name<T>(),
                      "checkpoint");
  auto p = init_model<T>(manifest.at("config").get<ModelConfig>(), manifest.at("seed").get<std::uint64_t>());
  const auto bin_path = json_path.parent_path() / manifest.at("data").get<std::string>();
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw ConfigError("cannot open " + bin_path.string(), "checkpoint");
  bin.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(bin.tellg());
  bin.seekg(0);
  std::vector<T> raw(bytes / sizeof(T));
  bin.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(T)));
  auto fetch = [&](std::size_t off, std::size_t count) {
    if (off + count > raw.size()) throw IntegrityError("checkpoint data truncated");
    return std::span<const T>(raw.data() + off, count);
  };
  const auto& entries = manifest.at("tensors");
  if (entries.size() != p.tensors.size()) throw IntegrityError("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& t = p.tensors[i];
    if (entries[i].at("name").get<std::string>() != t.name ||
        entries[i].at("shape").get<ad::Shape>() != t.tensor.shape())
      throw IntegrityError("checkpoint entry " + std::to_string(i) + " does not match " + t.name);
    const auto src = fetch(entries[i].at("offset"), entries[i].at("count"));
    std::copy(src.begin(), src.end(), t.tensor.mutable_data().begin());
  }
  if (manifest.contains("batchnorm"))
    for (const auto& e : manifest["batchnorm"]) {
      auto& s = p.batchnorm.at(e.at("name").get<std::string>());
      const std::size_t c = e.at("channels");
      const auto m = fetch(e.at("mean_offset"), c);
      const auto v = fetch(e.at("var_offset"), c);
      s.running_mean.assign(m.begin(), m.end());
      s.running_var.assign(v.begin(), v.end());
    }
  return p;
}

}  // namespace adaptcast
