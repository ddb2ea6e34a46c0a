#pragma once

// Small dense-network toolkit for the two fixed graphs used in this project
// (the per-phone estimator and the pairwise answer aggregator).
//
// Parameters live in one flat vector with a named layout sidecar so that the
// optimizers, the meta-learner and the encrypted aggregation all operate on
// plain sequences of doubles.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "crowdtemp/errors.hpp"

namespace crowdtemp {

struct TensorSpec {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const TensorSpec&) const = default;
};

class ParamLayout {
 public:
  ParamLayout() = default;
  explicit ParamLayout(std::vector<TensorSpec> entries) : entries_(std::move(entries)) {
    offsets_.reserve(entries_.size());
    for (const auto& e : entries_) {
      offsets_.push_back(total_);
      total_ += e.size();
    }
  }

  const std::vector<TensorSpec>& entries() const { return entries_; }
  std::size_t size() const { return total_; }
  std::size_t offset(std::size_t i) const { return offsets_.at(i); }

  bool operator==(const ParamLayout& other) const { return entries_ == other.entries_; }

 private:
  std::vector<TensorSpec> entries_;
  std::vector<std::size_t> offsets_;
  std::size_t total_ = 0;
};

using LayoutPtr = std::shared_ptr<const ParamLayout>;

inline bool same_layout(const LayoutPtr& a, const LayoutPtr& b) {
  if (a == b) return true;
  if (!a || !b) return false;
  return *a == *b;
}

/// Flat vector of doubles tied to an immutable parameter layout. The tag keeps
/// parameters and gradients from being mixed up at compile time.
template <class Tag>
class FlatVector {
 public:
  FlatVector() : layout_(std::make_shared<ParamLayout>()) {}
  explicit FlatVector(LayoutPtr layout) : layout_(std::move(layout)), values_(layout_->size(), 0.0) {}
  FlatVector(LayoutPtr layout, std::vector<double> values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    require(values_.size() == layout_->size(), "flat vector length does not match its layout");
  }

  const ParamLayout& layout() const { return *layout_; }
  const LayoutPtr& layout_ptr() const { return layout_; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  const std::vector<double>& raw() const { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  std::size_t size() const { return values_.size(); }

  template <class OtherTag>
  bool compatible(const FlatVector<OtherTag>& other) const {
    return same_layout(layout_, other.layout_ptr());
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  bool operator==(const FlatVector& other) const {
    return compatible(other) && values_ == other.values_;
  }

 private:
  LayoutPtr layout_;
  std::vector<double> values_;
};

struct ParamTag {};
struct GradTag {};
using ParamVector = FlatVector<ParamTag>;
using GradientVector = FlatVector<GradTag>;

inline std::uint64_t checksum(const ParamVector& p) { return fnv1a(p.values()); }

// ---------------------------------------------------------------------------
// Elementwise pieces

enum class Activation { relu, identity };

inline double activate(Activation a, double x) {
  return a == Activation::relu ? (x > 0.0 ? x : 0.0) : x;
}

inline double activate_grad(Activation a, double pre) {
  return a == Activation::relu ? (pre > 0.0 ? 1.0 : 0.0) : 1.0;
}

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct MatrixView {
  std::span<const double> data;  // row-major
  std::size_t rows = 0;
  std::size_t cols = 0;

  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

inline std::vector<double> dense_forward(std::span<const double> input, MatrixView weights,
                                         std::span<const double> bias, Activation act) {
  require(weights.data.size() == weights.rows * weights.cols, "weight matrix storage mismatch");
  require(input.size() == weights.cols, "dense_forward: input length does not match weight columns");
  require(bias.size() == weights.rows, "dense_forward: bias length does not match weight rows");
  std::vector<double> out(weights.rows);
  for (std::size_t i = 0; i < weights.rows; ++i) {
    double s = bias[i];
    for (std::size_t j = 0; j < weights.cols; ++j) s += weights(i, j) * input[j];
    out[i] = activate(act, s);
    if (!std::isfinite(out[i])) throw NumericalError("dense_forward: non-finite output");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian negative log-likelihood of a target under N(mu, sigma^2).

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * ln(2*pi)

inline double gaussian_nll(double mu, double sigma, double target) {
  if (!(sigma > 0.0)) throw DomainError("gaussian_nll: sigma must be positive");
  const double r = target - mu;
  return kHalfLog2Pi + std::log(sigma) + (r * r) / (2.0 * sigma * sigma);
}

struct NllGrad {
  double d_mu = 0.0;
  double d_sigma = 0.0;
};

inline NllGrad gaussian_nll_grad(double mu, double sigma, double target) {
  if (!(sigma > 0.0)) throw DomainError("gaussian_nll_grad: sigma must be positive");
  const double r = target - mu;
  const double s2 = sigma * sigma;
  return {(mu - target) / s2, 1.0 / sigma - (r * r) / (s2 * sigma)};
}

// ---------------------------------------------------------------------------
// Network description: a chain of trunk layers followed by parallel heads that
// all read the trunk output. Head outputs are concatenated.

struct DenseSpec {
  std::string name;
  std::size_t in = 0;
  std::size_t out = 0;
  Activation act = Activation::identity;
};

class NetworkSpec {
 public:
  NetworkSpec() : layout_(std::make_shared<ParamLayout>()) {}
  NetworkSpec(std::string name, std::size_t input_size, std::vector<DenseSpec> trunk,
              std::vector<DenseSpec> heads)
      : name_(std::move(name)), input_size_(input_size), trunk_(std::move(trunk)), heads_(std::move(heads)) {
    std::size_t width = input_size_;
    std::vector<TensorSpec> entries;
    for (const auto& l : trunk_) {
      require(l.in == width, "network " + name_ + ": layer " + l.name + " input width mismatch");
      entries.push_back({l.name + ".weight", l.out, l.in});
      entries.push_back({l.name + ".bias", l.out, 1});
      width = l.out;
    }
    for (const auto& h : heads_) {
      require(h.in == width, "network " + name_ + ": head " + h.name + " input width mismatch");
      entries.push_back({h.name + ".weight", h.out, h.in});
      entries.push_back({h.name + ".bias", h.out, 1});
      output_size_ += h.out;
    }
    layout_ = std::make_shared<const ParamLayout>(std::move(entries));
  }

  const std::string& name() const { return name_; }
  std::size_t input_size() const { return input_size_; }
  std::size_t output_size() const { return output_size_; }
  const std::vector<DenseSpec>& trunk() const { return trunk_; }
  const std::vector<DenseSpec>& heads() const { return heads_; }
  const LayoutPtr& layout() const { return layout_; }

  std::size_t trunk_width() const { return trunk_.empty() ? input_size_ : trunk_.back().out; }

 private:
  std::string name_;
  std::size_t input_size_ = 0;
  std::size_t output_size_ = 0;
  std::vector<DenseSpec> trunk_;
  std::vector<DenseSpec> heads_;
  LayoutPtr layout_;
};

inline constexpr std::size_t kFeatureCount = 9;

/// 9 -> 32 (relu) -> 16 (relu) -> {mu head 16->1, sigma head 16->1}.
inline const NetworkSpec& estimator_network() {
  static const NetworkSpec spec("estimator", kFeatureCount,
                                {{"embed1", 9, 32, Activation::relu}, {"embed2", 32, 16, Activation::relu}},
                                {{"mu_head", 16, 1, Activation::identity},
                                 {"sigma_head", 16, 1, Activation::identity}});
  return spec;
}

/// (mu_i, sigma_i, mu_j, sigma_j) -> 16 (relu) -> 2 (identity).
inline const NetworkSpec& aggregator_network() {
  static const NetworkSpec spec("aggregator", 4, {{"agg_embed1", 4, 16, Activation::relu}},
                                {{"agg_embed2", 16, 2, Activation::identity}});
  return spec;
}

/// Uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)] for weights and biases.
inline ParamVector init_params(const NetworkSpec& spec, std::uint64_t seed) {
  ParamVector p(spec.layout());
  std::mt19937_64 rng(seed);
  const auto& entries = spec.layout()->entries();
  for (std::size_t e = 0; e < entries.size(); ++e) {
    // weight entries are rows x fan_in; the bias that follows shares the fan_in
    const std::size_t fan_in = entries[e].name.ends_with(".bias") ? entries[e - 1].cols : entries[e].cols;
    const double bound = std::sqrt(1.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    const std::size_t off = spec.layout()->offset(e);
    for (std::size_t i = 0; i < entries[e].size(); ++i) p[off + i] = dist(rng);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass with a reusable tape, and reverse-mode accumulation.

struct ForwardTape {
  std::vector<double> input;
  std::vector<std::vector<double>> trunk_pre;
  std::vector<std::vector<double>> trunk_post;
  std::vector<std::vector<double>> head_pre;
  std::vector<double> output;
};

namespace detail {

inline void dense_into(std::span<const double> params, std::size_t w_off, std::size_t b_off,
                       const DenseSpec& l, std::span<const double> in, std::vector<double>& pre) {
  pre.resize(l.out);
  for (std::size_t i = 0; i < l.out; ++i) {
    const double* w = params.data() + w_off + i * l.in;
    double s = params[b_off + i];
    for (std::size_t j = 0; j < l.in; ++j) s += w[j] * in[j];
    pre[i] = s;
  }
}

inline void check_finite(std::span<const double> v, const std::string& net, const std::string& layer) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericalError("non-finite activation in " + net + "/" + layer);
}

}  // namespace detail

inline void forward(const NetworkSpec& spec, const ParamVector& params, std::span<const double> input,
                    ForwardTape& tape) {
  require(params.layout().size() == spec.layout()->size(), "forward: parameter layout does not match network");
  require(input.size() == spec.input_size(), "forward: input length mismatch for network " + spec.name());
  const auto p = params.values();
  tape.input.assign(input.begin(), input.end());
  tape.trunk_pre.resize(spec.trunk().size());
  tape.trunk_post.resize(spec.trunk().size());
  tape.head_pre.resize(spec.heads().size());
  tape.output.clear();

  std::size_t entry = 0;
  std::span<const double> cur = tape.input;
  for (std::size_t l = 0; l < spec.trunk().size(); ++l) {
    const auto& layer = spec.trunk()[l];
    detail::dense_into(p, spec.layout()->offset(entry), spec.layout()->offset(entry + 1), layer, cur,
                       tape.trunk_pre[l]);
    entry += 2;
    auto& post = tape.trunk_post[l];
    post.resize(layer.out);
    for (std::size_t i = 0; i < layer.out; ++i) post[i] = activate(layer.act, tape.trunk_pre[l][i]);
    detail::check_finite(post, spec.name(), layer.name);
    cur = post;
  }
  for (std::size_t h = 0; h < spec.heads().size(); ++h) {
    const auto& head = spec.heads()[h];
    detail::dense_into(p, spec.layout()->offset(entry), spec.layout()->offset(entry + 1), head, cur,
                       tape.head_pre[h]);
    entry += 2;
    for (double v : tape.head_pre[h]) tape.output.push_back(activate(head.act, v));
  }
  detail::check_finite(tape.output, spec.name(), "output");
}

inline std::vector<double> forward(const NetworkSpec& spec, const ParamVector& params,
                                   std::span<const double> input) {
  ForwardTape tape;
  forward(spec, params, input, tape);
  return tape.output;
}

/// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(output) and
/// returns d(loss)/d(input).
inline std::vector<double> backward_from_output(const NetworkSpec& spec, const ParamVector& params,
                                                const ForwardTape& tape, std::span<const double> d_output,
                                                GradientVector& grad) {
  require(grad.compatible(params), "backward: gradient layout does not match parameters");
  require(d_output.size() == spec.output_size(), "backward: output gradient length mismatch");
  const auto p = params.values();
  auto g = grad.values();
  const auto& layout = *spec.layout();
  const std::size_t n_trunk = spec.trunk().size();

  std::span<const double> trunk_out = n_trunk ? std::span<const double>(tape.trunk_post.back())
                                              : std::span<const double>(tape.input);
  std::vector<double> d_trunk(spec.trunk_width(), 0.0);

  std::size_t out_off = 0;
  for (std::size_t h = 0; h < spec.heads().size(); ++h) {
    const auto& head = spec.heads()[h];
    const std::size_t w_off = layout.offset(2 * n_trunk + 2 * h);
    const std::size_t b_off = layout.offset(2 * n_trunk + 2 * h + 1);
    for (std::size_t i = 0; i < head.out; ++i) {
      const double d_pre = d_output[out_off + i] * activate_grad(head.act, tape.head_pre[h][i]);
      if (d_pre == 0.0) continue;
      g[b_off + i] += d_pre;
      for (std::size_t j = 0; j < head.in; ++j) {
        g[w_off + i * head.in + j] += d_pre * trunk_out[j];
        d_trunk[j] += d_pre * p[w_off + i * head.in + j];
      }
    }
    out_off += head.out;
  }

  std::vector<double> d_cur = std::move(d_trunk);
  for (std::size_t l = n_trunk; l-- > 0;) {
    const auto& layer = spec.trunk()[l];
    const std::size_t w_off = layout.offset(2 * l);
    const std::size_t b_off = layout.offset(2 * l + 1);
    std::span<const double> in = l ? std::span<const double>(tape.trunk_post[l - 1])
                                   : std::span<const double>(tape.input);
    std::vector<double> d_in(layer.in, 0.0);
    for (std::size_t i = 0; i < layer.out; ++i) {
      const double d_pre = d_cur[i] * activate_grad(layer.act, tape.trunk_pre[l][i]);
      if (d_pre == 0.0) continue;
      g[b_off + i] += d_pre;
      const double* w = p.data() + w_off + i * layer.in;
      double* gw = g.data() + w_off + i * layer.in;
      for (std::size_t j = 0; j < layer.in; ++j) {
        gw[j] += d_pre * in[j];
        d_in[j] += d_pre * w[j];
      }
    }
    d_cur = std::move(d_in);
  }
  return d_cur;
}

// ---------------------------------------------------------------------------
// Losses on raw network outputs.

enum class LossKind {
  gaussian_nll,   // output = (mu, raw sigma); sigma = softplus(raw) + floor
  squared_error,  // sum_i (output_i - target)^2
};

inline constexpr double kSigmaFloor = 1e-3;

struct LossEval {
  double loss = 0.0;
  std::vector<double> d_output;
};

inline LossEval evaluate_loss(LossKind kind, std::span<const double> output, double target,
                              double sigma_floor = kSigmaFloor) {
  LossEval r;
  r.d_output.assign(output.size(), 0.0);
  if (kind == LossKind::squared_error) {
    for (std::size_t i = 0; i < output.size(); ++i) {
      const double d = output[i] - target;
      r.loss += d * d;
      r.d_output[i] = 2.0 * d;
    }
    return r;
  }
  require(output.size() == 2, "gaussian_nll loss expects (mu, raw sigma) outputs");
  const double sigma = softplus(output[1]) + sigma_floor;
  r.loss = gaussian_nll(output[0], sigma, target);
  const auto g = gaussian_nll_grad(output[0], sigma, target);
  r.d_output[0] = g.d_mu;
  r.d_output[1] = g.d_sigma * sigmoid(output[1]);
  return r;
}

struct LossGradient {
  double loss = 0.0;
  GradientVector grad;
};

inline LossGradient backward(const NetworkSpec& spec, const ParamVector& params, std::span<const double> input,
                             double target, LossKind kind) {
  ForwardTape tape;
  forward(spec, params, input, tape);
  auto eval = evaluate_loss(kind, tape.output, target);
  LossGradient out{eval.loss, GradientVector(params.layout_ptr())};
  backward_from_output(spec, params, tape, eval.d_output, out.grad);
  return out;
}

inline double loss_at(const NetworkSpec& spec, const ParamVector& params, std::span<const double> input,
                      double target, LossKind kind) {
  ForwardTape tape;
  forward(spec, params, input, tape);
  return evaluate_loss(kind, tape.output, target).loss;
}

namespace detail {

// Loss in long double for the finite-difference side of grad_check. Gradients
// of ~1e-7 are otherwise lost to roundoff at steps small enough to stay clear
// of relu kinks.
inline long double reference_loss(const NetworkSpec& spec, const std::vector<long double>& p,
                                  std::span<const double> input, double target, LossKind kind) {
  std::vector<long double> cur(input.begin(), input.end()), next, out;
  std::size_t entry = 0;
  const auto dense = [&](const DenseSpec& l, std::vector<long double>& dst) {
    const std::size_t w = spec.layout()->offset(entry), b = spec.layout()->offset(entry + 1);
    entry += 2;
    dst.assign(l.out, 0.0L);
    for (std::size_t i = 0; i < l.out; ++i) {
      long double acc = p[b + i];
      for (std::size_t j = 0; j < l.in; ++j) acc += p[w + i * l.in + j] * cur[j];
      dst[i] = l.act == Activation::relu ? (acc > 0.0L ? acc : 0.0L) : acc;
    }
  };
  for (const auto& l : spec.trunk()) {
    dense(l, next);
    cur.swap(next);
  }
  for (const auto& h : spec.heads()) {
    dense(h, next);
    out.insert(out.end(), next.begin(), next.end());
  }
  const long double t = target;
  if (kind == LossKind::squared_error) {
    long double loss = 0.0L;
    for (long double o : out) loss += (o - t) * (o - t);
    return loss;
  }
  const long double x = out[1];
  const long double sp = x > 0.0L ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  const long double sigma = sp + static_cast<long double>(kSigmaFloor);
  const long double z = (t - out[0]) / sigma;
  return std::log(sigma) + 0.5L * z * z;  // the constant 0.5 ln(2 pi) cancels in differences
}

}  // namespace detail

/// Max relative error between backward() and central finite differences,
/// denominator max(|analytic|, |numeric|, 1e-8). The difference quotients are
/// evaluated in extended precision.
inline double grad_check(const NetworkSpec& spec, const ParamVector& params, std::span<const double> input,
                         double target, double h, LossKind kind) {
  require(h >= 1e-8 && h <= 1e-4, "grad_check: step must lie in [1e-8, 1e-4]");
  if (params.size() == 0) return 0.0;
  require(input.size() == spec.input_size(), "grad_check: input length mismatch for network " + spec.name());
  const auto analytic = backward(spec, params, input, target, kind).grad;
  std::vector<long double> probe(params.values().begin(), params.values().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const long double orig = probe[i];
    probe[i] = orig + h;
    const long double up = detail::reference_loss(spec, probe, input, target, kind);
    probe[i] = orig - h;
    const long double down = detail::reference_loss(spec, probe, input, target, kind);
    probe[i] = orig;
    const double numeric = static_cast<double>((up - down) / (2.0L * h));
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Optimizers

inline ParamVector sgd_step(const ParamVector& params, const GradientVector& grads, double lr) {
  require(params.compatible(grads), "sgd_step: layout mismatch");
  require(lr >= 0.0, "sgd_step: learning rate must be non-negative");
  ParamVector out = params;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= lr * grads[i];
  return out;
}

enum class OptimizerKind { sgd, adam };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::sgd;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
};

inline OptimizerState make_sgd(double lr) {
  OptimizerState s;
  s.kind = OptimizerKind::sgd;
  s.lr = lr;
  return s;
}

inline OptimizerState make_adam(double lr, const ParamLayout& layout) {
  OptimizerState s;
  s.kind = OptimizerKind::adam;
  s.lr = lr;
  s.m.assign(layout.size(), 0.0);
  s.v.assign(layout.size(), 0.0);
  return s;
}

inline std::pair<ParamVector, OptimizerState> adam_step(OptimizerState state, const ParamVector& params,
                                                        const GradientVector& grads) {
  require(state.kind == OptimizerKind::adam, "adam_step: optimizer state is not adam");
  require(params.compatible(grads), "adam_step: layout mismatch");
  require(state.m.size() == params.size() && state.v.size() == params.size(),
          "adam_step: moment vectors do not match parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  ParamVector out = params;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double g = grads[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    out[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
  }
  return {std::move(out), std::move(state)};
}

/// Dispatches on the state kind; updates `params` and `state` in place.
inline void optimizer_step(OptimizerState& state, ParamVector& params, const GradientVector& grads) {
  if (state.kind == OptimizerKind::sgd) {
    params = sgd_step(params, grads, state.lr);
    ++state.step;
    return;
  }
  auto [p, s] = adam_step(std::move(state), params, grads);
  params = std::move(p);
  state = std::move(s);
}

inline void scale(GradientVector& g, double factor) {
  for (double& v : g.values()) v *= factor;
}

inline void accumulate(GradientVector& into, const GradientVector& g) {
  require(into.compatible(g), "accumulate: layout mismatch");
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += g[i];
}

}  // namespace crowdtemp
