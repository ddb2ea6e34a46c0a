#pragma once

// Per-phone ambient temperature estimator: normalized features in, a
// Gaussian (mu, sigma) answer out, trained on the Gaussian NLL.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "crowdtemp/data.hpp"
#include "crowdtemp/errors.hpp"
#include "crowdtemp/nn.hpp"

namespace crowdtemp {

/// A temperature estimate and its uncertainty (standard deviation), degC.
struct Answer {
  double mu = 0.0;
  double sigma = 1.0;

  bool operator==(const Answer&) const = default;
};

/// Normalized features with a target temperature.
struct LabeledPoint {
  Features x{};
  double y = 0.0;
};

struct EstimatorModel {
  ParamVector params{estimator_network().layout()};
  NormStats norm;
  std::string phone_id;
  double sigma_floor = kSigmaFloor;
};

inline Answer answer_from_output(std::span<const double> out, double sigma_floor) {
  return {out[0], softplus(out[1]) + sigma_floor};
}

inline Answer predict_normalized(const ParamVector& params, const Features& x, ForwardTape& tape,
                                 double sigma_floor = kSigmaFloor) {
  forward(estimator_network(), params, x, tape);
  return answer_from_output(tape.output, sigma_floor);
}

inline Answer predict_normalized(const ParamVector& params, const Features& x, double sigma_floor = kSigmaFloor) {
  ForwardTape tape;
  return predict_normalized(params, x, tape, sigma_floor);
}

inline Answer predict(const EstimatorModel& model, const Sample& sample) {
  return predict_normalized(model.params, normalize(sample, model.norm), model.sigma_floor);
}

inline std::vector<LabeledPoint> to_points(const PhoneDataset& d, const NormStats& norm) {
  std::vector<LabeledPoint> out;
  out.reserve(d.samples.size());
  for (const auto& s : d.samples) out.push_back({normalize(s, norm), s.ambient});
  return out;
}

// ---------------------------------------------------------------------------
// Loss and gradient over a set of points (mean over points).

struct BatchGradient {
  double loss = 0.0;
  GradientVector grad;
};

inline BatchGradient mean_nll_gradient(const ParamVector& params, std::span<const LabeledPoint> points,
                                       ForwardTape& tape) {
  require(!points.empty(), "mean_nll_gradient: empty point set");
  const auto& net = estimator_network();
  BatchGradient out{0.0, GradientVector(params.layout_ptr())};
  for (const auto& p : points) {
    forward(net, params, p.x, tape);
    const auto eval = evaluate_loss(LossKind::gaussian_nll, tape.output, p.y);
    out.loss += eval.loss;
    backward_from_output(net, params, tape, eval.d_output, out.grad);
  }
  const double inv = 1.0 / static_cast<double>(points.size());
  out.loss *= inv;
  scale(out.grad, inv);
  return out;
}

inline BatchGradient mean_nll_gradient(const ParamVector& params, std::span<const LabeledPoint> points) {
  ForwardTape tape;
  return mean_nll_gradient(params, points, tape);
}

inline double mean_nll(const ParamVector& params, std::span<const LabeledPoint> points) {
  require(!points.empty(), "mean_nll: empty point set");
  ForwardTape tape;
  double total = 0.0;
  for (const auto& p : points) {
    const auto a = predict_normalized(params, p.x, tape);
    total += gaussian_nll(a.mu, a.sigma, p.y);
  }
  return total / static_cast<double>(points.size());
}

inline double mae(const ParamVector& params, std::span<const LabeledPoint> points) {
  require(!points.empty(), "mae: empty point set");
  ForwardTape tape;
  double total = 0.0;
  for (const auto& p : points) total += std::abs(predict_normalized(params, p.x, tape).mu - p.y);
  return total / static_cast<double>(points.size());
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::size_t patience = 20;
  double holdout_fraction = 0.2;
  std::size_t max_epochs = 1000;
  std::uint64_t seed = 1;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_nll = 0.0;
  double holdout_nll = 0.0;
};

struct FitResult {
  ParamVector params;
  std::vector<EpochRecord> trace;
  std::size_t best_epoch = 0;
};

inline constexpr double kDivergenceNll = 1e6;

/// Fresh estimator parameters; the mu-head bias starts at `label_mean` so the
/// optimizer does not spend its first thousand steps walking up to room
/// temperature.
inline ParamVector init_estimator_params(std::uint64_t seed, double label_mean) {
  auto p = init_params(estimator_network(), seed);
  const auto& layout = *estimator_network().layout();
  for (std::size_t e = 0; e < layout.entries().size(); ++e)
    if (layout.entries()[e].name == "mu_head.bias") p[layout.offset(e)] = label_mean;
  return p;
}

inline double label_mean(std::span<const LabeledPoint> points) {
  double s = 0.0;
  for (const auto& p : points) s += p.y;
  return points.empty() ? 0.0 : s / static_cast<double>(points.size());
}

/// Adam on mean NLL with early stopping on a seeded holdout. Epoch 0 is the
/// initial model. Training stops once `patience` consecutive epochs fail to
/// improve the holdout NLL; the best-holdout parameters are returned.
inline FitResult fit_estimator(ParamVector init, std::span<const LabeledPoint> points, const TrainConfig& cfg) {
  require(points.size() >= 2, "fit_estimator: need at least 2 points");
  require(cfg.batch_size >= 1, "fit_estimator: batch size must be positive");
  require(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0, "fit_estimator: holdout fraction in (0,1)");
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_hold = static_cast<std::size_t>(std::floor(cfg.holdout_fraction * static_cast<double>(points.size()) + 0.5));
  n_hold = std::clamp<std::size_t>(n_hold, 1, points.size() - 1);
  std::vector<LabeledPoint> holdout, train;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_hold ? holdout : train).push_back(points[order[i]]);

  const auto checked = [](double v, std::size_t epoch) {
    if (!std::isfinite(v) || v > kDivergenceNll)
      throw TrainingError("estimator training diverged at epoch " + std::to_string(epoch));
    return v;
  };

  FitResult result{init, {}, 0};
  ParamVector params = std::move(init);
  auto opt = make_adam(cfg.lr, params.layout());
  double best = checked(mean_nll(params, holdout), 0);
  result.trace.push_back({0, checked(mean_nll(params, train), 0), best});

  ForwardTape tape;
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs && stale < cfg.patience; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    try {
      for (std::size_t b = 0; b < train.size(); b += cfg.batch_size) {
        const std::size_t e = std::min(train.size(), b + cfg.batch_size);
        auto g = mean_nll_gradient(params, std::span<const LabeledPoint>(train).subspan(b, e - b), tape);
        checked(g.loss, epoch);
        optimizer_step(opt, params, g.grad);
      }
    } catch (const NumericalError& err) {
      throw TrainingError(std::string("estimator training diverged: ") + err.what());
    }
    const double hold = checked(mean_nll(params, holdout), epoch);
    result.trace.push_back({epoch, checked(mean_nll(params, train), epoch), hold});
    if (hold < best) {
      best = hold;
      result.params = params;
      result.best_epoch = epoch;
      stale = 0;
    } else {
      ++stale;
    }
  }
  return result;
}

struct TrainedEstimator {
  EstimatorModel model;
  std::vector<EpochRecord> trace;
  std::size_t best_epoch = 0;
};

inline TrainedEstimator train(const PhoneDataset& train_set, const NormStats& norm, const TrainConfig& cfg) {
  require(train_set.samples.size() >= 50, "train: need at least 50 samples for phone " + train_set.phone_id);
  const auto points = to_points(train_set, norm);
  auto fit = fit_estimator(init_estimator_params(cfg.seed, label_mean(points)), points, cfg);
  TrainedEstimator out;
  out.model.params = std::move(fit.params);
  out.model.norm = norm;
  out.model.phone_id = train_set.phone_id;
  out.trace = std::move(fit.trace);
  out.best_epoch = fit.best_epoch;
  return out;
}

inline double evaluate_mae(const EstimatorModel& model, const PhoneDataset& dataset) {
  require(!dataset.samples.empty(), "evaluate_mae: empty dataset");
  double total = 0.0;
  for (const auto& s : dataset.samples) total += std::abs(predict(model, s).mu - s.ambient);
  return total / static_cast<double>(dataset.samples.size());
}

// ---------------------------------------------------------------------------
// Uncertainty usefulness

struct SpearmanResult {
  double coefficient = 0.0;
  bool degenerate = false;  // a rank vector had zero variance
};

inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

inline SpearmanResult spearman(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && a.size() >= 2, "spearman: need two equal-length series of length >= 2");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return {0.0, true};
  return {sab / std::sqrt(saa * sbb), false};
}

/// Spearman correlation between predicted sigma and |mu - label|.
inline SpearmanResult uncertainty_bias_correlation(const EstimatorModel& model, const PhoneDataset& dataset) {
  require(dataset.samples.size() >= 30, "uncertainty_bias_correlation: need at least 30 samples");
  std::vector<double> sig, bias;
  for (const auto& s : dataset.samples) {
    const auto a = predict(model, s);
    sig.push_back(a.sigma);
    bias.push_back(std::abs(a.mu - s.ambient));
  }
  return spearman(sig, bias);
}

// ---------------------------------------------------------------------------
// Model files. Plain text, doubles written as hex floats so a save/load cycle
// is bit-exact:
//
//   crowdtemp-estimator 1
//   phone_id <id>
//   sigma_floor <hex>
//   layout <entries>            followed by one "<name> <rows> <cols>" line each
//   params <count>              followed by one hex double per line
//   norm_mean <9 hex doubles>
//   norm_std <9 hex doubles>
//   end

namespace detail {

inline std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double read_hex(std::istream& in, const char* what) {
  std::string tok;
  if (!(in >> tok)) throw ParseError(std::string("model file: missing ") + what);
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end != tok.c_str() + tok.size()) throw ParseError(std::string("model file: bad number for ") + what);
  return v;
}

inline void expect(std::istream& in, const std::string& key) {
  std::string tok;
  if (!(in >> tok) || tok != key) throw ParseError("model file: expected '" + key + "'");
}

inline void write_params(std::ostream& out, const ParamVector& p) {
  out << "layout " << p.layout().entries().size() << '\n';
  for (const auto& e : p.layout().entries()) out << e.name << ' ' << e.rows << ' ' << e.cols << '\n';
  out << "params " << p.size() << '\n';
  for (double v : p.values()) out << hexfloat(v) << '\n';
}

inline ParamVector read_params(std::istream& in) {
  expect(in, "layout");
  std::size_t n_entries = 0;
  if (!(in >> n_entries)) throw ParseError("model file: bad layout count");
  std::vector<TensorSpec> entries(n_entries);
  for (auto& e : entries)
    if (!(in >> e.name >> e.rows >> e.cols)) throw ParseError("model file: bad layout entry");
  auto layout = std::make_shared<const ParamLayout>(std::move(entries));
  expect(in, "params");
  std::size_t n = 0;
  if (!(in >> n) || n != layout->size()) throw ParseError("model file: parameter count does not match layout");
  std::vector<double> values(n);
  for (auto& v : values) v = read_hex(in, "parameter");
  return ParamVector(layout, std::move(values));
}

}  // namespace detail

inline void write_model(std::ostream& out, const EstimatorModel& m) {
  out << "crowdtemp-estimator 1\n";
  out << "phone_id " << m.phone_id << '\n';
  out << "sigma_floor " << detail::hexfloat(m.sigma_floor) << '\n';
  detail::write_params(out, m.params);
  out << "norm_mean";
  for (double v : m.norm.mean) out << ' ' << detail::hexfloat(v);
  out << "\nnorm_std";
  for (double v : m.norm.std) out << ' ' << detail::hexfloat(v);
  out << "\nend\n";
}

inline EstimatorModel read_model(std::istream& in) {
  detail::expect(in, "crowdtemp-estimator");
  detail::expect(in, "1");
  EstimatorModel m;
  detail::expect(in, "phone_id");
  if (!(in >> m.phone_id)) throw ParseError("model file: missing phone id");
  detail::expect(in, "sigma_floor");
  m.sigma_floor = detail::read_hex(in, "sigma_floor");
  m.params = detail::read_params(in);
  if (!(m.params.layout() == *estimator_network().layout()))
    throw ParseError("model file: layout is not the estimator layout");
  detail::expect(in, "norm_mean");
  for (auto& v : m.norm.mean) v = detail::read_hex(in, "norm_mean");
  detail::expect(in, "norm_std");
  for (auto& v : m.norm.std) v = detail::read_hex(in, "norm_std");
  detail::expect(in, "end");
  return m;
}

inline void save_model(const std::string& path, const EstimatorModel& m) {
  std::ofstream out(path);
  if (!out) throw ParseError(path + ": cannot open for writing");
  write_model(out, m);
}

inline EstimatorModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path + ": cannot open model file");
  return read_model(in);
}

}  // namespace crowdtemp
