#pragma once

// Truth inference over groups of answers: the learned pairwise fold
// aggregator (CBTS) and the classical baselines it is benchmarked against.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "crowdtemp/errors.hpp"
#include "crowdtemp/estimator.hpp"
#include "crowdtemp/kmeans1d.hpp"
#include "crowdtemp/nn.hpp"

namespace crowdtemp {

struct AnswerGroup {
  std::vector<Answer> answers;
  std::vector<std::string> phone_ids;  // parallel to answers
  std::optional<double> truth;
};

// ===========================================================================
// CBTS aggregator

/// How the pair (a, b) is presented to the AGG network.
///  - raw:      input (mu_a, sigma_a, mu_b, sigma_b); output mu taken as is.
///  - centered: temperatures are expressed relative to the pair midpoint m and
///              the output mu is m + network output, so the aggregator is
///              equivariant to a common temperature shift.
enum class AggInput { raw, centered };

struct AggregatorModel {
  ParamVector params{aggregator_network().layout()};
  AggInput input = AggInput::raw;
  double sigma_floor = kSigmaFloor;
};

namespace detail {

inline std::array<double, 4> agg_input(AggInput mode, const Answer& a, const Answer& b) {
  if (mode == AggInput::raw) return {a.mu, a.sigma, b.mu, b.sigma};
  const double half = 0.5 * (a.mu - b.mu);
  return {half, a.sigma, -half, b.sigma};
}

inline double agg_offset(AggInput mode, const Answer& a, const Answer& b) {
  return mode == AggInput::raw ? 0.0 : 0.5 * (a.mu + b.mu);
}

}  // namespace detail

inline Answer agg_pair(const AggregatorModel& model, const Answer& a, const Answer& b, ForwardTape& tape) {
  const auto x = detail::agg_input(model.input, a, b);
  forward(aggregator_network(), model.params, x, tape);
  Answer out{detail::agg_offset(model.input, a, b) + tape.output[0], softplus(tape.output[1]) + model.sigma_floor};
  if (!std::isfinite(out.mu) || !std::isfinite(out.sigma)) throw NumericalError("agg_pair: non-finite answer");
  return out;
}

inline Answer agg_pair(const AggregatorModel& model, const Answer& a, const Answer& b) {
  ForwardTape tape;
  return agg_pair(model, a, b, tape);
}

/// Fold order: ascending (sigma, mu), most confident first.
inline std::vector<Answer> fold_order(std::span<const Answer> answers) {
  std::vector<Answer> sorted(answers.begin(), answers.end());
  std::sort(sorted.begin(), sorted.end(), [](const Answer& x, const Answer& y) {
    return x.sigma != y.sigma ? x.sigma < y.sigma : x.mu < y.mu;
  });
  return sorted;
}

/// Left fold of the sorted answers through agg_pair. `pair_calls`, when given,
/// is incremented once per agg_pair invocation.
inline Answer cbts_fold(const AggregatorModel& model, std::span<const Answer> answers,
                        std::size_t* pair_calls = nullptr) {
  require(!answers.empty(), "cbts_fold: empty answer group");
  const auto sorted = fold_order(answers);
  ForwardTape tape;
  Answer acc = sorted.front();
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    acc = agg_pair(model, acc, sorted[i], tape);
    if (pair_calls) ++*pair_calls;
  }
  return acc;
}

struct FoldLoss {
  double loss = 0.0;
  Answer result;
};

/// NLL of the folded answer against `truth`; accumulates the parameter
/// gradient into `grad`. Gradients flow back through every fold step.
inline FoldLoss cbts_fold_loss_gradient(const AggregatorModel& model, std::span<const Answer> answers, double truth,
                                        GradientVector& grad) {
  require(!answers.empty(), "cbts_fold: empty answer group");
  const auto& net = aggregator_network();
  const auto sorted = fold_order(answers);
  const std::size_t steps = sorted.size() - 1;
  std::vector<ForwardTape> tapes(steps);
  Answer acc = sorted.front();
  for (std::size_t i = 0; i < steps; ++i) {
    acc = agg_pair(model, acc, sorted[i + 1], tapes[i]);
  }
  FoldLoss out{gaussian_nll(acc.mu, acc.sigma, truth), acc};
  if (steps == 0) return out;

  const auto g = gaussian_nll_grad(acc.mu, acc.sigma, truth);
  double d_mu = g.d_mu;
  double d_sigma = g.d_sigma;
  for (std::size_t i = steps; i-- > 0;) {
    const std::array<double, 2> d_out{d_mu, d_sigma * sigmoid(tapes[i].output[1])};
    const auto d_in = backward_from_output(net, model.params, tapes[i], d_out, grad);
    if (i == 0) break;
    // Only the accumulated (left) argument depends on the parameters.
    if (model.input == AggInput::raw) {
      d_mu = d_in[0];
    } else {
      d_mu = 0.5 * d_out[0] + 0.5 * d_in[0] - 0.5 * d_in[2];
    }
    d_sigma = d_in[1];
  }
  return out;
}

inline double cbts_fold_loss(const AggregatorModel& model, std::span<const Answer> answers, double truth) {
  const auto a = cbts_fold(model, answers);
  return gaussian_nll(a.mu, a.sigma, truth);
}

struct CbtsConfig {
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t patience = 20;
  std::size_t max_epochs = 400;
  std::uint64_t seed = 1;
  // raw inputs near 25 degC put random inits at NLL ~1e5..1e8 and some seeds never recover
  AggInput input = AggInput::centered;
};

struct CbtsEpoch {
  std::size_t epoch = 0;
  double train_nll = 0.0;
  double val_nll = 0.0;
};

struct CbtsTrainResult {
  AggregatorModel model;
  std::vector<CbtsEpoch> trace;
  std::size_t best_epoch = 0;
};

inline double mean_fold_nll(const AggregatorModel& model, std::span<const AnswerGroup> groups) {
  require(!groups.empty(), "mean_fold_nll: no groups");
  double s = 0.0;
  for (const auto& g : groups) {
    require(g.truth.has_value(), "cbts: group without a true label");
    s += cbts_fold_loss(model, g.answers, *g.truth);
  }
  return s / static_cast<double>(groups.size());
}

/// Adam on the per-group NLL of the fully folded answer; gradients are taken
/// only after the whole group has been aggregated. Early stopping on the
/// validation NLL.
inline CbtsTrainResult cbts_train(std::span<const AnswerGroup> train_groups, std::span<const AnswerGroup> val_groups,
                                  const CbtsConfig& cfg) {
  require(!train_groups.empty() && !val_groups.empty(), "cbts_train: need train and validation groups");
  CbtsTrainResult out;
  out.model.input = cfg.input;
  out.model.params = init_params(aggregator_network(), cfg.seed);
  AggregatorModel model = out.model;
  auto opt = make_adam(cfg.lr, model.params.layout());
  std::mt19937_64 rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  std::vector<std::size_t> order(train_groups.size());
  std::iota(order.begin(), order.end(), 0);

  // A poor random init can start far above kDivergenceNll, so divergence is
  // judged against the initial loss as well.
  double limit = std::numeric_limits<double>::infinity();
  const auto checked = [&limit](double v, std::size_t epoch) {
    if (!std::isfinite(v) || v > limit)
      throw TrainingError("cbts training diverged at epoch " + std::to_string(epoch));
    return v;
  };
  double best = checked(mean_fold_nll(model, val_groups), 0);
  const double initial_train = checked(mean_fold_nll(model, train_groups), 0);
  out.trace.push_back({0, initial_train, best});
  limit = std::max(kDivergenceNll, 10.0 * std::max(best, initial_train));
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs && stale < cfg.patience; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double train_total = 0.0;
    try {
      for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
        const std::size_t e = std::min(order.size(), b + cfg.batch_size);
        GradientVector grad(model.params.layout_ptr());
        for (std::size_t i = b; i < e; ++i) {
          const auto& g = train_groups[order[i]];
          require(g.truth.has_value(), "cbts: group without a true label");
          train_total += cbts_fold_loss_gradient(model, g.answers, *g.truth, grad).loss;
        }
        scale(grad, 1.0 / static_cast<double>(e - b));
        optimizer_step(opt, model.params, grad);
      }
    } catch (const NumericalError& err) {
      throw TrainingError(std::string("cbts training diverged: ") + err.what());
    }
    const double val = checked(mean_fold_nll(model, val_groups), epoch);
    out.trace.push_back({epoch, checked(train_total / static_cast<double>(order.size()), epoch), val});
    if (val < best) {
      best = val;
      out.model = model;
      out.best_epoch = epoch;
      stale = 0;
    } else {
      ++stale;
    }
  }
  return out;
}

inline void save_aggregator(const std::string& path, const AggregatorModel& m) {
  std::ofstream out(path);
  if (!out) throw ParseError(path + ": cannot open for writing");
  out << "crowdtemp-aggregator 1\n";
  out << "input " << (m.input == AggInput::raw ? "raw" : "centered") << '\n';
  out << "sigma_floor " << detail::hexfloat(m.sigma_floor) << '\n';
  detail::write_params(out, m.params);
  out << "end\n";
}

inline AggregatorModel load_aggregator(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path + ": cannot open aggregator file");
  detail::expect(in, "crowdtemp-aggregator");
  detail::expect(in, "1");
  AggregatorModel m;
  detail::expect(in, "input");
  std::string mode;
  in >> mode;
  if (mode != "raw" && mode != "centered") throw ParseError(path + ": unknown aggregator input mode");
  m.input = mode == "raw" ? AggInput::raw : AggInput::centered;
  detail::expect(in, "sigma_floor");
  m.sigma_floor = detail::read_hex(in, "sigma_floor");
  m.params = detail::read_params(in);
  if (!(m.params.layout() == *aggregator_network().layout()))
    throw ParseError(path + ": layout is not the aggregator layout");
  detail::expect(in, "end");
  return m;
}

// ===========================================================================
// Baselines

inline double mean_infer(std::span<const Answer> answers) {
  require(!answers.empty(), "mean_infer: empty group");
  double s = 0.0;
  for (const auto& a : answers) s += a.mu;
  return s / static_cast<double>(answers.size());
}

/// W_n = (1/E_n) / sum_i (1/E_i), E_n the training MAE of phone n.
inline std::map<std::string, double> compute_wa_weights(const std::map<std::string, double>& train_mae) {
  require(!train_mae.empty(), "compute_wa_weights: no phones");
  double total = 0.0;
  for (const auto& [id, e] : train_mae) {
    if (!(e > 0.0)) throw ContractError("compute_wa_weights: error of phone " + id + " must be positive");
    total += 1.0 / e;
  }
  std::map<std::string, double> w;
  for (const auto& [id, e] : train_mae) w[id] = (1.0 / e) / total;
  return w;
}

/// Weighted mean of mu with the weights of the phones present, renormalized.
inline double weighted_average(std::span<const Answer> answers, std::span<const std::string> phone_ids,
                               const std::map<std::string, double>& weights) {
  require(!answers.empty(), "weighted_average: empty group");
  require(answers.size() == phone_ids.size(), "weighted_average: answers and phone ids differ in length");
  double wsum = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < answers.size(); ++i) {
    const auto it = weights.find(phone_ids[i]);
    if (it == weights.end()) throw ContractError("weighted_average: no weight for phone " + phone_ids[i]);
    wsum += it->second;
    acc += it->second * answers[i].mu;
  }
  require(wsum > 0.0, "weighted_average: weights of present phones sum to zero");
  return acc / wsum;
}

/// Cluster the values into k groups (exact 1-D k-means) and return the mean of
/// the largest cluster. Fewer than k values are treated as one cluster. Size
/// ties go to the cluster with smaller variance, then smaller mean. When several
/// partitions tie on total SSE, the same rule picks across all of them.
inline double mv_infer(std::span<const double> values, std::size_t k) {
  require(!values.empty(), "mv_infer: empty group");
  require(k >= 1, "mv_infer: k must be positive");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  if (sorted.size() < k) return make_segment(sorted, 0, sorted.size()).mean;
  std::vector<Segment> clusters;
  for (auto& part : kmeans1d_all_optimal(sorted, k)) clusters.insert(clusters.end(), part.begin(), part.end());
  const auto better = [](const Segment& a, const Segment& b) {
    if (a.size() != b.size()) return a.size() > b.size();
    const double va = a.sse / static_cast<double>(a.size());
    const double vb = b.sse / static_cast<double>(b.size());
    if (std::abs(va - vb) > sse_tie_tolerance(std::max(va, vb))) return va < vb;
    return a.mean < b.mean;
  };
  return std::min_element(clusters.begin(), clusters.end(), better)->mean;
}

inline double mv_infer(std::span<const Answer> answers, std::size_t k) {
  std::vector<double> mu;
  for (const auto& a : answers) mu.push_back(a.mu);
  return mv_infer(mu, k);
}

/// Answers indexed by (group, phone); a phone answers at most once per group.
struct AnswerMatrix {
  struct Entry {
    std::size_t phone = 0;
    double mu = 0.0;
  };
  std::vector<std::string> phones;
  std::vector<std::vector<Entry>> groups;

  static AnswerMatrix from_groups(std::span<const AnswerGroup> groups) {
    AnswerMatrix m;
    std::map<std::string, std::size_t> index;
    for (const auto& g : groups) {
      require(g.phone_ids.size() == g.answers.size(), "AnswerMatrix: group without phone ids");
      std::vector<Entry> row;
      for (std::size_t i = 0; i < g.answers.size(); ++i) {
        auto [it, inserted] = index.try_emplace(g.phone_ids[i], m.phones.size());
        if (inserted) m.phones.push_back(g.phone_ids[i]);
        row.push_back({it->second, g.answers[i].mu});
      }
      m.groups.push_back(std::move(row));
    }
    return m;
  }
};

struct PmResult {
  std::vector<double> truths;
  std::vector<double> weights;  // per phone, sums to 1
  std::size_t iterations = 0;
};

/// Iterative truth discovery with per-phone weights
/// w_n = -log(sum of n's squared deviations / sum over all phones).
inline PmResult pm_infer(const AnswerMatrix& m, std::size_t max_iter = 100, double tol = 1e-6) {
  require(!m.groups.empty(), "pm_infer: no groups");
  const std::size_t P = m.phones.size();
  PmResult r;
  r.weights.assign(P, 1.0 / static_cast<double>(P));
  r.truths.resize(m.groups.size());
  for (std::size_t g = 0; g < m.groups.size(); ++g) {
    require(!m.groups[g].empty(), "pm_infer: empty group");
    double s = 0.0;
    for (const auto& e : m.groups[g]) s += e.mu;
    r.truths[g] = s / static_cast<double>(m.groups[g].size());
  }
  constexpr double kWeightFloor = 1e-6;
  for (r.iterations = 1; r.iterations <= max_iter; ++r.iterations) {
    std::vector<double> dist(P, 0.0);
    double total = 0.0;
    for (std::size_t g = 0; g < m.groups.size(); ++g)
      for (const auto& e : m.groups[g]) {
        const double d = (e.mu - r.truths[g]) * (e.mu - r.truths[g]);
        dist[e.phone] += d;
        total += d;
      }
    if (total == 0.0) break;  // every answer equals its truth: fixed point
    double wsum = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
      const double ratio = std::max(dist[p] / total, std::numeric_limits<double>::min());
      r.weights[p] = std::max(-std::log(ratio), kWeightFloor);
      wsum += r.weights[p];
    }
    for (auto& w : r.weights) w /= wsum;
    double change = 0.0;
    for (std::size_t g = 0; g < m.groups.size(); ++g) {
      double acc = 0.0, ws = 0.0;
      for (const auto& e : m.groups[g]) {
        acc += r.weights[e.phone] * e.mu;
        ws += r.weights[e.phone];
      }
      const double t = acc / ws;
      change = std::max(change, std::abs(t - r.truths[g]));
      r.truths[g] = t;
    }
    if (change < tol) break;
  }
  r.iterations = std::min(r.iterations, max_iter);
  return r;
}

/// Discretized Dawid-Skene: answers are binned into n_bins equal-width bins
/// over the observed range, EM fits per-phone confusion matrices, and each
/// group returns the center of its posterior-mode bin.
inline std::vector<double> ds_infer(const AnswerMatrix& m, std::size_t n_bins = 20, std::size_t max_iter = 50) {
  require(!m.groups.empty(), "ds_infer: no groups");
  require(n_bins >= 1, "ds_infer: need at least one bin");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& g : m.groups) {
    require(!g.empty(), "ds_infer: empty group");
    for (const auto& e : g) {
      lo = std::min(lo, e.mu);
      hi = std::max(hi, e.mu);
    }
  }
  std::vector<double> out(m.groups.size());
  if (hi - lo <= 0.0) {
    for (std::size_t g = 0; g < m.groups.size(); ++g) {
      double s = 0.0;
      for (const auto& e : m.groups[g]) s += e.mu;
      out[g] = s / static_cast<double>(m.groups[g].size());
    }
    return out;
  }
  const std::size_t J = n_bins;
  const double width = (hi - lo) / static_cast<double>(J);
  const auto bin_of = [&](double v) {
    return std::min(J - 1, static_cast<std::size_t>(std::floor((v - lo) / width)));
  };
  const auto center = [&](std::size_t j) { return lo + (static_cast<double>(j) + 0.5) * width; };
  const std::size_t P = m.phones.size();
  const std::size_t G = m.groups.size();
  constexpr double smooth = 0.01;

  std::vector<std::vector<double>> post(G, std::vector<double>(J, 0.0));
  for (std::size_t g = 0; g < G; ++g) {
    for (const auto& e : m.groups[g]) post[g][bin_of(e.mu)] += 1.0;
    for (auto& v : post[g]) v /= static_cast<double>(m.groups[g].size());
  }
  std::vector<double> prior(J);
  std::vector<double> conf(P * J * J);  // conf[(p*J + true)*J + observed]
  for (std::size_t it = 0; it < max_iter; ++it) {
    std::fill(prior.begin(), prior.end(), smooth);
    std::fill(conf.begin(), conf.end(), smooth);
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t j = 0; j < J; ++j) {
        prior[j] += post[g][j];
        for (const auto& e : m.groups[g]) conf[(e.phone * J + j) * J + bin_of(e.mu)] += post[g][j];
      }
    const double psum = std::accumulate(prior.begin(), prior.end(), 0.0);
    for (auto& v : prior) v /= psum;
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t j = 0; j < J; ++j) {
        double* row = &conf[(p * J + j) * J];
        const double rs = std::accumulate(row, row + J, 0.0);
        for (std::size_t l = 0; l < J; ++l) row[l] /= rs;
      }
    double change = 0.0;
    for (std::size_t g = 0; g < G; ++g) {
      std::vector<double> logp(J);
      for (std::size_t j = 0; j < J; ++j) {
        logp[j] = std::log(prior[j]);
        for (const auto& e : m.groups[g]) logp[j] += std::log(conf[(e.phone * J + j) * J + bin_of(e.mu)]);
      }
      const double mx = *std::max_element(logp.begin(), logp.end());
      double z = 0.0;
      for (auto& v : logp) z += (v = std::exp(v - mx));
      for (std::size_t j = 0; j < J; ++j) {
        const double nv = logp[j] / z;
        change = std::max(change, std::abs(nv - post[g][j]));
        post[g][j] = nv;
      }
    }
    if (change < 1e-6) break;
  }
  for (std::size_t g = 0; g < G; ++g)
    out[g] = center(static_cast<std::size_t>(std::max_element(post[g].begin(), post[g].end()) - post[g].begin()));
  return out;
}

/// Numeric adaptation of the ZenCrowd model: each phone has a scalar
/// reliability; a phone supports a candidate truth (any answer in the group)
/// when it lies within `support_radius`. EM over candidate posteriors; the
/// group truth is the posterior-weighted mean of the candidates.
inline std::vector<double> zc_infer(const AnswerMatrix& m, double support_radius = 0.5, std::size_t max_iter = 50) {
  require(!m.groups.empty(), "zc_infer: no groups");
  const std::size_t P = m.phones.size();
  std::vector<double> q(P, 0.7);
  std::vector<std::vector<double>> post(m.groups.size());
  const auto supports = [&](double answer, double cand) { return std::abs(answer - cand) < support_radius; };
  for (std::size_t it = 0; it < max_iter; ++it) {
    for (std::size_t g = 0; g < m.groups.size(); ++g) {
      const auto& row = m.groups[g];
      require(!row.empty(), "zc_infer: empty group");
      std::vector<double> logp(row.size(), 0.0);
      for (std::size_t c = 0; c < row.size(); ++c)
        for (const auto& e : row) logp[c] += std::log(supports(e.mu, row[c].mu) ? q[e.phone] : 1.0 - q[e.phone]);
      const double mx = *std::max_element(logp.begin(), logp.end());
      double z = 0.0;
      for (auto& v : logp) z += (v = std::exp(v - mx));
      for (auto& v : logp) v /= z;
      post[g] = std::move(logp);
    }
    std::vector<double> hit(P, 0.0), seen(P, 0.0);
    for (std::size_t g = 0; g < m.groups.size(); ++g) {
      const auto& row = m.groups[g];
      for (const auto& e : row) {
        double mass = 0.0;
        for (std::size_t c = 0; c < row.size(); ++c)
          if (supports(e.mu, row[c].mu)) mass += post[g][c];
        hit[e.phone] += mass;
        seen[e.phone] += 1.0;
      }
    }
    double change = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
      const double nq = seen[p] > 0 ? std::clamp(hit[p] / seen[p], 0.01, 0.99) : q[p];
      change = std::max(change, std::abs(nq - q[p]));
      q[p] = nq;
    }
    if (change < 1e-6) break;
  }
  std::vector<double> out(m.groups.size());
  for (std::size_t g = 0; g < m.groups.size(); ++g) {
    double acc = 0.0;
    for (std::size_t c = 0; c < m.groups[g].size(); ++c) acc += post[g][c] * m.groups[g][c].mu;
    out[g] = acc;
  }
  return out;
}

}  // namespace crowdtemp
