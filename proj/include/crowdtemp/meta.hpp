#pragma once

// Meta-task construction, first-order MAML meta-training / meta-validation,
// and the pre-training and direct-training few-shot baselines.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "crowdtemp/errors.hpp"
#include "crowdtemp/estimator.hpp"
#include "crowdtemp/nn.hpp"

namespace crowdtemp {

struct Task {
  std::string phone_id;
  std::vector<LabeledPoint> support;
  std::vector<LabeledPoint> query;
};

struct PhonePoints {
  std::string phone_id;
  std::vector<LabeledPoint> points;
};

struct MetaConfig {
  double alpha = 1e-3;        // task-level (inner) learning rate
  double beta = 1e-2;         // meta learning rate
  std::size_t task_batch = 400;
  std::size_t inner_steps = 5;     // s1
  std::size_t finetune_steps = 20; // s2, used for meta-validation
  OptimizerKind meta_optimizer = OptimizerKind::adam;
  std::size_t k_spt = 5;
  std::size_t k_qry = 15;
  std::size_t max_epochs = 200;
  std::size_t patience = 20;
  std::uint64_t seed = 1;
  bool first_order = true;  // the second-order meta-gradient is not implemented
};

inline void validate(const MetaConfig& c) {
  require(c.alpha > 0 && c.beta > 0, "MetaConfig: learning rates must be positive");
  require(c.task_batch >= 1 && c.k_spt >= 1 && c.k_qry >= 1, "MetaConfig: sizes must be at least 1");
  if (!c.first_order) throw ContractError("MetaConfig: only first-order MAML is implemented");
}

/// Each task draws k_spt + k_qry distinct rows from one uniformly chosen
/// phone; the first k_spt go to the support set.
inline std::vector<Task> build_task_set(std::span<const PhonePoints> phones, std::size_t k_spt, std::size_t k_qry,
                                        std::size_t n_tasks, std::uint64_t seed) {
  require(!phones.empty(), "build_task_set: no phones");
  require(k_spt >= 1 && k_qry >= 1, "build_task_set: support and query sizes must be at least 1");
  for (const auto& p : phones)
    if (p.points.size() < k_spt + k_qry)
      throw ContractError("build_task_set: phone " + p.phone_id + " has fewer than k_spt + k_qry samples");
  std::mt19937_64 rng(seed);
  std::vector<Task> tasks;
  tasks.reserve(n_tasks);
  std::vector<std::size_t> idx;
  for (std::size_t t = 0; t < n_tasks; ++t) {
    const auto& phone = phones[std::uniform_int_distribution<std::size_t>(0, phones.size() - 1)(rng)];
    idx.resize(phone.points.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < k_spt + k_qry; ++i)
      std::swap(idx[i], idx[std::uniform_int_distribution<std::size_t>(i, idx.size() - 1)(rng)]);
    Task task{phone.phone_id, {}, {}};
    for (std::size_t i = 0; i < k_spt; ++i) task.support.push_back(phone.points[idx[i]]);
    for (std::size_t i = k_spt; i < k_spt + k_qry; ++i) task.query.push_back(phone.points[idx[i]]);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

/// s full-batch SGD steps on the support NLL, starting from a copy of theta.
inline ParamVector maml_adapt(const ParamVector& theta, std::span<const LabeledPoint> support, double alpha,
                              std::size_t steps) {
  require(!support.empty(), "maml_adapt: empty support set");
  ParamVector adapted = theta;
  ForwardTape tape;
  for (std::size_t s = 0; s < steps; ++s) adapted = sgd_step(adapted, mean_nll_gradient(adapted, support, tape).grad, alpha);
  return adapted;
}

/// First-order query gradient of one task: adapt a copy of theta on the
/// support set, then differentiate the query NLL at the adapted parameters.
inline BatchGradient task_query_gradient(const ParamVector& theta, const Task& task, double alpha,
                                         std::size_t inner_steps) {
  const auto adapted = maml_adapt(theta, task.support, alpha, inner_steps);
  return mean_nll_gradient(adapted, task.query);
}

/// Sum of first-order query gradients over a batch of tasks, in task order.
inline GradientVector meta_batch_gradient(const ParamVector& theta, std::span<const Task> tasks, double alpha,
                                          std::size_t inner_steps) {
  GradientVector sum(theta.layout_ptr());
  for (const auto& t : tasks) accumulate(sum, task_query_gradient(theta, t, alpha, inner_steps).grad);
  return sum;
}

/// Mean over tasks of the query MAE after adapting on the support set.
inline double meta_validate(const ParamVector& theta, std::span<const Task> tasks, double alpha, std::size_t steps) {
  require(!tasks.empty(), "meta_validate: no tasks");
  double total = 0.0;
  for (const auto& t : tasks) total += mae(maml_adapt(theta, t.support, alpha, steps), t.query);
  return total / static_cast<double>(tasks.size());
}

struct MetaEpoch {
  std::size_t epoch = 0;
  double val_mae = 0.0;  // NaN when no validation tasks were given
};

struct MamlResult {
  ParamVector params;
  std::vector<MetaEpoch> trace;
  std::size_t best_epoch = 0;
};

inline OptimizerState make_meta_optimizer(const MetaConfig& cfg, const ParamLayout& layout) {
  return cfg.meta_optimizer == OptimizerKind::adam ? make_adam(cfg.beta, layout) : make_sgd(cfg.beta);
}

/// Meta-training. Per epoch the tasks are shuffled and consumed in batches of
/// `task_batch`; each batch applies one meta step with the summed query
/// gradients. With validation tasks, stops after `patience` epochs without a
/// lower meta-validation MAE and returns the best parameters.
inline MamlResult maml_train(std::span<const Task> tasks, const ParamVector& init, const MetaConfig& cfg,
                             std::span<const Task> validation = {}) {
  validate(cfg);
  require(!tasks.empty(), "maml_train: no tasks");
  MamlResult out{init, {}, 0};
  ParamVector theta = init;
  auto opt = make_meta_optimizer(cfg, theta.layout());
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(tasks.size());
  std::iota(order.begin(), order.end(), 0);
  const bool early_stop = !validation.empty();
  double best = early_stop ? meta_validate(theta, validation, cfg.alpha, cfg.finetune_steps) : 0.0;
  out.trace.push_back({0, early_stop ? best : std::nan("")});
  std::size_t stale = 0;
  std::vector<Task> batch;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs && (!early_stop || stale < cfg.patience); ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size(); b += cfg.task_batch) {
      const std::size_t e = std::min(order.size(), b + cfg.task_batch);
      batch.clear();
      for (std::size_t i = b; i < e; ++i) batch.push_back(tasks[order[i]]);
      GradientVector g = meta_batch_gradient(theta, batch, cfg.alpha, cfg.inner_steps);
      for (double v : g.values())
        if (!std::isfinite(v)) throw TrainingError("maml_train: non-finite meta-gradient at epoch " + std::to_string(epoch));
      optimizer_step(opt, theta, g);
    }
    if (!early_stop) {
      out.trace.push_back({epoch, std::nan("")});
      out.params = theta;
      out.best_epoch = epoch;
      continue;
    }
    const double v = meta_validate(theta, validation, cfg.alpha, cfg.finetune_steps);
    if (!std::isfinite(v)) throw TrainingError("maml_train: meta-validation diverged at epoch " + std::to_string(epoch));
    out.trace.push_back({epoch, v});
    if (v < best) {
      best = v;
      out.params = theta;
      out.best_epoch = epoch;
      stale = 0;
    } else {
      ++stale;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Few-shot baselines

/// Pre-training: ordinary estimator training on the pooled contributor data.
inline FitResult pretrain_baseline(std::span<const LabeledPoint> pooled, const TrainConfig& cfg) {
  require(pooled.size() >= 2, "pretrain_baseline: need at least 2 samples");
  return fit_estimator(init_estimator_params(cfg.seed, label_mean(pooled)), pooled, cfg);
}

/// Direct training: a fresh seeded model fit to the few available samples.
inline FitResult direct_train_baseline(std::span<const LabeledPoint> few, const TrainConfig& cfg) {
  require(few.size() >= 2, "direct_train_baseline: need at least 2 samples");
  return fit_estimator(init_estimator_params(cfg.seed, label_mean(few)), few, cfg);
}

}  // namespace crowdtemp
