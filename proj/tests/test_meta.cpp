#include <gtest/gtest.h>

#include <chrono>
#include <set>

#include "crowdtemp/meta.hpp"

using namespace crowdtemp;

namespace {

// Points with distinct labels so task membership can be read off y.
std::vector<PhonePoints> phones(std::size_t count, std::size_t per_phone, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> f(0, 1);
  std::vector<PhonePoints> out;
  for (std::size_t p = 0; p < count; ++p) {
    PhonePoints pp{"ph" + std::to_string(p), {}};
    const double offset = 0.5 * static_cast<double>(p);
    for (std::size_t i = 0; i < per_phone; ++i) {
      LabeledPoint lp;
      for (auto& x : lp.x) x = f(rng);
      lp.y = 20.0 + offset + 2.0 * lp.x[2] + 1e-4 * static_cast<double>(i);
      pp.points.push_back(lp);
    }
    out.push_back(std::move(pp));
  }
  return out;
}

ParamVector theta0() { return init_estimator_params(3, 21.0); }

MetaConfig sgd_config() {
  MetaConfig c;
  c.meta_optimizer = OptimizerKind::sgd;
  c.alpha = 1e-3;
  c.beta = 1e-3;
  c.inner_steps = 3;
  return c;
}

}  // namespace

TEST(TaskSet, SupportAndQueryDisjointFromOnePhone) {
  const auto ph = phones(4, 40, 1);
  const auto tasks = build_task_set(ph, 5, 15, 200, 7);
  ASSERT_EQ(tasks.size(), 200u);
  std::set<std::string> used;
  for (const auto& t : tasks) {
    ASSERT_EQ(t.support.size(), 5u);
    ASSERT_EQ(t.query.size(), 15u);
    used.insert(t.phone_id);
    const auto& own = std::find_if(ph.begin(), ph.end(), [&](auto& p) { return p.phone_id == t.phone_id; })->points;
    std::set<double> ys;
    for (const auto* set : {&t.support, &t.query})
      for (const auto& p : *set) {
        EXPECT_TRUE(std::any_of(own.begin(), own.end(), [&](auto& o) { return o.y == p.y; }));
        ys.insert(p.y);
      }
    EXPECT_EQ(ys.size(), 20u);  // no row appears twice
  }
  EXPECT_EQ(used.size(), 4u);
}

TEST(TaskSet, OneSupportOneQuery) {
  const auto tasks = build_task_set(phones(2, 2, 2), 1, 1, 30, 3);
  for (const auto& t : tasks) EXPECT_NE(t.support[0].y, t.query[0].y);
}

TEST(TaskSet, Deterministic) {
  const auto ph = phones(3, 30, 3);
  const auto a = build_task_set(ph, 5, 15, 50, 9), b = build_task_set(ph, 5, 15, 50, 9);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].phone_id, b[i].phone_id);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(a[i].support[j].y, b[i].support[j].y);
  }
}

TEST(TaskSet, InsufficientSamples) {
  EXPECT_THROW(build_task_set(phones(2, 19, 4), 5, 15, 10, 1), ContractError);
}

TEST(MamlAdapt, ZeroStepsIsIdentity) {
  const auto ph = phones(1, 10, 5);
  const auto th = theta0();
  EXPECT_EQ(maml_adapt(th, ph[0].points, 1e-3, 0), th);
}

TEST(MamlAdapt, StepwiseComposition) {
  const auto ph = phones(1, 5, 6);
  const auto th = theta0();
  auto stepwise = th;
  for (int i = 0; i < 20; ++i) stepwise = maml_adapt(stepwise, ph[0].points, 1e-3, 1);
  EXPECT_EQ(maml_adapt(th, ph[0].points, 1e-3, 20), stepwise);
}

TEST(MamlAdapt, OneStepIsSupportGradientStep) {
  const auto ph = phones(1, 5, 6);
  const auto th = theta0();
  const auto g = mean_nll_gradient(th, ph[0].points).grad;
  EXPECT_EQ(maml_adapt(th, ph[0].points, 0.01, 1), sgd_step(th, g, 0.01));
}

TEST(MamlAdapt, LeavesThetaUntouched) {
  const auto ph = phones(2, 30, 7);
  const auto th = theta0();
  const auto before = checksum(th);
  const auto tasks = build_task_set(ph, 5, 15, 20, 1);
  meta_batch_gradient(th, tasks, 1e-3, 5);
  EXPECT_EQ(checksum(th), before);
}

TEST(MamlAdapt, UnderTenthOfASecond) {
  const auto ph = phones(1, 5, 8);
  const auto th = theta0();
  const auto t0 = std::chrono::steady_clock::now();
  maml_adapt(th, ph[0].points, 1e-3, 20);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 0.1);
}

TEST(MetaBatchGradient, SumOfTaskGradients) {
  const auto tasks = build_task_set(phones(3, 30, 9), 5, 15, 12, 2);
  const auto th = theta0();
  GradientVector expect(th.layout_ptr());
  for (const auto& t : tasks) {
    const auto adapted = maml_adapt(th, t.support, 1e-3, 4);
    const auto g = mean_nll_gradient(adapted, t.query).grad;
    for (std::size_t i = 0; i < g.size(); ++i) expect[i] += g[i];
  }
  EXPECT_EQ(meta_batch_gradient(th, tasks, 1e-3, 4).raw(), expect.raw());
}

TEST(MamlTrain, OneFullBatchSgdEpoch) {
  const auto tasks = build_task_set(phones(3, 30, 10), 5, 15, 16, 3);
  const auto th = theta0();
  auto cfg = sgd_config();
  cfg.task_batch = tasks.size();
  cfg.max_epochs = 1;
  const auto r = maml_train(tasks, th, cfg);
  GradientVector sum(th.layout_ptr());
  for (const auto& t : tasks) accumulate(sum, task_query_gradient(th, t, cfg.alpha, cfg.inner_steps).grad);
  for (std::size_t i = 0; i < th.size(); ++i) EXPECT_NEAR(r.params[i], th[i] - cfg.beta * sum[i], 1e-12) << i;
}

TEST(MamlTrain, NoInnerStepsSingleTaskBatchesIsPlainTraining) {
  const auto tasks = build_task_set(phones(2, 30, 11), 5, 15, 6, 4);
  const auto th = theta0();
  auto cfg = sgd_config();
  cfg.task_batch = 1;
  cfg.inner_steps = 0;
  cfg.max_epochs = 1;
  cfg.seed = 17;
  const auto r = maml_train(tasks, th, cfg);
  // reference: SGD over each task's query set in the seeded shuffle order
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(tasks.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  auto ref = th;
  for (auto i : order) ref = sgd_step(ref, mean_nll_gradient(ref, tasks[i].query).grad, cfg.beta);
  EXPECT_EQ(r.params, ref);
}

TEST(MamlTrain, Deterministic) {
  const auto ph = phones(3, 30, 12);
  const auto tasks = build_task_set(ph, 5, 15, 40, 5);
  const auto val = build_task_set(ph, 5, 15, 10, 6);
  MetaConfig cfg;
  cfg.task_batch = 10;
  cfg.max_epochs = 3;
  EXPECT_EQ(maml_train(tasks, theta0(), cfg, val).params, maml_train(tasks, theta0(), cfg, val).params);
}

TEST(MamlTrain, EarlyStopReturnsBestValidation) {
  const auto ph = phones(3, 30, 13);
  const auto tasks = build_task_set(ph, 5, 15, 40, 7);
  const auto val = build_task_set(ph, 5, 15, 10, 8);
  MetaConfig cfg;
  cfg.task_batch = 10;
  cfg.max_epochs = 30;
  cfg.patience = 3;
  const auto r = maml_train(tasks, theta0(), cfg, val);
  for (const auto& e : r.trace) EXPECT_LE(r.trace.at(r.best_epoch).val_mae, e.val_mae);
  EXPECT_DOUBLE_EQ(meta_validate(r.params, val, cfg.alpha, cfg.finetune_steps), r.trace.at(r.best_epoch).val_mae);
}

TEST(MamlTrain, BeatsPlainPretrainingOnHeterogeneousPhones) {
  // phones differ by an offset the support set reveals
  const auto ph = phones(8, 60, 14);
  std::vector<PhonePoints> train(ph.begin(), ph.begin() + 6), held(ph.begin() + 6, ph.end());
  MetaConfig cfg;
  cfg.task_batch = 50;
  cfg.inner_steps = 20;
  cfg.max_epochs = 40;
  cfg.patience = 10;
  const auto tasks = build_task_set(train, 5, 15, 400, 1);
  const auto val = build_task_set(train, 5, 15, 60, 2);
  const auto test = build_task_set(held, 5, 15, 100, 3);
  std::vector<LabeledPoint> pooled;
  for (const auto& p : train) pooled.insert(pooled.end(), p.points.begin(), p.points.end());
  TrainConfig tc;
  tc.seed = 4;
  const auto pt = pretrain_baseline(pooled, tc).params;
  const auto maml = maml_train(tasks, init_estimator_params(5, label_mean(pooled)), cfg, val).params;
  EXPECT_LT(meta_validate(maml, test, cfg.alpha, 20), meta_validate(pt, test, cfg.alpha, 20));
}

TEST(MetaValidate, ZeroStepsIsRawQueryMae) {
  const auto tasks = build_task_set(phones(2, 30, 15), 5, 15, 10, 9);
  const auto th = theta0();
  double expect = 0;
  for (const auto& t : tasks) expect += mae(th, t.query) / static_cast<double>(tasks.size());
  EXPECT_DOUBLE_EQ(meta_validate(th, tasks, 1e-3, 0), expect);
}

TEST(MetaValidate, AdaptationHelps) {
  const auto ph = phones(3, 40, 16);
  const auto tasks = build_task_set(ph, 5, 15, 30, 10);
  std::vector<LabeledPoint> pooled;
  for (const auto& p : ph) pooled.insert(pooled.end(), p.points.begin(), p.points.end());
  const auto pt = pretrain_baseline(pooled, {}).params;
  EXPECT_LT(meta_validate(pt, tasks, 1e-3, 20), meta_validate(pt, tasks, 1e-3, 0));
}

TEST(DirectTrain, OverfitsDuplicatedSample) {
  LabeledPoint p;
  for (std::size_t j = 0; j < kFeatureCount; ++j) p.x[j] = 0.1 * static_cast<double>(j);
  p.y = 26.3;
  const std::vector<LabeledPoint> few(5, p);
  TrainConfig tc;
  tc.seed = 2;
  const auto r = direct_train_baseline(few, tc);
  const auto init = predict_normalized(init_estimator_params(2, 26.3), p.x);
  const auto out = predict_normalized(r.params, p.x);
  EXPECT_LE(std::abs(out.mu - p.y), std::abs(init.mu - p.y));
  EXPECT_LT(std::abs(out.mu - p.y), 0.05);
}

TEST(MetaConfig, Validation) {
  MetaConfig c;
  c.first_order = false;
  EXPECT_THROW(validate(c), ContractError);
  c = {};
  c.alpha = 0;
  EXPECT_THROW(validate(c), ContractError);
  c = {};
  c.k_spt = 0;
  EXPECT_THROW(validate(c), ContractError);
}
