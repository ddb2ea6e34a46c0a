#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "crowdtemp/crowdsim.hpp"

using namespace crowdtemp;

namespace {

PhoneDataset labeled(const std::string& id, std::initializer_list<double> labels) {
  PhoneDataset d{id, PhoneRole::contributor, {}};
  for (double l : labels) {
    Sample s;
    s.battery_voltage = 4.0;
    s.battery_temp = l + 1.0;
    s.ambient = l;
    d.samples.push_back(s);
  }
  return d;
}

// Estimator whose mu is the constant `value` for every input.
EstimatorModel constant_estimator(const std::string& id, double value) {
  EstimatorModel m;
  m.phone_id = id;
  for (auto& s : m.norm.std) s = 1.0;
  const auto& layout = *estimator_network().layout();
  for (std::size_t e = 0; e < layout.entries().size(); ++e)
    if (layout.entries()[e].name == "mu_head.bias") m.params[layout.offset(e)] = value;
  return m;
}

struct World {
  std::vector<PhoneDataset> train, validation;
  PhoneDataset participant;
  EstimatorRegistry registry;
  std::map<std::string, double> val_mae;
  AggregatorModel cbts;
  std::vector<AnswerGroup> test;
};

// Six synthetic contributors plus one participant, trained end to end.
const World& world() {
  static const World w = [] {
    World r;
    SynthConfig c;
    c.ambient_seed = 77;
    const auto params = draw_phone_params(7, 31);
    std::vector<PhoneDataset> all;
    for (std::size_t i = 0; i < 7; ++i) {
      c.seed = 100 + i;
      all.push_back(synth_generate("phone" + std::to_string(i + 1), params[i], c));
    }
    for (std::size_t i = 0; i < 6; ++i) {
      auto s = split(all[i], 0.7, 200 + i);
      r.train.push_back(std::move(s.train));
      r.validation.push_back(std::move(s.validation));
    }
    r.participant = split(all[6], 0.7, 206).train;
    std::vector<const PhoneDataset*> ptrs;
    for (const auto& d : r.train) ptrs.push_back(&d);
    const auto norm = fit_normalizer(ptrs);
    for (std::size_t i = 0; i < 6; ++i) {
      TrainConfig tc;
      tc.seed = 300 + i;
      r.registry[r.train[i].phone_id] = train(r.train[i], norm, tc).model;
      r.val_mae[r.train[i].phone_id] = evaluate_mae(r.registry[r.train[i].phone_id], r.validation[i]);
    }
    const auto g_train = build_group_set(r.train, 1500, 1);
    const auto g_val = build_group_set(r.validation, 300, 2);
    const auto g_test = build_group_set(r.validation, 1500, 3);
    CbtsConfig cc;
    cc.seed = 4;
    r.cbts = cbts_train(answers_for_groups(g_train, r.registry), answers_for_groups(g_val, r.registry), cc).model;
    r.test = answers_for_groups(g_test, r.registry);
    return r;
  }();
  return w;
}

double mae_of(const std::vector<AnswerGroup>& groups, const std::function<double(const AnswerGroup&)>& f) {
  double s = 0;
  for (const auto& g : groups) s += std::abs(f(g) - *g.truth);
  return s / static_cast<double>(groups.size());
}

}  // namespace

TEST(GroupSet, Invariants) {
  const auto& w = world();
  const auto groups = build_group_set(w.train, 500, 9);
  ASSERT_EQ(groups.size(), 500u);
  std::set<std::size_t> sizes;
  for (const auto& g : groups) {
    ASSERT_GE(g.members.size(), 2u);
    ASSERT_LE(g.members.size(), 6u);
    sizes.insert(g.members.size());
    std::set<std::string> ids;
    for (const auto& m : g.members) {
      ids.insert(m.phone_id);
      EXPECT_EQ(label_key(m.sample.ambient), label_key(g.common_label));
    }
    EXPECT_EQ(ids.size(), g.members.size());
  }
  EXPECT_EQ(sizes, (std::set<std::size_t>{2, 3, 4, 5, 6}));
}

TEST(GroupSet, SingleSharedLabelForcesPairs) {
  const std::vector<PhoneDataset> c{labeled("a", {20.0, 21.0, 21.0}), labeled("b", {21.0, 22.5})};
  for (const auto& g : build_group_set(c, 50, 4)) {
    EXPECT_EQ(g.members.size(), 2u);
    EXPECT_DOUBLE_EQ(g.common_label, 21.0);
  }
}

TEST(GroupSet, Deterministic) {
  const auto& w = world();
  const auto a = build_group_set(w.train, 100, 5), b = build_group_set(w.train, 100, 5);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].common_label, b[i].common_label);
    ASSERT_EQ(a[i].members.size(), b[i].members.size());
    for (std::size_t j = 0; j < a[i].members.size(); ++j) {
      EXPECT_EQ(a[i].members[j].phone_id, b[i].members[j].phone_id);
      EXPECT_EQ(a[i].members[j].sample, b[i].members[j].sample);
    }
  }
}

TEST(GroupSet, RetryBudgetExhausted) {
  const std::vector<PhoneDataset> c{labeled("a", {20.0}), labeled("b", {25.0})};
  try {
    build_group_set(c, 1, 1);
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("a"), std::string::npos);
  }
}

TEST(GroupSet, LabelGridMatching) {
  // 21.04 and 20.96 both land on 21.0 at 0.1 degC
  const std::vector<PhoneDataset> c{labeled("a", {21.04}), labeled("b", {20.96})};
  EXPECT_DOUBLE_EQ(build_group_set(c, 1, 1).at(0).common_label, 21.0);
}

TEST(AnswersForGroup, OneAnswerPerMember) {
  const auto& w = world();
  for (const auto& g : build_group_set(w.train, 50, 6)) {
    const auto a = answers_for_group(g, w.registry);
    EXPECT_EQ(a.answers.size(), g.members.size());
    EXPECT_EQ(a.phone_ids.size(), g.members.size());
    EXPECT_EQ(*a.truth, g.common_label);
  }
}

TEST(AnswersForGroup, PerfectEstimators) {
  const std::vector<PhoneDataset> c{labeled("a", {20.0, 21.0}), labeled("b", {21.0}), labeled("c", {21.0, 23.0})};
  EstimatorRegistry reg;
  for (const auto& d : c) reg[d.phone_id] = constant_estimator(d.phone_id, 21.0);
  for (const auto& g : build_group_set(c, 20, 2))
    for (const auto& a : answers_for_group(g, reg).answers) EXPECT_DOUBLE_EQ(a.mu, 21.0);
}

TEST(AnswersForGroup, MissingModel) {
  const std::vector<PhoneDataset> c{labeled("a", {21.0}), labeled("b", {21.0})};
  EstimatorRegistry reg{{"a", constant_estimator("a", 21)}};
  EXPECT_THROW(answers_for_group(build_group_set(c, 1, 1).at(0), reg), ContractError);
}

TEST(AnswersForGroup, GroupErrorTracksStandaloneMae) {
  const auto& w = world();
  double standalone = 0;
  for (const auto& [id, m] : w.val_mae) standalone += m / static_cast<double>(w.val_mae.size());
  double per_group = 0;
  for (const auto& g : w.test) {
    double s = 0;
    for (const auto& a : g.answers) s += std::abs(a.mu - *g.truth);
    per_group += s / static_cast<double>(g.answers.size()) / static_cast<double>(w.test.size());
  }
  EXPECT_LE(per_group, 3 * standalone);
}

TEST(CbtsTrained, IdenticalConfidentAnswers) {
  const auto a = agg_pair(world().cbts, {25, 0.1}, {25, 0.1});
  EXPECT_LT(std::abs(a.mu - 25), 0.5);
}

TEST(CbtsTrained, BeatsMeanAndWeightedAverage) {
  const auto& w = world();
  const double cbts = mae_of(w.test, [&](const AnswerGroup& g) { return cbts_fold(w.cbts, g.answers).mu; });
  const double mean = mae_of(w.test, [](const AnswerGroup& g) { return mean_infer(g.answers); });
  EXPECT_LE(cbts, 0.85 * mean);
}

TEST(Benchmark, DsIsWorstAndMeanImprovesWithGroupSize) {
  const auto& w = world();
  const auto m = AnswerMatrix::from_groups(w.test);
  const auto ds = ds_infer(m);
  const auto zc = zc_infer(m);
  const auto pm = pm_infer(m).truths;
  std::map<std::string, double> mae;
  std::map<std::size_t, std::pair<double, std::size_t>> by_size;
  for (std::size_t i = 0; i < w.test.size(); ++i) {
    const auto& g = w.test[i];
    const double t = *g.truth;
    mae["ds"] += std::abs(ds[i] - t);
    mae["zc"] += std::abs(zc[i] - t);
    mae["pm"] += std::abs(pm[i] - t);
    mae["mean"] += std::abs(mean_infer(g.answers) - t);
    mae["mv2"] += std::abs(mv_infer(g.answers, 2) - t);
    mae["mv3"] += std::abs(mv_infer(g.answers, 3) - t);
    mae["cbts"] += std::abs(cbts_fold(w.cbts, g.answers).mu - t);
    auto& [sum, n] = by_size[g.answers.size()];
    sum += std::abs(mean_infer(g.answers) - t);
    ++n;
  }
  for (const auto& [name, v] : mae) {
    if (name == "ds") continue;
    EXPECT_GT(mae["ds"], v) << name;
  }
  double prev = std::numeric_limits<double>::infinity();
  for (const auto& [k, acc] : by_size) {
    const double v = acc.first / static_cast<double>(acc.second);
    EXPECT_LT(v, prev) << "size " << k;
    prev = v;
  }
}

TEST(InferLabels, PerfectContributorsGiveTrueLabel) {
  const std::vector<PhoneDataset> c{labeled("a", {20.0, 21.0}), labeled("b", {21.0, 20.0}), labeled("c", {21.0})};
  EstimatorRegistry reg;
  for (const auto& d : c) reg[d.phone_id] = constant_estimator(d.phone_id, 21.0);
  AggregatorModel agg;  // zero parameters, centered: the pair midpoint
  agg.input = AggInput::centered;
  auto p = labeled("p", {21.0, 21.0, 21.0});
  const auto r = infer_labels_for_participant(p, c, reg, agg, 3);
  ASSERT_EQ(r.labeled.size(), 3u);
  for (const auto& l : r.labeled) {
    EXPECT_EQ(l.inferred_label, 21.0);
    EXPECT_GE(l.contributor_count, 2u);
    EXPECT_LE(l.contributor_count, 3u);
    EXPECT_GE(l.inferred_sigma, kSigmaFloor);
  }
}

TEST(InferLabels, UnmatchableLabelsAreSkipped) {
  const std::vector<PhoneDataset> c{labeled("a", {20.0, 21.0}), labeled("b", {21.0})};
  EstimatorRegistry reg;
  for (const auto& d : c) reg[d.phone_id] = constant_estimator(d.phone_id, 21.0);
  const auto r = infer_labels_for_participant(labeled("p", {20.0, 21.0, 30.0}), c, reg, AggregatorModel{}, 1);
  EXPECT_EQ(r.labeled.size(), 1u);
  EXPECT_EQ(r.skipped, 2u);
  EXPECT_EQ(r.labeled[0].sample_index, 1u);
}

TEST(InferLabels, IgnoresParticipantFeatures) {
  const auto& w = world();
  auto p = w.participant;
  p.samples.resize(100);
  auto scrambled = p;
  for (auto& s : scrambled.samples) s.battery_temp += 7.0, s.screen_on = 1 - s.screen_on;
  const auto a = infer_labels_for_participant(p, w.train, w.registry, w.cbts, 11);
  const auto b = infer_labels_for_participant(scrambled, w.train, w.registry, w.cbts, 11);
  ASSERT_EQ(a.labeled.size(), b.labeled.size());
  for (std::size_t i = 0; i < a.labeled.size(); ++i) EXPECT_EQ(a.labeled[i].inferred_label, b.labeled[i].inferred_label);
}

TEST(InferLabels, QualityNearCbtsGroupError) {
  const auto& w = world();
  const auto r = infer_labels_for_participant(w.participant, w.train, w.registry, w.cbts, 12);
  ASSERT_FALSE(r.labeled.empty());
  const double cbts = mae_of(w.test, [&](const AnswerGroup& g) { return cbts_fold(w.cbts, g.answers).mu; });
  EXPECT_LE(label_quality(r.labeled), 1.25 * cbts);
}

TEST(InferLabels, Deterministic) {
  const auto& w = world();
  auto p = w.participant;
  p.samples.resize(200);
  std::ostringstream a, b;
  write_inferred_csv(a, infer_labels_for_participant(p, w.train, w.registry, w.cbts, 13).labeled);
  write_inferred_csv(b, infer_labels_for_participant(p, w.train, w.registry, w.cbts, 13).labeled);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(a.str().substr(0, a.str().find('\n')), "sample_index,true_label,inferred_label,inferred_sigma,k");
}

TEST(LabelQuality, Examples) {
  std::vector<LabeledByCrowd> l(3);
  for (std::size_t i = 0; i < 3; ++i) {
    l[i].sample.ambient = 20.0 + static_cast<double>(i);
    l[i].inferred_label = l[i].sample.ambient;
  }
  EXPECT_EQ(label_quality(l), 0.0);
  for (auto& x : l) x.inferred_label += 0.5;
  EXPECT_DOUBLE_EQ(label_quality(l), 0.5);
  EXPECT_THROW(label_quality(std::vector<LabeledByCrowd>{}), ContractError);
}
