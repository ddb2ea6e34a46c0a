#pragma once

// Crowdsourcing group construction over per-phone datasets and automatic
// label inference for newly joined phones.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "crowdtemp/data.hpp"
#include "crowdtemp/errors.hpp"
#include "crowdtemp/estimator.hpp"
#include "crowdtemp/truthinf.hpp"

namespace crowdtemp {

inline constexpr double kLabelGrid = 0.1;  // degC; labels match when equal on this grid

inline std::int64_t label_key(double label, double grid = kLabelGrid) { return std::llround(label / grid); }

/// Sample indices of one phone bucketed by label key.
class LabelIndex {
 public:
  LabelIndex() = default;
  LabelIndex(const PhoneDataset& d, double grid = kLabelGrid) {
    for (std::size_t i = 0; i < d.samples.size(); ++i) buckets_[label_key(d.samples[i].ambient, grid)].push_back(i);
    for (const auto& [k, v] : buckets_) keys_.push_back(k);
  }
  const std::vector<std::int64_t>& keys() const { return keys_; }  // ascending
  const std::vector<std::size_t>* find(std::int64_t key) const {
    auto it = buckets_.find(key);
    return it == buckets_.end() ? nullptr : &it->second;
  }

 private:
  std::map<std::int64_t, std::vector<std::size_t>> buckets_;
  std::vector<std::int64_t> keys_;
};

struct GroupMember {
  std::string phone_id;
  Sample sample;
};

struct CrowdGroup {
  std::vector<GroupMember> members;
  double common_label = 0.0;
};

struct GroupConfig {
  std::size_t min_size = 2;
  std::size_t max_size = 6;
  std::size_t max_retries = 100;
  double label_grid = kLabelGrid;
};

namespace detail {

inline std::vector<std::size_t> choose_distinct(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> d(i, n - 1);
    std::swap(idx[i], idx[d(rng)]);
  }
  idx.resize(k);
  return idx;
}

template <class T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

}  // namespace detail

/// Groups of k ~ Uniform{min..max} distinct phones sharing one label: pick the
/// phones, pick a label from their common label set, then one sample per phone
/// with that label. Combinations without a common label are redrawn.
inline std::vector<CrowdGroup> build_group_set(std::span<const PhoneDataset> contributors, std::size_t n_groups,
                                               std::uint64_t seed, const GroupConfig& cfg = {}) {
  require(contributors.size() >= 2, "build_group_set: need at least 2 contributors");
  require(cfg.min_size >= 2 && cfg.min_size <= cfg.max_size, "build_group_set: invalid group size range");
  std::vector<LabelIndex> index;
  for (const auto& d : contributors) index.emplace_back(d, cfg.label_grid);
  const std::size_t k_max = std::min(cfg.max_size, contributors.size());
  const std::size_t k_min = std::min(cfg.min_size, k_max);
  std::mt19937_64 rng(seed);
  std::vector<CrowdGroup> out;
  out.reserve(n_groups);
  for (std::size_t g = 0; g < n_groups; ++g) {
    std::vector<std::size_t> phones;
    std::vector<std::int64_t> common;
    for (std::size_t attempt = 0; attempt <= cfg.max_retries; ++attempt) {
      const std::size_t k = std::uniform_int_distribution<std::size_t>(k_min, k_max)(rng);
      phones = detail::choose_distinct(contributors.size(), k, rng);
      common = index[phones[0]].keys();
      for (std::size_t i = 1; i < phones.size() && !common.empty(); ++i) {
        std::vector<std::int64_t> next;
        const auto& keys = index[phones[i]].keys();
        std::set_intersection(common.begin(), common.end(), keys.begin(), keys.end(), std::back_inserter(next));
        common = std::move(next);
      }
      if (!common.empty()) break;
    }
    if (common.empty()) {
      std::string combo;
      for (auto p : phones) combo += (combo.empty() ? "" : ",") + contributors[p].phone_id;
      throw ContractError("build_group_set: no common label after " + std::to_string(cfg.max_retries) +
                          " retries (last combination: " + combo + ")");
    }
    const std::int64_t key = detail::pick(common, rng);
    CrowdGroup group;
    group.common_label = static_cast<double>(key) * cfg.label_grid;
    for (auto p : phones) {
      const auto& rows = *index[p].find(key);
      group.members.push_back({contributors[p].phone_id, contributors[p].samples[detail::pick(rows, rng)]});
    }
    out.push_back(std::move(group));
  }
  return out;
}

using EstimatorRegistry = std::map<std::string, EstimatorModel>;

inline const EstimatorModel& lookup(const EstimatorRegistry& registry, const std::string& phone_id) {
  auto it = registry.find(phone_id);
  if (it == registry.end()) throw ContractError("no trained estimator for phone " + phone_id);
  return it->second;
}

inline AnswerGroup answers_for_group(const CrowdGroup& group, const EstimatorRegistry& registry) {
  AnswerGroup out;
  out.truth = group.common_label;
  for (const auto& m : group.members) {
    out.answers.push_back(predict(lookup(registry, m.phone_id), m.sample));
    out.phone_ids.push_back(m.phone_id);
  }
  return out;
}

inline std::vector<AnswerGroup> answers_for_groups(std::span<const CrowdGroup> groups,
                                                   const EstimatorRegistry& registry) {
  std::vector<AnswerGroup> out;
  out.reserve(groups.size());
  for (const auto& g : groups) out.push_back(answers_for_group(g, registry));
  return out;
}

// ---------------------------------------------------------------------------
// Inferred labels for a participant

struct LabeledByCrowd {
  std::size_t sample_index = 0;  // into the participant's dataset
  Sample sample;                 // carries the true label, used only for evaluation
  double inferred_label = 0.0;
  double inferred_sigma = 0.0;
  std::size_t contributor_count = 0;
};

struct LabelInference {
  std::vector<LabeledByCrowd> labeled;
  std::size_t skipped = 0;  // samples whose label fewer than 2 contributors share
};

struct LabelInferenceConfig {
  std::size_t fixed_k = 0;  // 0: draw k ~ Uniform{min_k..max_k} per sample
  std::size_t min_k = 2;
  std::size_t max_k = 6;
  double label_grid = kLabelGrid;
};

/// For each participant sample, draw k contributor samples with the same
/// label from k distinct contributors, estimate with their models and fold
/// the answers with the CBTS aggregator. The participant's own label is used
/// only to find matching contributor data, never as an input to inference.
inline LabelInference infer_labels_for_participant(const PhoneDataset& participant,
                                                   std::span<const PhoneDataset> contributors,
                                                   const EstimatorRegistry& registry, const AggregatorModel& cbts,
                                                   std::uint64_t seed, const LabelInferenceConfig& cfg = {}) {
  require(cfg.min_k >= 2 && cfg.min_k <= cfg.max_k, "infer_labels: invalid k range");
  std::vector<LabelIndex> index;
  for (const auto& d : contributors) index.emplace_back(d, cfg.label_grid);
  std::mt19937_64 rng(seed);
  LabelInference out;
  for (std::size_t i = 0; i < participant.samples.size(); ++i) {
    const auto key = label_key(participant.samples[i].ambient, cfg.label_grid);
    std::vector<std::size_t> available;
    for (std::size_t c = 0; c < contributors.size(); ++c)
      if (index[c].find(key)) available.push_back(c);
    std::size_t k = cfg.fixed_k ? cfg.fixed_k : std::uniform_int_distribution<std::size_t>(cfg.min_k, cfg.max_k)(rng);
    k = std::min(k, available.size());
    if (k < 2) {
      ++out.skipped;
      continue;
    }
    const auto chosen = detail::choose_distinct(available.size(), k, rng);
    std::vector<Answer> answers;
    for (auto c : chosen) {
      const auto& d = contributors[available[c]];
      const auto& s = d.samples[detail::pick(*index[available[c]].find(key), rng)];
      answers.push_back(predict(lookup(registry, d.phone_id), s));
    }
    const auto inferred = cbts_fold(cbts, answers);
    out.labeled.push_back({i, participant.samples[i], inferred.mu, inferred.sigma, k});
  }
  return out;
}

inline double label_quality(std::span<const LabeledByCrowd> labeled) {
  require(!labeled.empty(), "label_quality: no labeled samples");
  double s = 0.0;
  for (const auto& l : labeled) s += std::abs(l.inferred_label - l.sample.ambient);
  return s / static_cast<double>(labeled.size());
}

/// Columns: sample_index,true_label,inferred_label,inferred_sigma,k
inline void write_inferred_csv(std::ostream& out, std::span<const LabeledByCrowd> labeled) {
  out << "sample_index,true_label,inferred_label,inferred_sigma,k\n";
  for (const auto& l : labeled)
    out << l.sample_index << ',' << detail::format_double(l.sample.ambient) << ','
        << detail::format_double(l.inferred_label) << ',' << detail::format_double(l.inferred_sigma) << ','
        << l.contributor_count << '\n';
}

}  // namespace crowdtemp
