#pragma once

// Experiment configuration and the pipeline stages behind the CLI. Each stage
// reads its inputs from the output directory, writes its artifacts back and
// returns the tables and headline metrics it produced.
//
// Output layout:
//   config.resolved.json   canonical config the checksum is taken over
//   corpus/<phone>.csv     synthetic corpus (synth)
//   models/<phone>.model   contributor estimators (train-estimators)
//   models/cbts.model      aggregator (train-cbts)
//   models/maml.model, models/pretrain.model (fewshot)
//   labels/<phone>.csv     inferred participant labels (gen-labels)
//   tables/*.csv, plots/*.svg, fed/transcript.jsonl, report.md

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "crowdtemp/crowdsim.hpp"
#include "crowdtemp/data.hpp"
#include "crowdtemp/errors.hpp"
#include "crowdtemp/estimator.hpp"
#include "crowdtemp/fedagg.hpp"
#include "crowdtemp/meta.hpp"
#include "crowdtemp/paillier.hpp"
#include "crowdtemp/report.hpp"
#include "crowdtemp/svg.hpp"
#include "crowdtemp/truthinf.hpp"

namespace crowdtemp {

namespace fs = std::filesystem;

struct CorpusConfig {
  std::string source = "synthetic";  // synthetic | csv
  std::string csv_path;              // file or directory of CSVs when source = csv
  std::size_t phones = 9;
  std::optional<std::uint64_t> ambient_seed = 99;  // shared session temperatures
  SynthConfig synth;
  SynthRanges ranges;
};

struct GroupCounts {
  std::size_t train = 6000;
  std::size_t validation = 1500;
  std::size_t test = 6000;
};

struct FewShotConfig {
  std::size_t repetitions = 100;
  std::size_t shots = 5;
  std::vector<std::size_t> steps = {1, 20};
  std::size_t meta_train_tasks = 2000;
  std::size_t meta_val_tasks = 300;
};

struct FedStageConfig {
  FedConfig fed;
  std::size_t tasks_per_client = 20;
  double beta = 1e-4;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double equivalence_tolerance = 1e-5;
};

struct ExperimentConfig {
  std::uint64_t seed = 42;
  std::string output_dir = "out";
  bool deterministic = false;
  CorpusConfig corpus;
  std::vector<std::string> contributors;  // empty: first phones - phones/3
  std::vector<std::string> participants;  // empty: the rest
  double train_fraction = 0.7;
  TrainConfig estimator;
  CbtsConfig cbts;
  GroupCounts groups;
  LabelInferenceConfig labels;
  MetaConfig meta;
  FewShotConfig fewshot;
  FedStageConfig fed;
  std::map<std::string, std::uint64_t> seeds;  // explicit per-stage seed overrides
};

inline ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  // Inner steps match the 20-step evaluation fine-tune for the synthetic runs.
  c.meta.inner_steps = 20;
  return c;
}

// ---------------------------------------------------------------------------
// JSON (de)serialization through one schema visitor

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }
inline std::string to_string(AggInput k) { return k == AggInput::raw ? "raw" : "centered"; }
inline std::string to_string(ScreenPolicy p) {
  return p == ScreenPolicy::markov ? "markov" : p == ScreenPolicy::always_on ? "always_on" : "always_off";
}

namespace detail {

template <class E>
E enum_from(const std::string& s, std::initializer_list<E> all, const std::string& where) {
  for (E e : all)
    if (to_string(e) == s) return e;
  throw ParseError(where + ": unknown value '" + s + "'");
}

class JsonReader {
 public:
  JsonReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ParseError(path_ + ": expected an object");
  }

  template <class T>
  void field(const char* key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    const auto where = path_ + "." + key;
    try {
      if constexpr (std::is_same_v<T, OptimizerKind>)
        out = enum_from(j_.at(key).get<std::string>(), {OptimizerKind::sgd, OptimizerKind::adam}, where);
      else if constexpr (std::is_same_v<T, AggInput>)
        out = enum_from(j_.at(key).get<std::string>(), {AggInput::raw, AggInput::centered}, where);
      else if constexpr (std::is_same_v<T, ScreenPolicy>)
        out = enum_from(j_.at(key).get<std::string>(),
                        {ScreenPolicy::markov, ScreenPolicy::always_off, ScreenPolicy::always_on}, where);
      else if constexpr (std::is_same_v<T, std::optional<std::uint64_t>>)
        out = j_.at(key).is_null() ? std::nullopt : std::optional<std::uint64_t>(j_.at(key).get<std::uint64_t>());
      else
        out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
  }

  void object(const char* key, const std::function<void(JsonReader&)>& body) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    JsonReader sub(j_.at(key), path_ + "." + key);
    body(sub);
    sub.finish();
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) throw ParseError(path_ + "." + k + ": unknown key");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

class JsonWriter {
 public:
  explicit JsonWriter(nlohmann::ordered_json& j) : j_(j) {}

  template <class T>
  void field(const char* key, T& v) {
    if constexpr (std::is_same_v<T, OptimizerKind> || std::is_same_v<T, AggInput> || std::is_same_v<T, ScreenPolicy>)
      j_[key] = to_string(v);
    else if constexpr (std::is_same_v<T, std::optional<std::uint64_t>>)
      j_[key] = v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
    else
      j_[key] = v;
  }

  void object(const char* key, const std::function<void(JsonWriter&)>& body) {
    nlohmann::ordered_json sub = nlohmann::ordered_json::object();
    JsonWriter w(sub);
    body(w);
    j_[key] = std::move(sub);
  }

 private:
  nlohmann::ordered_json& j_;
};

template <class V>
void visit_config(ExperimentConfig& c, V& v) {
  v.field("seed", c.seed);
  v.field("output_dir", c.output_dir);
  v.field("deterministic", c.deterministic);
  v.object("corpus", [&](V& s) {
    s.field("source", c.corpus.source);
    s.field("csv_path", c.corpus.csv_path);
    s.field("phones", c.corpus.phones);
    s.field("ambient_seed", c.corpus.ambient_seed);
    s.object("synth", [&](V& t) {
      auto& y = c.corpus.synth;
      t.field("sessions", y.n_sessions);
      t.field("session_length", y.session_length);
      t.field("tick", y.tick);
      t.field("ambient_lo", y.ambient_lo);
      t.field("ambient_hi", y.ambient_hi);
      t.field("label_resolution", y.label_resolution);
      t.field("mean_on_time", y.mean_on_time);
      t.field("mean_off_time", y.mean_off_time);
      t.field("initial_offset_lo", y.initial_offset_lo);
      t.field("initial_offset_hi", y.initial_offset_hi);
      t.field("screen", y.screen);
    });
    s.object("phone_ranges", [&](V& t) {
      auto& r = c.corpus.ranges;
      t.field("tau_lo", r.tau_lo);
      t.field("tau_hi", r.tau_hi);
      t.field("bias_lo", r.bias_lo);
      t.field("bias_hi", r.bias_hi);
      t.field("noise_lo", r.noise_lo);
      t.field("noise_hi", r.noise_hi);
      t.field("screen_heating_lo", r.screen_heating_lo);
      t.field("screen_heating_hi", r.screen_heating_hi);
      t.field("voltage_heating_lo", r.voltage_heating_lo);
      t.field("voltage_heating_hi", r.voltage_heating_hi);
    });
  });
  v.object("roles", [&](V& s) {
    s.field("contributors", c.contributors);
    s.field("participants", c.participants);
  });
  v.field("train_fraction", c.train_fraction);
  v.object("estimator", [&](V& s) {
    s.field("lr", c.estimator.lr);
    s.field("batch_size", c.estimator.batch_size);
    s.field("patience", c.estimator.patience);
    s.field("holdout_fraction", c.estimator.holdout_fraction);
    s.field("max_epochs", c.estimator.max_epochs);
  });
  v.object("cbts", [&](V& s) {
    s.field("lr", c.cbts.lr);
    s.field("batch_size", c.cbts.batch_size);
    s.field("patience", c.cbts.patience);
    s.field("max_epochs", c.cbts.max_epochs);
    s.field("input", c.cbts.input);
    s.field("train_groups", c.groups.train);
    s.field("validation_groups", c.groups.validation);
    s.field("test_groups", c.groups.test);
  });
  v.object("labels", [&](V& s) {
    s.field("fixed_k", c.labels.fixed_k);
    s.field("min_k", c.labels.min_k);
    s.field("max_k", c.labels.max_k);
    s.field("label_grid", c.labels.label_grid);
  });
  v.object("meta", [&](V& s) {
    s.field("alpha", c.meta.alpha);
    s.field("beta", c.meta.beta);
    s.field("task_batch", c.meta.task_batch);
    s.field("inner_steps", c.meta.inner_steps);
    s.field("finetune_steps", c.meta.finetune_steps);
    s.field("optimizer", c.meta.meta_optimizer);
    s.field("k_spt", c.meta.k_spt);
    s.field("k_qry", c.meta.k_qry);
    s.field("max_epochs", c.meta.max_epochs);
    s.field("patience", c.meta.patience);
    s.field("first_order", c.meta.first_order);
  });
  v.object("fewshot", [&](V& s) {
    s.field("repetitions", c.fewshot.repetitions);
    s.field("shots", c.fewshot.shots);
    s.field("steps", c.fewshot.steps);
    s.field("meta_train_tasks", c.fewshot.meta_train_tasks);
    s.field("meta_val_tasks", c.fewshot.meta_val_tasks);
  });
  v.object("fed", [&](V& s) {
    s.field("key_bits", c.fed.fed.key_bits);
    s.field("scale_bits", c.fed.fed.scale_bits);
    s.field("rounds", c.fed.fed.rounds);
    s.field("parallel", c.fed.fed.parallel);
    s.field("tasks_per_client", c.fed.tasks_per_client);
    s.field("beta", c.fed.beta);
    s.field("optimizer", c.fed.optimizer);
    s.field("equivalence_tolerance", c.fed.equivalence_tolerance);
  });
  v.field("seeds", c.seeds);
}

}  // namespace detail

inline std::string synthetic_phone_id(std::size_t i) { return "phone" + std::to_string(i + 1); }

/// Fills in default roles and checks the invariants that hold for any corpus.
inline void resolve(ExperimentConfig& c) {
  require(c.train_fraction > 0.0 && c.train_fraction < 1.0, "config: train_fraction must be in (0,1)");
  require(c.corpus.source == "synthetic" || c.corpus.source == "csv", "config: corpus.source must be synthetic or csv");
  if (c.corpus.source == "csv") require(!c.corpus.csv_path.empty(), "config: corpus.csv_path is required for csv source");
  if (c.contributors.empty() && c.participants.empty()) {
    require(c.corpus.source == "synthetic", "config: roles must be given for a csv corpus");
    require(c.corpus.phones >= 3, "config: need at least 3 synthetic phones");
    const std::size_t n_contrib = c.corpus.phones - c.corpus.phones / 3;
    for (std::size_t i = 0; i < c.corpus.phones; ++i)
      (i < n_contrib ? c.contributors : c.participants).push_back(synthetic_phone_id(i));
  }
  require(c.contributors.size() >= 2, "config: need at least 2 contributors");
  std::set<std::string> seen;
  for (const auto* list : {&c.contributors, &c.participants})
    for (const auto& id : *list)
      if (!seen.insert(id).second) throw ContractError("config: phone " + id + " assigned twice");
  if (c.corpus.source == "synthetic") {
    for (const auto& id : seen) {
      bool ok = false;
      for (std::size_t i = 0; i < c.corpus.phones; ++i) ok = ok || id == synthetic_phone_id(i);
      if (!ok) throw ContractError("config: role lists unknown synthetic phone " + id);
    }
    require(seen.size() == c.corpus.phones, "config: roles must cover every synthetic phone");
  }
  validate(c.meta);
  require(!c.fewshot.steps.empty() && c.fewshot.shots >= 2, "config: fewshot needs steps and at least 2 shots");
}

inline ExperimentConfig parse_config(const nlohmann::json& j, const std::string& source = "config") {
  ExperimentConfig c = default_experiment_config();
  detail::JsonReader r(j, source);
  detail::visit_config(c, r);
  r.finish();
  resolve(c);
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path + ": cannot open config");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return parse_config(j, path);
}

inline nlohmann::ordered_json config_to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  ExperimentConfig copy = c;
  detail::JsonWriter w(j);
  detail::visit_config(copy, w);
  return j;
}

/// Checksum over the canonical dump; output_dir and deterministic do not
/// change any table payload, so they are left out.
inline std::uint64_t config_checksum(const ExperimentConfig& c) {
  auto j = config_to_json(c);
  j.erase("output_dir");
  j.erase("deterministic");
  return fnv1a(j.dump());
}

inline std::uint64_t stage_seed(const ExperimentConfig& c, const std::string& name) {
  auto it = c.seeds.find(name);
  return it != c.seeds.end() ? it->second : mix_seed(c.seed, fnv1a(name));
}

// ---------------------------------------------------------------------------
// Workspace: config plus output directory helpers

struct StageResult {
  std::string stage;
  std::vector<Table> tables;
  std::map<std::string, double> metrics;
};

class Workspace {
 public:
  explicit Workspace(ExperimentConfig cfg) : cfg_(std::move(cfg)), root_(cfg_.output_dir), checksum_(config_checksum(cfg_)) {
    fs::create_directories(root_);
    std::ofstream(root_ / "config.resolved.json") << config_to_json(cfg_).dump(2) << '\n';
  }

  const ExperimentConfig& config() const { return cfg_; }
  const fs::path& root() const { return root_; }
  std::uint64_t checksum() const { return checksum_; }
  std::uint64_t seed(const std::string& name) const { return stage_seed(cfg_, name); }

  fs::path dir(const std::string& name) const {
    fs::create_directories(root_ / name);
    return root_ / name;
  }

  Provenance provenance(const std::string& stage, std::initializer_list<const char*> seed_names) const {
    Provenance p{stage, checksum_, {}};
    p.seeds["global"] = cfg_.seed;
    for (const char* n : seed_names) p.seeds[n] = seed(n);
    return p;
  }

  void emit(StageResult& r, Table t, std::initializer_list<const char*> seed_names) const {
    save_table(root_ / "tables", t, provenance(r.stage, seed_names));
    r.tables.push_back(std::move(t));
  }

  /// Fails with a message naming the stage that produces a missing input.
  fs::path input(const fs::path& rel, const std::string& producer) const {
    const auto p = root_ / rel;
    if (!fs::exists(p)) throw ContractError("missing " + p.string() + " (run the " + producer + " stage first)");
    return p;
  }

 private:
  ExperimentConfig cfg_;
  fs::path root_;
  std::uint64_t checksum_;
};

// ---------------------------------------------------------------------------
// Corpus and splits

inline Corpus generate_synthetic_corpus(const ExperimentConfig& c, std::uint64_t seed) {
  const auto params = draw_phone_params(c.corpus.phones, mix_seed(seed, 1), c.corpus.ranges);
  Corpus corpus;
  for (std::size_t i = 0; i < c.corpus.phones; ++i) {
    SynthConfig s = c.corpus.synth;
    s.seed = mix_seed(seed, 100 + i);
    s.ambient_seed = c.corpus.ambient_seed;
    corpus.push_back(synth_generate(synthetic_phone_id(i), params[i], s));
  }
  return corpus;
}

struct PhoneData {
  PhoneDataset all;
  PhoneDataset train;
  PhoneDataset validation;
};

struct CorpusView {
  std::map<std::string, PhoneData> phones;
  NormStats norm;  // fitted on contributor training data

  const PhoneData& at(const std::string& id) const {
    auto it = phones.find(id);
    if (it == phones.end()) throw ContractError("corpus has no phone " + id);
    return it->second;
  }
};

inline Corpus read_corpus_files(const Workspace& ws) {
  const auto& c = ws.config();
  Corpus corpus;
  const auto add = [&](const fs::path& p) {
    for (auto& d : load_csv(p.string())) corpus.push_back(std::move(d));
  };
  if (c.corpus.source == "synthetic") {
    for (std::size_t i = 0; i < c.corpus.phones; ++i)
      add(ws.input(fs::path("corpus") / (synthetic_phone_id(i) + ".csv"), "synth"));
  } else if (fs::is_directory(c.corpus.csv_path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(c.corpus.csv_path))
      if (e.path().extension() == ".csv") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) add(f);
  } else {
    add(c.corpus.csv_path);
  }
  return corpus;
}

inline CorpusView load_corpus(const Workspace& ws) {
  const auto& c = ws.config();
  CorpusView view;
  for (auto& d : read_corpus_files(ws)) {
    if (view.phones.count(d.phone_id)) throw ParseError("corpus: phone " + d.phone_id + " appears twice");
    PhoneData pd;
    auto s = split(d, c.train_fraction, mix_seed(ws.seed("split"), fnv1a(d.phone_id)));
    pd.train = std::move(s.train);
    pd.validation = std::move(s.validation);
    pd.all = std::move(d);
    view.phones.emplace(pd.all.phone_id, std::move(pd));
  }
  for (const auto* list : {&c.contributors, &c.participants})
    for (const auto& id : *list) view.at(id);
  std::vector<const PhoneDataset*> train_sets;
  for (const auto& id : c.contributors) train_sets.push_back(&view.at(id).train);
  view.norm = fit_normalizer(train_sets);
  return view;
}

inline EstimatorRegistry load_registry(const Workspace& ws) {
  EstimatorRegistry reg;
  for (const auto& id : ws.config().contributors)
    reg[id] = load_model(ws.input(fs::path("models") / (id + ".model"), "train-estimators").string());
  return reg;
}

inline std::vector<PhoneDataset> contributor_sets(const ExperimentConfig& c, const CorpusView& v,
                                                  PhoneDataset PhoneData::*which) {
  std::vector<PhoneDataset> out;
  for (const auto& id : c.contributors) out.push_back(v.at(id).*which);
  return out;
}

// ---------------------------------------------------------------------------
// Stages

inline StageResult run_synth(const Workspace& ws) {
  const auto& c = ws.config();
  if (c.corpus.source != "synthetic") throw ContractError("corpus source is csv; nothing to synthesize");
  StageResult r{"synth", {}, {}};
  const auto corpus = generate_synthetic_corpus(c, ws.seed("synth"));
  Table t{"corpus", {"phone", "role", "samples", "label_min", "label_max"}, {}};
  const auto role = [&](const std::string& id) {
    return std::find(c.contributors.begin(), c.contributors.end(), id) != c.contributors.end() ? "contributor"
                                                                                               : "participant";
  };
  for (const auto& d : corpus) {
    save_csv((ws.dir("corpus") / (d.phone_id + ".csv")).string(), Corpus{d});
    double lo = d.samples.front().ambient, hi = lo;
    for (const auto& s : d.samples) lo = std::min(lo, s.ambient), hi = std::max(hi, s.ambient);
    t.add({d.phone_id, role(d.phone_id), cell(d.samples.size()), cell(lo), cell(hi)});
  }
  r.metrics["phones"] = static_cast<double>(corpus.size());
  ws.emit(r, std::move(t), {"synth"});
  return r;
}

inline StageResult run_train_estimators(const Workspace& ws) {
  const auto& c = ws.config();
  StageResult r{"train-estimators", {}, {}};
  const auto view = load_corpus(ws);
  const auto fit = [&](const std::string& id) {
    TrainConfig tc = c.estimator;
    tc.seed = mix_seed(ws.seed("estimator"), fnv1a(id));
    return train(view.at(id).train, view.norm, tc);
  };
  std::vector<TrainedEstimator> models;
  if (c.deterministic) {
    for (const auto& id : c.contributors) models.push_back(fit(id));
  } else {
    std::vector<std::future<TrainedEstimator>> jobs;
    for (const auto& id : c.contributors) jobs.push_back(std::async(std::launch::async, fit, id));
    for (auto& j : jobs) models.push_back(j.get());
  }
  Table t{"estimators", {"phone", "train_samples", "val_samples", "train_mae", "val_mae", "uncertainty_corr", "best_epoch"}, {}};
  double val_sum = 0.0, min_corr = 1.0;
  for (const auto& m : models) {
    const auto& pd = view.at(m.model.phone_id);
    save_model((ws.dir("models") / (m.model.phone_id + ".model")).string(), m.model);
    const double tr = evaluate_mae(m.model, pd.train), va = evaluate_mae(m.model, pd.validation);
    const auto corr = uncertainty_bias_correlation(m.model, pd.validation);
    t.add({m.model.phone_id, cell(pd.train.samples.size()), cell(pd.validation.samples.size()), cell(tr), cell(va),
           cell(corr.coefficient), cell(m.best_epoch)});
    val_sum += va;
    min_corr = std::min(min_corr, corr.degenerate ? 0.0 : corr.coefficient);
  }
  r.metrics["mean_val_mae"] = val_sum / static_cast<double>(models.size());
  r.metrics["min_uncertainty_corr"] = min_corr;
  ws.emit(r, std::move(t), {"split", "estimator"});
  return r;
}

inline StageResult run_train_cbts(const Workspace& ws) {
  const auto& c = ws.config();
  StageResult r{"train-cbts", {}, {}};
  const auto view = load_corpus(ws);
  const auto reg = load_registry(ws);
  const auto tr_sets = contributor_sets(c, view, &PhoneData::train);
  const auto va_sets = contributor_sets(c, view, &PhoneData::validation);
  const auto train_groups = answers_for_groups(build_group_set(tr_sets, c.groups.train, ws.seed("cbts_train_groups")), reg);
  const auto val_groups = answers_for_groups(build_group_set(va_sets, c.groups.validation, ws.seed("cbts_val_groups")), reg);
  CbtsConfig cc = c.cbts;
  cc.seed = ws.seed("cbts");
  const auto res = cbts_train(train_groups, val_groups, cc);
  save_aggregator((ws.dir("models") / "cbts.model").string(), res.model);
  Table t{"cbts_training", {"epoch", "train_nll", "val_nll"}, {}};
  for (const auto& e : res.trace) t.add({cell(e.epoch), cell(e.train_nll), cell(e.val_nll)});
  r.metrics["best_epoch"] = static_cast<double>(res.best_epoch);
  r.metrics["best_val_nll"] = res.trace[res.best_epoch].val_nll;
  ws.emit(r, std::move(t), {"split", "cbts_train_groups", "cbts_val_groups", "cbts"});
  return r;
}

inline const std::vector<std::string>& truthinf_methods() {
  static const std::vector<std::string> m{"CBTS", "D&S", "PM", "ZC", "MV-2", "MV-3", "Mean", "WA"};
  return m;
}

inline StageResult run_truthinf_bench(const Workspace& ws) {
  const auto& c = ws.config();
  StageResult r{"truthinf-bench", {}, {}};
  const auto view = load_corpus(ws);
  const auto reg = load_registry(ws);
  const auto cbts = load_aggregator(ws.input("models/cbts.model", "train-cbts").string());
  std::map<std::string, double> train_mae;
  for (const auto& id : c.contributors) train_mae[id] = evaluate_mae(reg.at(id), view.at(id).train);
  const auto weights = compute_wa_weights(train_mae);
  const auto va_sets = contributor_sets(c, view, &PhoneData::validation);
  const auto groups = answers_for_groups(build_group_set(va_sets, c.groups.test, ws.seed("cbts_test_groups")), reg);
  const auto matrix = AnswerMatrix::from_groups(groups);
  const auto pm = pm_infer(matrix);
  const auto ds = ds_infer(matrix);
  const auto zc = zc_infer(matrix);

  const auto& methods = truthinf_methods();
  std::map<std::size_t, std::vector<double>> err;  // group size -> per-method abs error sum; 0 = all
  std::map<std::size_t, std::size_t> count;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& G = groups[g];
    const double truth = *G.truth;
    const std::vector<double> est{cbts_fold(cbts, G.answers).mu, ds[g], pm.truths[g], zc[g],
                                  mv_infer(G.answers, 2), mv_infer(G.answers, 3), mean_infer(G.answers),
                                  weighted_average(G.answers, G.phone_ids, weights)};
    for (std::size_t key : {G.answers.size(), std::size_t{0}}) {
      auto& e = err[key];
      e.resize(methods.size(), 0.0);
      for (std::size_t m = 0; m < methods.size(); ++m) e[m] += std::abs(est[m] - truth);
      ++count[key];
    }
  }
  std::vector<std::string> cols{"phones", "groups"};
  cols.insert(cols.end(), methods.begin(), methods.end());
  Table t{"truthinf", cols, {}};
  std::vector<std::size_t> keys;
  for (const auto& [k, v] : err)
    if (k) keys.push_back(k);
  keys.push_back(0);
  for (auto k : keys) {
    std::vector<std::string> row{k ? cell(k) : "all", cell(count[k])};
    for (std::size_t m = 0; m < methods.size(); ++m) {
      const double mae_k = err[k][m] / static_cast<double>(count[k]);
      row.push_back(cell(mae_k));
      if (!k) r.metrics[methods[m]] = mae_k;
    }
    t.add(std::move(row));
  }
  ws.emit(r, std::move(t), {"split", "cbts_test_groups"});
  return r;
}

inline StageResult run_gen_labels(const Workspace& ws) {
  const auto& c = ws.config();
  StageResult r{"gen-labels", {}, {}};
  const auto view = load_corpus(ws);
  const auto reg = load_registry(ws);
  const auto cbts = load_aggregator(ws.input("models/cbts.model", "train-cbts").string());
  const auto all_sets = contributor_sets(c, view, &PhoneData::all);
  Table t{"label_quality", {"phone", "samples", "labeled", "skipped", "label_mae"}, {}};
  double abs_sum = 0.0;
  std::size_t n_sum = 0, samples = 0, skipped = 0;
  for (const auto& id : c.participants) {
    const auto& pd = view.at(id);
    const auto inf = infer_labels_for_participant(pd.train, all_sets, reg, cbts,
                                                  mix_seed(ws.seed("labels"), fnv1a(id)), c.labels);
    std::ofstream out(ws.dir("labels") / (id + ".csv"));
    write_inferred_csv(out, inf.labeled);
    const double q = inf.labeled.empty() ? std::nan("") : label_quality(inf.labeled);
    t.add({id, cell(pd.train.samples.size()), cell(inf.labeled.size()), cell(inf.skipped), cell(q)});
    if (!inf.labeled.empty()) abs_sum += q * static_cast<double>(inf.labeled.size());
    n_sum += inf.labeled.size();
    samples += pd.train.samples.size();
    skipped += inf.skipped;
  }
  const double all = n_sum ? abs_sum / static_cast<double>(n_sum) : std::nan("");
  t.add({"all", cell(samples), cell(n_sum), cell(skipped), cell(all)});
  r.metrics["label_mae"] = all;
  ws.emit(r, std::move(t), {"split", "labels"});
  return r;
}

/// Inferred labels keyed by index into the participant's training split.
inline std::map<std::size_t, double> load_inferred_labels(const fs::path& path) {
  const auto t = load_table(path);
  const auto ci = t.column("sample_index"), cl = t.column("inferred_label");
  std::map<std::size_t, double> out;
  for (const auto& row : t.rows) {
    const auto v = detail::parse_double(row.at(cl));
    if (!v) throw ParseError(path.string() + ": bad inferred_label");
    out[static_cast<std::size_t>(std::stoull(row.at(ci)))] = *v;
  }
  return out;
}

struct FewShotCell {
  double sum = 0.0;
  double sum_sq = 0.0;
  std::size_t n = 0;

  void add(double v) {
    sum += v;
    sum_sq += v * v;
    ++n;
  }
  double mean() const { return n ? sum / static_cast<double>(n) : std::nan(""); }
  double stddev() const {
    if (n < 2) return 0.0;
    const double m = mean();
    return std::sqrt(std::max(0.0, (sum_sq - static_cast<double>(n) * m * m) / static_cast<double>(n - 1)));
  }
};

inline StageResult run_fewshot(const Workspace& ws) {
  const auto& c = ws.config();
  StageResult r{"fewshot", {}, {}};
  const auto view = load_corpus(ws);

  std::vector<PhonePoints> ctr, cva;
  std::vector<LabeledPoint> pooled;
  for (const auto& id : c.contributors) {
    ctr.push_back({id, to_points(view.at(id).train, view.norm)});
    cva.push_back({id, to_points(view.at(id).validation, view.norm)});
    pooled.insert(pooled.end(), ctr.back().points.begin(), ctr.back().points.end());
  }
  // Load labels before the expensive part so a missing stage fails fast.
  std::map<std::string, std::map<std::size_t, double>> inferred;
  for (const auto& id : c.participants)
    inferred[id] = load_inferred_labels(ws.input(fs::path("labels") / (id + ".csv"), "gen-labels"));

  MetaConfig mc = c.meta;
  mc.seed = ws.seed("meta");
  const auto tasks = build_task_set(ctr, mc.k_spt, mc.k_qry, c.fewshot.meta_train_tasks, ws.seed("meta_tasks"));
  const auto vtasks = build_task_set(cva, mc.k_spt, mc.k_qry, c.fewshot.meta_val_tasks, ws.seed("meta_val_tasks"));
  const auto maml = maml_train(tasks, init_estimator_params(ws.seed("meta_init"), label_mean(pooled)), mc, vtasks);
  TrainConfig pc = c.estimator;
  pc.seed = ws.seed("pretrain");
  const auto pt = pretrain_baseline(pooled, pc);
  save_model((ws.dir("models") / "maml.model").string(), EstimatorModel{maml.params, view.norm, "maml", kSigmaFloor});
  save_model((ws.dir("models") / "pretrain.model").string(), EstimatorModel{pt.params, view.norm, "pretrain", kSigmaFloor});

  Table trace{"maml_training", {"epoch", "val_mae"}, {}};
  for (const auto& e : maml.trace) trace.add({cell(e.epoch), cell(e.val_mae)});

  const std::size_t max_steps = *std::max_element(c.fewshot.steps.begin(), c.fewshot.steps.end());
  const std::set<std::size_t> report_steps(c.fewshot.steps.begin(), c.fewshot.steps.end());
  // cells[participant][strategy/label/steps]
  std::map<std::string, std::map<std::string, FewShotCell>> cells;
  std::map<std::string, std::map<std::string, std::vector<double>>> curves;  // TL curves, step 0..max
  std::map<std::string, double> weight;

  for (std::size_t pi = 0; pi < c.participants.size(); ++pi) {
    const auto& id = c.participants[pi];
    const auto train_pts = to_points(view.at(id).train, view.norm);
    const auto val_pts = to_points(view.at(id).validation, view.norm);
    weight[id] = static_cast<double>(val_pts.size());
    std::vector<std::size_t> candidates;
    for (const auto& [idx, label] : inferred[id]) candidates.push_back(idx);
    if (candidates.size() < c.fewshot.shots)
      throw ContractError("participant " + id + " has only " + std::to_string(candidates.size()) + " labeled samples");
    std::mt19937_64 rng(mix_seed(ws.seed("fewshot"), fnv1a(id)));
    auto& pc_cells = cells[id];
    auto& pc_curves = curves[id];
    pc_curves["PT"].assign(max_steps + 1, 0.0);
    pc_curves["MAML"].assign(max_steps + 1, 0.0);
    for (std::size_t rep = 0; rep < c.fewshot.repetitions; ++rep) {
      const auto chosen = detail::choose_distinct(candidates.size(), c.fewshot.shots, rng);
      std::vector<LabeledPoint> tl, il;
      for (auto k : chosen) {
        const std::size_t idx = candidates[k];
        tl.push_back(train_pts.at(idx));
        il.push_back({train_pts.at(idx).x, inferred[id].at(idx)});
      }
      TrainConfig dc = c.estimator;
      dc.seed = mix_seed(ws.seed("direct_train"), rep * 1000 + pi);
      for (const auto& [label, few] : {std::pair{"TL", &tl}, std::pair{"IL", &il}}) {
        pc_cells[std::string("DT/") + label + "/fit"].add(mae(direct_train_baseline(*few, dc).params, val_pts));
        for (const auto& [name, start] : {std::pair{"PT", &pt.params}, std::pair{"MAML", &maml.params}}) {
          ParamVector theta = *start;
          for (std::size_t s = 0; s <= max_steps; ++s) {
            if (s > 0) theta = maml_adapt(theta, *few, mc.alpha, 1);
            const bool curve = std::string(label) == "TL";
            if (!curve && !report_steps.count(s)) continue;
            const double m = mae(theta, val_pts);
            if (curve) pc_curves[name][s] += m / static_cast<double>(c.fewshot.repetitions);
            if (report_steps.count(s)) pc_cells[std::string(name) + "/" + label + "/" + std::to_string(s)].add(m);
          }
        }
      }
    }
  }

  Table t{"fewshot", {"participant", "strategy", "labels", "steps", "mae", "mae_std", "repetitions"}, {}};
  std::map<std::string, double> all_sum;
  double w_total = 0.0;
  for (const auto& id : c.participants) w_total += weight[id];
  const auto split_key = [](const std::string& k) {
    const auto a = k.find('/'), b = k.rfind('/');
    return std::array<std::string, 3>{k.substr(0, a), k.substr(a + 1, b - a - 1), k.substr(b + 1)};
  };
  for (const auto& id : c.participants)
    for (const auto& [key, cellv] : cells[id]) {
      const auto parts = split_key(key);
      t.add({id, parts[0], parts[1], parts[2], cell(cellv.mean()), cell(cellv.stddev()), cell(cellv.n)});
      all_sum[key] += cellv.mean() * weight[id] / w_total;
      r.metrics[id + "/" + key] = cellv.mean();
    }
  for (const auto& [key, v] : all_sum) {
    const auto parts = split_key(key);
    t.add({"all", parts[0], parts[1], parts[2], cell(v), "", cell(c.fewshot.repetitions * c.participants.size())});
    r.metrics["all/" + key] = v;
  }

  Table ct{"fewshot_curve", {"participant", "strategy", "step", "mae"}, {}};
  for (const auto& id : c.participants) {
    std::vector<Series> series;
    for (const auto& name : {"PT", "MAML"}) {
      Series s{name, {}, {}};
      for (std::size_t k = 0; k <= max_steps; ++k) {
        ct.add({id, name, cell(k), cell(curves[id][name][k])});
        s.x.push_back(static_cast<double>(k));
        s.y.push_back(curves[id][name][k]);
      }
      series.push_back(std::move(s));
    }
    const double dt = cells[id]["DT/TL/fit"].mean();
    series.push_back({"DT", {0.0, static_cast<double>(max_steps)}, {dt, dt}});
    std::ofstream svg(ws.dir("plots") / ("fewshot_" + id + ".svg"));
    write_line_chart(svg, "Few-shot adaptation, " + id + " (true labels)", "fine-tune step", "MAE (degC)", series);
  }
  r.metrics["maml_best_epoch"] = static_cast<double>(maml.best_epoch);
  const std::initializer_list<const char*> seeds{"split", "meta", "meta_tasks", "meta_val_tasks", "meta_init",
                                                 "pretrain", "fewshot", "direct_train"};
  ws.emit(r, std::move(trace), seeds);
  ws.emit(r, std::move(t), seeds);
  ws.emit(r, std::move(ct), seeds);
  return r;
}

inline StageResult run_fed(const Workspace& ws) {
  const auto& c = ws.config();
  StageResult r{"fed", {}, {}};
  const auto view = load_corpus(ws);
  MetaConfig mc = c.meta;
  mc.beta = c.fed.beta;
  mc.meta_optimizer = c.fed.optimizer;

  std::vector<Client> clients;
  std::vector<LabeledPoint> pooled;
  for (const auto& id : c.contributors) {
    auto pts = to_points(view.at(id).train, view.norm);
    pooled.insert(pooled.end(), pts.begin(), pts.end());
    clients.emplace_back(id, std::vector<PhonePoints>{{id, std::move(pts)}}, c.fed.tasks_per_client,
                         mix_seed(ws.seed("fed_clients"), fnv1a(id)));
  }
  std::sort(clients.begin(), clients.end(), [](const Client& a, const Client& b) { return a.id() < b.id(); });
  const auto theta0 = init_estimator_params(ws.seed("fed_init"), label_mean(pooled));

  // Plaintext oracle for round 1 over the same local task sets.
  std::vector<std::vector<Task>> client_tasks;
  for (const auto& cl : clients) {
    const auto& id = cl.id();
    std::vector<PhonePoints> data{{id, to_points(view.at(id).train, view.norm)}};
    client_tasks.push_back(build_task_set(data, mc.k_spt, mc.k_qry, cl.task_count(),
                                          client_task_seed(mix_seed(ws.seed("fed_clients"), fnv1a(id)), 1)));
  }
  const auto central = centralized_round(theta0, client_tasks, mc);

  FederatedServer server(keygen(c.fed.fed.key_bits, ws.seed("fed_key")), theta0, mc);
  Channel channel;
  Table rounds{"fed_rounds", {"round", "participants", "opted_out", "bytes", "theta_checksum"}, {}};
  std::ofstream transcript(ws.dir("fed") / "transcript.jsonl");
  double max_diff = 0.0;
  for (std::size_t k = 0; k < c.fed.fed.rounds; ++k) {
    const auto& rec = federated_round(server, clients, channel, c.fed.fed.parallel && !c.deterministic,
                                      c.fed.fed.scale_bits);
    transcript << transcript_line(rec) << '\n';
    rounds.add({cell(static_cast<std::size_t>(rec.round)), cell(rec.client_ids.size()), cell(rec.opted_out.size()),
                cell(rec.bytes), hex64(rec.theta_checksum)});
    if (k == 0)
      for (std::size_t i = 0; i < central.size(); ++i) max_diff = std::max(max_diff, std::abs(central[i] - server.theta()[i]));
  }
  Table eq{"fed_equivalence", {"check", "value", "tolerance", "pass"}, {}};
  const bool eq_ok = max_diff <= c.fed.equivalence_tolerance;
  eq.add({"round1_max_abs_diff", cell(max_diff), cell(c.fed.equivalence_tolerance), eq_ok ? "yes" : "no"});
  std::size_t non_skipped = 0;
  for (const auto& rec : server.transcript()) non_skipped += rec.skipped ? 0 : 1;
  const bool once = server.decryptions() == non_skipped;
  eq.add({"decryptions_per_round", cell(static_cast<double>(server.decryptions()) / std::max<std::size_t>(1, non_skipped)),
          "1", once ? "yes" : "no"});
  r.metrics["round1_max_abs_diff"] = max_diff;
  r.metrics["decryptions"] = static_cast<double>(server.decryptions());
  r.metrics["rounds"] = static_cast<double>(c.fed.fed.rounds);
  const std::initializer_list<const char*> seeds{"split", "fed_clients", "fed_init", "fed_key"};
  ws.emit(r, std::move(rounds), seeds);
  ws.emit(r, std::move(eq), seeds);
  return r;
}

inline const std::vector<std::pair<std::string, std::string>>& report_sections() {
  static const std::vector<std::pair<std::string, std::string>> s{
      {"estimators", "train-estimators"}, {"cbts_training", "train-cbts"}, {"truthinf", "truthinf-bench"},
      {"label_quality", "gen-labels"},    {"fewshot", "fewshot"},          {"fed_rounds", "fed"},
      {"fed_equivalence", "fed"}};
  return s;
}

/// Markdown bundle of every stage table. Requires all stage outputs.
inline StageResult run_report(const Workspace& ws) {
  StageResult r{"report", {}, {}};
  std::vector<std::string> missing;
  for (const auto& [name, stage] : report_sections())
    if (!fs::exists(ws.root() / "tables" / (name + ".csv"))) missing.push_back(name + ".csv (" + stage + ")");
  if (!missing.empty()) {
    std::string msg = "missing stage outputs:";
    for (const auto& m : missing) msg += " " + m;
    throw ContractError(msg);
  }
  std::ostringstream md;
  md << "# Pipeline report\n\nconfig checksum: `" << hex64(ws.checksum()) << "`\n";
  for (const auto& [name, stage] : report_sections()) {
    const auto t = load_table(ws.root() / "tables" / (name + ".csv"));
    md << "\n## " << name << " (" << stage << ")\n\n";
    if (t.header.count("config_checksum") && t.header.at("config_checksum") != hex64(ws.checksum()))
      md << "> table was produced with config " << t.header.at("config_checksum") << "\n\n";
    const bool long_table = t.rows.size() > 40;
    md << '|';
    for (const auto& col : t.columns) md << ' ' << col << " |";
    md << "\n|";
    for (std::size_t i = 0; i < t.columns.size(); ++i) md << " --- |";
    md << '\n';
    const std::size_t shown = long_table ? 40 : t.rows.size();
    for (std::size_t i = 0; i < shown; ++i) {
      md << '|';
      for (const auto& v : t.rows[i]) md << ' ' << v << " |";
      md << '\n';
    }
    if (long_table) md << "\n(" << t.rows.size() - shown << " more rows in tables/" << name << ".csv)\n";
  }
  std::ofstream(ws.root() / "report.md") << md.str();
  r.metrics["sections"] = static_cast<double>(report_sections().size());
  return r;
}

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> s{"synth",      "train-estimators", "train-cbts", "truthinf-bench",
                                          "gen-labels", "fewshot",          "fed",        "report"};
  return s;
}

inline StageResult run_stage(const Workspace& ws, const std::string& stage) {
  if (stage == "synth") return run_synth(ws);
  if (stage == "train-estimators") return run_train_estimators(ws);
  if (stage == "train-cbts") return run_train_cbts(ws);
  if (stage == "truthinf-bench") return run_truthinf_bench(ws);
  if (stage == "gen-labels") return run_gen_labels(ws);
  if (stage == "fewshot") return run_fewshot(ws);
  if (stage == "fed") return run_fed(ws);
  if (stage == "report") return run_report(ws);
  throw ContractError("unknown stage " + stage);
}

}  // namespace crowdtemp
