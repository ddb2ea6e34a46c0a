// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

#include "CLI11.hpp"

#include "crowdtemp/experiment.hpp"
#include "oracles.hpp"

using namespace crowdtemp;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;
std::map<int, std::string> summary;

void verdict(int id, bool ok, const std::string& detail) {
  const std::string line = std::string(ok ? "PASS" : "FAIL") + " criterion " + std::to_string(id) + ": " + detail;
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
  summary[id] = line;
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Runs a check; an exception fails the criterion with its message.
void guarded(int id, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    verdict(id, false, std::string("exception: ") + e.what());
  }
}

std::vector<double> normal_vec(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

void gradient_correctness() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::mt19937_64 rng(1);
  for (const auto* spec : {&estimator_network(), &aggregator_network()})
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto p = init_params(*spec, seed);
      const auto x = normal_vec(spec->input_size(), rng);
      const double target = std::normal_distribution<double>(0, 1)(rng);
      worst = std::max(worst, grad_check(*spec, p, x, target, 1e-6, LossKind::gaussian_nll));
    }
  const double secs = since(t0);
  verdict(1, worst < 1e-4 && secs < 60, fmt("max rel err %.3g over 200 checks, %.1fs", worst, secs));
}

void loss_correctness() {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> mu(-50, 50), sd(0.01, 20), y(-50, 50);
  double worst_abs = 0.0, worst_rel = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double m = mu(rng), s = sd(rng), t = y(rng);
    const double closed = std::log(s) + 0.5 * std::log(2.0 * M_PI) + (t - m) * (t - m) / (2.0 * s * s);
    worst_abs = std::max(worst_abs, std::abs(gaussian_nll(m, s, t) - closed));
    const auto g = gaussian_nll_grad(m, s, t);
    const double h = 1e-6;
    const double dm = (gaussian_nll(m + h, s, t) - gaussian_nll(m - h, s, t)) / (2 * h);
    const double ds = (gaussian_nll(m, s + h * s, t) - gaussian_nll(m, s - h * s, t)) / (2 * h * s);
    worst_rel = std::max(worst_rel, std::abs(g.d_mu - dm) / std::max({std::abs(g.d_mu), std::abs(dm), 1e-3}));
    worst_rel = std::max(worst_rel, std::abs(g.d_sigma - ds) / std::max({std::abs(g.d_sigma), std::abs(ds), 1e-3}));
  }
  verdict(2, worst_abs <= 1e-9 && worst_rel <= 1e-5,
          fmt("closed-form abs err %.3g, FD rel err %.3g on 10000 triples", worst_abs, worst_rel));
}

void homomorphic_aggregation() {
  const auto t0 = Clock::now();
  const auto keys = keygen(1024, 3);
  std::mt19937_64 rng(3);
  const std::size_t clients = 100, dim = 1000;
  std::vector<double> plain(dim, 0.0);
  EncryptedVector acc;
  for (std::size_t c = 0; c < clients; ++c) {
    const auto g = normal_vec(dim, rng, 0.1);
    for (std::size_t i = 0; i < dim; ++i) plain[i] += g[i];
    auto e = encrypt(keys.pk, g, kDefaultScaleBits, c + 1);
    if (c == 0)
      acc = std::move(e);
    else
      add_into(keys.pk, acc, e);
  }
  const auto sum = decrypt(keys.sk, acc);
  double worst = 0.0;
  for (std::size_t i = 0; i < dim; ++i) worst = std::max(worst, std::abs(sum[i] - plain[i]));
  const double secs = since(t0);
  verdict(3, worst <= 1e-6 && secs < 120, fmt("100 x 1000 at 1024-bit: max abs err %.3g, %.1fs", worst, secs));
}

void federated_equivalence() {
  auto cfg = default_experiment_config();
  cfg.corpus.phones = 5;
  cfg.corpus.synth.n_sessions = 6;
  resolve(cfg);
  const auto corpus = generate_synthetic_corpus(cfg, 5);
  std::vector<const PhoneDataset*> sets;
  for (const auto& d : corpus) sets.push_back(&d);
  const auto norm = fit_normalizer(sets);

  MetaConfig mc;
  mc.meta_optimizer = OptimizerKind::sgd;
  mc.beta = 1e-4;
  mc.inner_steps = 5;
  std::vector<Client> clients;
  std::vector<Task> all;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::vector<PhonePoints> data{{corpus[i].phone_id, to_points(corpus[i], norm)}};
    const std::uint64_t seed = 1000 + i;
    const auto local = build_task_set(data, mc.k_spt, mc.k_qry, 8, client_task_seed(seed, 1));
    all.insert(all.end(), local.begin(), local.end());
    clients.emplace_back(corpus[i].phone_id, std::move(data), 8, seed);
  }
  const auto theta0 = init_estimator_params(9, 22.0);
  FederatedServer server(keygen(1024, 4), theta0, mc);
  Channel ch;
  federated_round(server, clients, ch);

  // one batch of the meta-training loop over the union of client tasks
  auto batch = mc;
  batch.task_batch = all.size();
  batch.max_epochs = 1;
  const auto central = maml_train(all, theta0, batch).params;
  double worst = 0.0, moved = 0.0;
  for (std::size_t i = 0; i < theta0.size(); ++i) {
    worst = std::max(worst, std::abs(server.theta()[i] - central[i]));
    moved = std::max(moved, std::abs(central[i] - theta0[i]));
  }
  verdict(4, worst <= 1e-5 && moved > 0 && server.decryptions() == 1,
          fmt("max |fed - central| %.3g (update size %.3g), %zu decryption(s)", worst, moved, server.decryptions()));
}

void mv_oracle_equivalence() {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> v(10, 35);
  std::uniform_int_distribution<std::size_t> size(1, 6);
  std::size_t mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> g(size(rng));
    for (auto& x : g) x = std::round(v(rng) * 10) / 10;
    for (std::size_t k : {2, 3})
      if (mv_infer(g, k) != oracle::mv_oracle(g, k)) ++mismatches;
  }
  const std::vector<double> two{20.0, 23.0};
  const bool fallback = mv_infer(two, 3) == 21.5;
  verdict(6, mismatches == 0 && fallback,
          fmt("%zu mismatches on 1000 groups x k in {2,3}; fallback %s", mismatches, fallback ? "ok" : "wrong"));
}

void adaptation_latency() {
  std::mt19937_64 rng(11);
  std::vector<LabeledPoint> support(5);
  for (auto& p : support) {
    const auto x = normal_vec(kFeatureCount, rng);
    std::copy(x.begin(), x.end(), p.x.begin());
    p.y = 22.0 + x[2];
  }
  const auto theta = init_estimator_params(1, 22.0);
  double worst = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const auto t0 = Clock::now();
    const auto out = maml_adapt(theta, support, 1e-3, 20);
    worst = std::max(worst, since(t0));
    if (out.size() != theta.size()) throw ContractError("maml_adapt changed the layout");
  }
  verdict(11, worst < 0.1, fmt("5 samples x 20 steps: worst of 20 runs %.4fs", worst));
}

double metric(const std::map<std::string, StageResult>& runs, const std::string& stage, const std::string& key) {
  const auto it = runs.find(stage);
  if (it == runs.end()) throw ContractError("stage " + stage + " did not complete");
  return it->second.metrics.at(key);
}

// Criteria 5, 7, 8, 9, 10 on the default synthetic experiment.
void synthetic_pipeline(const fs::path& workdir) {
  auto cfg = default_experiment_config();
  resolve(cfg);
  cfg.output_dir = (workdir / "synthetic").string();
  fs::remove_all(cfg.output_dir);
  const Workspace ws(cfg);
  std::map<std::string, StageResult> runs;
  std::map<std::string, double> secs;
  for (const auto& stage : stage_names()) {
    const auto t0 = Clock::now();
    try {
      runs[stage] = run_stage(ws, stage);
    } catch (const std::exception& e) {
      std::printf("  stage %s failed: %s\n", stage.c_str(), e.what());
      break;
    }
    secs[stage] = since(t0);
    std::printf("  stage %s done in %.1fs\n", stage.c_str(), secs[stage]);
    std::fflush(stdout);
  }

  guarded(5, [&] {
    const double cbts = metric(runs, "truthinf-bench", "CBTS"), mean = metric(runs, "truthinf-bench", "Mean"),
                 wa = metric(runs, "truthinf-bench", "WA");
    const double t = secs.at("train-cbts") + secs.at("truthinf-bench");
    verdict(5, cbts <= 0.85 * mean && cbts <= wa && t < 600,
            fmt("CBTS %.4f, Mean %.4f (ratio %.3f), WA %.4f over %zu test groups, %.0fs", cbts, mean, cbts / mean, wa,
                cfg.groups.test, t));
  });

  guarded(7, [&] {
    const auto& fs_metrics = runs.at("fewshot").metrics;
    bool ordered = true;
    std::string detail;
    for (const auto& id : cfg.participants) {
      const double maml = fs_metrics.at(id + "/MAML/TL/20"), pt = fs_metrics.at(id + "/PT/TL/20"),
                   dt = fs_metrics.at(id + "/DT/TL/fit");
      ordered = ordered && maml < pt && pt < dt;
      detail += fmt("%s %.3f/%.3f/%.3f; ", id.c_str(), maml, pt, dt);
    }
    const double maml = fs_metrics.at("all/MAML/TL/20"), pt = fs_metrics.at("all/PT/TL/20"),
                 dt = fs_metrics.at("all/DT/TL/fit");
    verdict(7, ordered && maml <= 0.8 * pt && secs.at("fewshot") < 1800,
            detail + fmt("all MAML %.3f, PT %.3f, DT %.3f (MAML/PT %.3f), %.0fs", maml, pt, dt, maml / pt,
                         secs.at("fewshot")));
  });

  guarded(8, [&] {
    const double tl = metric(runs, "fewshot", "all/MAML/TL/20"), il = metric(runs, "fewshot", "all/MAML/IL/20");
    verdict(8, std::abs(il - tl) <= 0.15 * tl,
            fmt("MAML-IL %.4f vs MAML-TL %.4f, gap %.1f%%", il, tl, 100 * std::abs(il - tl) / tl));
  });

  guarded(9, [&] {
    const double q = metric(runs, "gen-labels", "label_mae"), cbts = metric(runs, "truthinf-bench", "CBTS");
    verdict(9, q <= 1.25 * cbts, fmt("inferred-label MAE %.4f vs 1.25 x CBTS %.4f", q, 1.25 * cbts));
  });

  guarded(10, [&] {
    if (!runs.count("train-estimators")) throw ContractError("stage train-estimators did not complete");
    const auto t = load_table(ws.root() / "tables" / "estimators.csv");
    const auto ci = t.column("uncertainty_corr"), pi = t.column("phone");
    bool ok = !t.rows.empty();
    std::string detail;
    for (const auto& row : t.rows) {
      const double r = std::stod(row[ci]);
      ok = ok && r > 0.2;
      detail += row[pi] + " " + fmt("%.3f", r) + "; ";
    }
    verdict(10, ok, "Spearman(sigma, |bias|) " + detail);
  });
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void cli_determinism(const fs::path& workdir) {
  const fs::path a = workdir / "det_a", b = workdir / "det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  fs::create_directories(workdir);
  std::string failed;
  for (const auto& stage : stage_names())
    for (const auto& dir : {a, b}) {
      const std::string cmd = std::string(CROWDTEMP_CLI_PATH) + " " + stage + " --deterministic --config " +
                              CROWDTEMP_SMOKE_CONFIG + " --output-dir " + dir.string() + " >>" +
                              (workdir / "determinism.log").string() + " 2>&1";
      if (std::system(cmd.c_str()) != 0) failed += " " + stage;
    }
  std::size_t files = 0, differing = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.path().extension() != ".csv") continue;
    ++files;
    const auto other = b / fs::relative(e.path(), a);
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) {
      ++differing;
      std::printf("  differs: %s\n", fs::relative(e.path(), a).string().c_str());
    }
  }
  verdict(12, failed.empty() && files > 0 && differing == 0,
          fmt("%zu CSV files compared across two deterministic runs, %zu differ", files, differing) +
              (failed.empty() ? "" : "; stages failed:" + failed));
}

void published_corpus(const std::string& config_path, const fs::path& workdir) {
  if (config_path.empty()) {
    verdict(13, true, "skipped: no published corpus config given (--published-config)");
    return;
  }
  auto cfg = load_config(config_path);
  cfg.output_dir = (workdir / "published").string();
  const Workspace ws(cfg);
  std::map<std::string, StageResult> runs;
  for (const auto& stage : {"train-estimators", "train-cbts", "truthinf-bench", "gen-labels", "fewshot"})
    runs[stage] = run_stage(ws, stage);
  const double contrib = metric(runs, "train-estimators", "mean_val_mae"), cbts = metric(runs, "truthinf-bench", "CBTS"),
               maml = metric(runs, "fewshot", "all/MAML/TL/20");
  verdict(13, std::abs(contrib - 0.276) <= 0.08 && std::abs(cbts - 0.136) <= 0.05 && std::abs(maml - 1.019) <= 0.25,
          fmt("contributor MAE %.3f, CBTS %.3f, MAML-TL %.3f", contrib, cbts, maml));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string workdir = "acceptance_run", published;
  app.add_option("--workdir", workdir, "scratch directory for pipeline outputs");
  app.add_option("--published-config", published, "config pointing at the published corpus");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(workdir);

  guarded(1, gradient_correctness);
  guarded(2, loss_correctness);
  guarded(3, homomorphic_aggregation);
  guarded(4, federated_equivalence);
  guarded(6, mv_oracle_equivalence);
  guarded(11, adaptation_latency);
  synthetic_pipeline(workdir);
  guarded(12, [&] { cli_determinism(workdir); });
  guarded(13, [&] { published_corpus(published, workdir); });

  std::printf("\nsummary\n");
  for (const auto& [id, line] : summary) std::printf("%s\n", line.c_str());
  std::printf("%d criterion failure(s)\n", failures);
  return failures == 0 ? 0 : 1;
}
