// crowdtemp: runs one pipeline stage from a JSON experiment config.

#include <chrono>
#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"

#include "crowdtemp/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Phone ambient-temperature pipeline runner"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
  bool deterministic = false;
  app.add_option("--config", config_path, "JSON experiment config (defaults apply when omitted)");
  app.add_option("--seed", seed, "global seed, overrides the config");
  app.add_option("--output-dir", output_dir, "output directory, overrides the config");
  app.add_flag("--deterministic", deterministic, "single-threaded execution for byte-exact reruns");

  const std::vector<std::pair<std::string, std::string>> commands{
      {"synth", "generate the synthetic corpus"},
      {"train-estimators", "train one estimator per contributor"},
      {"train-cbts", "train the CBTS aggregator on contributor groups"},
      {"truthinf-bench", "compare CBTS with the baseline truth-inference methods"},
      {"gen-labels", "infer labels for participant training data"},
      {"fewshot", "meta-train and compare DT, PT and MAML few-shot adaptation"},
      {"fed", "run encrypted federated meta-training rounds"},
      {"report", "bundle every stage table into report.md"}};
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  CLI11_PARSE(app, argc, argv);
  const std::string stage = app.get_subcommands().front()->get_name();

  crowdtemp::ExperimentConfig cfg;
  try {
    if (config_path.empty()) {
      cfg = crowdtemp::default_experiment_config();
      crowdtemp::resolve(cfg);
    } else {
      cfg = crowdtemp::load_config(config_path);
    }
    if (seed) cfg.seed = *seed;
    if (!output_dir.empty()) cfg.output_dir = output_dir;
    if (deterministic) cfg.deterministic = true;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "crowdtemp: config: %s\n", e.what());
    return 2;
  }

  try {
    const auto t0 = std::chrono::steady_clock::now();
    crowdtemp::Workspace ws(cfg);
    const auto result = crowdtemp::run_stage(ws, stage);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s: done in %.1fs, config %s, output %s\n", stage.c_str(), secs,
                crowdtemp::hex64(ws.checksum()).c_str(), ws.root().string().c_str());
    for (const auto& [k, v] : result.metrics) std::printf("  %s = %.6g\n", k.c_str(), v);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "crowdtemp: stage %s failed: %s\n", stage.c_str(), e.what());
    return 1;
  }
  return 0;
}
