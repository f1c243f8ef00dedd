#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "stanet/errors.hpp"
#include "stanet/harness/harness.hpp"

using namespace stanet;

namespace {

// Exit codes: 0 success, 1 contract/config error, 2 verification failure.
constexpr int kExitError = 1;
constexpr int kExitVerification = 2;

harness::RunConfig resolve(const std::string& config_path, const std::map<std::string, std::string>& flags) {
  harness::RunConfig config = config_path.empty() ? harness::RunConfig{} : harness::load_run_config(config_path);
  config.apply(flags);
  config.validate();
  return config;
}

int run(int argc, char** argv) {
  CLI::App app{"STANet few-shot pipeline: train, evaluate and verify"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  app.add_option("--config", config_path, "key=value config file; flags override it");

  // One flag per config key, e.g. --seed, --episodes, --variant, --lambda.
  std::map<std::string, std::optional<std::string>> values;
  for (const auto& [key, unused] : model::parse_key_values(harness::RunConfig{}.to_text()))
    app.add_option("--" + key, values[key], "config key '" + key + "'");

  auto* train = app.add_subcommand("train", "Step 1: episodic training on the base split, writes a checkpoint");
  auto* eval = app.add_subcommand("eval", "Step 2: fine-tune, NTA and fused prediction on test episodes");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  auto* dump = app.add_subcommand("dump-attention", "write PatchCosine maps of one test episode");
  std::uint64_t episode_seed = 0;
  dump->add_option("--episode-seed", episode_seed, "seed of the dumped episode");
  auto* ablate = app.add_subcommand("ablate", "train and evaluate several variants on shared seeds");
  std::vector<std::string> variants{"none", "sta"};
  ablate->add_option("--variants", variants, "variant[:nta|:nonta] list")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitError;
  }

  std::map<std::string, std::string> flags;
  for (const auto& [key, value] : values)
    if (value) flags[key] = *value;
  const harness::RunConfig config = resolve(config_path, flags);

  if (train->parsed()) {
    harness::TrainResult result = harness::run_train(config);
    for (const auto& e : result.curve)
      std::printf("epoch %zu  loss %.6f  l_m %.6f  metric_acc %.4f\n", e.epoch, e.total, e.l_m, e.metric_accuracy);
    std::printf("checkpoint %s\n", config.checkpoint_path().string().c_str());
  } else if (eval->parsed()) {
    harness::MetricsReport report = harness::run_eval(config, config.checkpoint_path());
    std::printf("%s", report.summary().substr(0, report.summary().find("\n# config")).c_str());
    std::printf("report %s\n", (config.out / report.run_id / "eval").string().c_str());
  } else if (gradcheck->parsed()) {
    auto rows = harness::run_gradcheck(harness::default_gradcheck_registry(config), config.seed);
    std::printf("%s", harness::format_gradcheck(rows).c_str());
    for (const auto& r : rows)
      if (!r.passed) return kExitVerification;
  } else if (dump->parsed()) {
    model::StanetParams params = harness::load_for_eval(config, config.checkpoint_path());
    auto data = harness::build_dataset(config);
    auto maps = harness::collect_attention(params, data, config, episode_seed);
    auto dir = config.out / config.resolved_run_id() / ("attention_" + std::to_string(episode_seed));
    auto files = harness::write_attention(maps, dir);
    std::printf("wrote %zu files under %s\n", files.size(), (dir / "maps").string().c_str());
  } else if (ablate->parsed()) {
    auto rows = harness::run_ablation(config, variants);
    std::printf("%s", harness::format_ablation(rows).c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const harness::VerificationError& e) {
    std::cerr << "verification failed: " << e.what() << "\n";
    return kExitVerification;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
}
