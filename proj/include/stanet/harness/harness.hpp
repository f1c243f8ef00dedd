#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "stanet/episodic/episodic.hpp"
#include "stanet/model/model.hpp"

// Experiment driver: configuration, Step 1 training, Step 2 evaluation,
// verification runs and report files.
namespace stanet::harness {

// A verification run found a defect (gradient mismatch, freeze violation).
// The CLI maps it to exit code 2.
class VerificationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  model::ModelConfig model;
  std::size_t way = 5, shot = 1, queries = 5;  // queries per class
  std::size_t epochs = 10;                     // E1
  std::size_t episodes_per_epoch = 50;
  std::size_t eval_episodes = 200;             // E2
  double lr = 0.05;                            // Step 1 SGD
  double clip = 5.0;                           // gradient norm cap, 0 = off
  std::uint64_t seed = 1;

  std::string data = "planted";  // planted | features | dir
  std::filesystem::path data_dir;
  episodic::PlantedSpec planted;
  episodic::FeatureSpec features;
  bool shuffle_labels = false;

  std::filesystem::path out = "runs";
  std::filesystem::path checkpoint;  // empty -> <out>/<training id>/checkpoint.stan
  std::string run_id;                // empty -> derived from the config text
  std::size_t threads = 0;           // 0 -> STANET_THREADS, else 1

  // Every key mirrors a CLI flag; see README for the list.
  void apply(const std::map<std::string, std::string>& keys);
  // Throws ConfigError before any compute.
  void validate() const;
  // Canonical key=value text; apply(parse_key_values(to_text())) round-trips.
  std::string to_text() const;

  // checkpoint, or <out>/<training id>/checkpoint.stan.
  std::filesystem::path checkpoint_path() const;
  // run_id, or the first 12 hex digits of a hash of to_text().
  std::string resolved_run_id() const;
  // run_id, or the same hash with evaluation-only keys at their defaults,
  // so train and eval invocations of one experiment agree on it.
  std::string training_id() const;
  // Worker count from threads, STANET_THREADS, else 1.
  std::size_t worker_count() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

// Synthetic or on-disk data as configured, label-shuffled on request.
episodic::FewShotDataset build_dataset(const RunConfig& config);

// Model config with channel and class counts taken from the data.
model::ModelConfig model_for_data(const RunConfig& config, const episodic::FewShotDataset& data);

// Global classifier row of every base class, by class id.
std::map<std::size_t, std::size_t> base_class_rows(const episodic::FewShotDataset& data);

// ---- Step 1 -------------------------------------------------------------------

struct EpochLoss {
  std::size_t epoch = 0;
  double total = 0.0, l_m = 0.0, l_g = 0.0, l_r = 0.0;
  double metric_accuracy = 0.0;
};

struct TrainResult {
  model::StanetParams params;
  std::vector<EpochLoss> curve;
};

// E1 epochs of base episodes with SGD on the multi-task loss. A non-finite
// loss throws NumericError naming the epoch and step.
TrainResult train_model(const RunConfig& config, const episodic::FewShotDataset& data);

// train_model plus <out>/<training id>/train/{loss.csv, config.txt} and the
// checkpoint (Step 1 flag set). Refuses to reuse an existing train directory.
TrainResult run_train(const RunConfig& config);

// ---- Step 2 -------------------------------------------------------------------

struct MetricsReport {
  std::vector<double> accuracies;  // by episode index
  double mean = 0.0;
  double ci_half_width = 0.0;      // 1.96 * sample std / sqrt(n)
  double seconds = 0.0;
  std::string config_text;
  std::string run_id;

  static MetricsReport from_accuracies(std::vector<double> accuracies);
  std::string summary() const;
};

// Mean and 95% half-width of the per-episode differences a - b.
struct PairedDifference {
  double mean = 0.0, ci_half_width = 0.0;
  bool significant() const { return mean - ci_half_width > 0.0; }
};
PairedDifference paired_difference(const std::vector<double>& a, const std::vector<double>& b);

// Test-split episode i is sampled from its own seed stream, so every
// variant sees the same episodes. Runs on worker_count() threads; results
// are stored by index, so the output does not depend on scheduling. Throws
// VerificationError if the parameter hash moves.
std::vector<double> evaluate_episodes(const model::StanetParams& params, const episodic::FewShotDataset& data,
                                      const RunConfig& config);

// Step-1-complete checkpoint required (ContractError otherwise). The run
// config's NTA settings override the checkpoint's.
model::StanetParams load_for_eval(const RunConfig& config, const std::filesystem::path& checkpoint);

// Writes <out>/<run id>/eval/{metrics.csv, summary.txt, runtime.txt};
// refuses (ContractError) if that directory already exists.
MetricsReport run_eval(const RunConfig& config, const std::filesystem::path& checkpoint);
void write_report(const MetricsReport& report, const std::filesystem::path& dir);

// ---- gradient checks ----------------------------------------------------------

struct GradcheckEntry {
  std::string name;
  double threshold = 1e-4;
  std::function<double(Rng&)> run;  // worst relative error over its trials
};

struct GradcheckRow {
  std::string name;
  double error = 0.0;
  double threshold = 0.0;
  bool passed = false;
};

// One entry per differentiable operation plus the end-to-end Step 1 check
// on a 16-parameter subset.
std::vector<GradcheckEntry> default_gradcheck_registry(const RunConfig& config);
std::vector<GradcheckRow> run_gradcheck(const std::vector<GradcheckEntry>& registry, std::uint64_t seed);
std::string format_gradcheck(const std::vector<GradcheckRow>& rows);

// ---- attention dumps ----------------------------------------------------------

// Maps of every (module, class, query) pair of one test episode.
struct AttentionDump {
  episodic::Episode episode;
  std::size_t h = 0, w = 0;
  // module -> [class][query] map of h*w cosines
  std::map<std::string, std::vector<std::vector<std::vector<double>>>> maps;
};
AttentionDump collect_attention(const model::StanetParams& params, const episodic::FewShotDataset& data,
                                const RunConfig& config, std::uint64_t episode_seed);

// Writes <dir>/maps/<module>_class<k>_query<j>.{csv,pgm}; returns the paths.
std::vector<std::filesystem::path> write_attention(const AttentionDump& dump, const std::filesystem::path& dir);

// Cells of the feature grid covered by an item's planted patch: 1 where at
// least half the cell lies inside it, -1 where none does, 0 otherwise.
std::vector<int> patch_mask(const episodic::Item& item, std::size_t patch_size, std::size_t img_size, std::size_t h,
                            std::size_t w);

// ---- ablation -------------------------------------------------------------------

struct AblationRow {
  std::string label;  // as given, e.g. "sta" or "sta:nonta"
  MetricsReport report;
  PairedDifference vs_first;
};

// Each label is a variant name optionally followed by ":nta" or ":nonta".
// Every row is trained from the same seed and evaluated on the same episodes.
std::vector<AblationRow> ablate(const RunConfig& config, const std::vector<std::string>& labels);
// ablate plus <out>/<run id>/ablation/{ablation.csv, summary.txt}.
std::vector<AblationRow> run_ablation(const RunConfig& config, const std::vector<std::string>& labels);
std::string format_ablation(const std::vector<AblationRow>& rows);

}  // namespace stanet::harness
