#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "seqdiff/checkpoint.hpp"
#include "seqdiff/config.hpp"
#include "seqdiff/data.hpp"
#include "seqdiff/metrics.hpp"
#include "seqdiff/schedule.hpp"

namespace seqdiff {

/// Failure with a stable machine-readable code ("config", "io", "data", "checkpoint", ...).
class CommandError : public std::runtime_error {
 public:
  CommandError(std::string code, const std::string& message) : std::runtime_error(message), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

/// Process exit status for an error code.
int exit_code_for(const std::string& code);

/// Loads a dataset container, or ingests and k-core filters a raw interaction file.
InteractionDataset load_run_dataset(const RunConfig& config);

struct PreprocessOptions {
  std::filesystem::path input;
  std::string format = "csv";
  int k = 5;
  bool iterative = true;
  std::filesystem::path output;  // container; statistics go to `<output>.stats.json`
};

struct PreprocessResult {
  DatasetStats stats;
  std::size_t malformed = 0;
};

PreprocessResult cmd_preprocess(const PreprocessOptions& options, std::ostream* log = nullptr);

struct TrainRunOptions {
  std::optional<std::filesystem::path> resume;
  std::optional<int> stop_after;  // stop once this epoch completes, as if interrupted
};

struct TrainResult {
  TrainingState state;
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;  // empty when no epoch ran
};

/// Training loop with per-epoch validation. Writes into `config.output_dir`:
/// `config.txt`, `metrics.csv`, `checkpoints/epoch-NNNN.dfkp` and a `best` marker naming
/// the checkpoint with the highest validation NDCG@10.
TrainResult cmd_train(const RunConfig& config, const TrainRunOptions& options = {}, std::ostream* log = nullptr);

/// Checkpoint named by the `best` marker of a training output directory.
std::filesystem::path best_checkpoint(const std::filesystem::path& run_dir);

struct EvaluateOptions {
  std::filesystem::path checkpoint;
  Split split = Split::Test;
  std::optional<std::filesystem::path> output_dir;  // writes eval-<split>.csv/.json when set
};

/// Evaluates a checkpoint. Inference and data settings come from `config`.
MetricsReport cmd_evaluate(const RunConfig& config, const EvaluateOptions& options, std::ostream* log = nullptr);

struct Recommendation {
  int id = 0;
  std::string item;
  double probability = 0.0;
};

struct InferOptions {
  std::filesystem::path checkpoint;
  std::optional<std::string> user;  // recommend after the user's full history
  std::vector<std::string> items;   // or after this explicit history (original item IDs)
  int top_k = 10;
  bool exclude_seen = false;
};

std::vector<Recommendation> cmd_infer(const RunConfig& config, const InferOptions& options, std::ostream* log = nullptr);

/// CSV with header `n,beta,alpha_bar,beta_tilde` for n = 0..N. Row 0 holds the clean
/// state, so its beta and beta_tilde are 0.
void cmd_inspect_schedule(ScheduleKind kind, int steps, std::ostream& out);

struct SynthDataOptions {
  SynthOptions synth;
  std::filesystem::path output;
  bool raw_csv = false;  // write `user,item,timestamp` lines instead of a container
};

DatasetStats cmd_synth_data(const SynthDataOptions& options, std::ostream* log = nullptr);

MetricsReport cmd_baseline_pop(const RunConfig& config, Split split,
                               const std::optional<std::filesystem::path>& output_dir, std::ostream* log = nullptr);

/// Writes `<dir>/<stem>.csv` and `<dir>/<stem>.json`.
void write_report(const MetricsReport& report, const std::filesystem::path& dir, const std::string& stem);

}  // namespace seqdiff
