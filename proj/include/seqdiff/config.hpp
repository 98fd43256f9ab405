#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "seqdiff/data.hpp"
#include "seqdiff/dsr.hpp"
#include "seqdiff/inference.hpp"
#include "seqdiff/trainer.hpp"

namespace seqdiff {

/// Every knob of a run. Text form is `key = value` lines with dotted keys; a `[section]`
/// header prefixes the keys below it, so `[model]` + `width = 64` sets `model.width`.
struct RunConfig {
  std::string data_path;
  std::string data_format = "csv";
  int kcore = 5;
  bool kcore_iterative = true;

  DsrConfig model{};
  int epochs = 50;
  int batch_size = 256;
  double lr = 1e-3;
  double clip_norm = 5.0;
  bool per_batch_step_sampling = false;
  bool rec_on_clean = false;
  int sampler_history = ImportanceSampler::kDefaultHistory;

  std::string inference_mode = "efficient";
  int seed_count = 10;
  std::vector<std::uint64_t> seeds;  // explicit list; derived from the master seed when empty
  int valid_seed_count = 10;
  bool exclude_seen = false;

  std::uint64_t master_seed = 42;
  std::string output_dir = "runs";

  /// Sets one field from its textual value. Throws std::invalid_argument on unknown
  /// keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static std::vector<std::string> keys();

  /// Sorted `key = value` lines; identical configs give identical text.
  std::string to_text() const;
  static RunConfig from_text(const std::string& text);
  /// Applies the keys present in `text` on top of the current values.
  void merge_text(const std::string& text);
  static RunConfig from_file(const std::filesystem::path& path);

  void validate() const;

  TrainOptions train_options() const;
  InferenceConfig inference_config() const;
  InferenceConfig validation_inference() const;

  friend bool operator==(const RunConfig& a, const RunConfig& b) { return a.to_text() == b.to_text(); }
};

}  // namespace seqdiff
