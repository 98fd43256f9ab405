#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>

#include "seqdiff/adam.hpp"
#include "seqdiff/config.hpp"
#include "seqdiff/dsr.hpp"
#include "seqdiff/sampler.hpp"
#include "seqdiff/trainer.hpp"

namespace seqdiff {

/// Everything needed to continue training bit-exactly from the end of `epoch`.
struct TrainingState {
  RunConfig config;
  DsrParams<float> params;
  AdamState<float> adam;
  ImportanceSampler sampler;
  TrainStreams streams;
  int epoch = 0;  // completed epochs
  double best_ndcg = -1.0;
  int best_epoch = -1;

  /// Fresh state for `config`: initialized parameters, zero moments, uniform sampler.
  static TrainingState initial(const RunConfig& config, int vocab_size);

  friend bool operator==(const TrainingState& a, const TrainingState& b);
};

/// "DFKP" container: version, config text, named f32 tensors, Adam moments, sampler
/// history, epoch, tagged RNG states and the best-validation marker. Little-endian.
void write_checkpoint(const TrainingState& state, std::ostream& out);
TrainingState read_checkpoint(std::istream& in);
void save_checkpoint(const TrainingState& state, const std::filesystem::path& path);
TrainingState load_checkpoint(const std::filesystem::path& path);

}  // namespace seqdiff
