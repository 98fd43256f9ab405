#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "seqdiff/random.hpp"

namespace seqdiff {

struct InteractionRecord {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;

  friend bool operator==(const InteractionRecord&, const InteractionRecord&) = default;
};

enum class InputFormat { Csv, Tsv, MovieLens };

InputFormat parse_input_format(const std::string& tag);
std::string to_string(InputFormat f);

struct IngestResult {
  std::vector<InteractionRecord> records;
  std::size_t malformed = 0;
  std::vector<std::string> warnings;
};

/// Lines are `user,item,timestamp[,...]` (CSV), tab-separated (TSV) or
/// `user::item::rating::timestamp` (MovieLens). A non-numeric header line in CSV/TSV
/// counts as malformed like any other unparsable line.
IngestResult parse_interactions(std::istream& in, InputFormat format);
IngestResult ingest(const std::filesystem::path& path, InputFormat format);

/// Drops users and items with fewer than k interactions. Iterative mode repeats until
/// nothing changes; single-pass mode applies both rules once against the input counts.
std::vector<InteractionRecord> kcore_filter(const std::vector<InteractionRecord>& records, int k = 5,
                                            bool iterative = true);

enum class Split { Train, Valid, Test };

Split parse_split(const std::string& tag);
std::string to_string(Split s);

/// Per-user chronological item-ID sequences. Item IDs 0 and 1 are reserved for padding
/// and the [unk] placeholder; real items start at 2 in order of first appearance.
struct InteractionDataset {
  static constexpr const char* kPaddingToken = "<pad>";
  static constexpr const char* kUnknownToken = "<unk>";

  std::vector<std::string> users;               // original user IDs
  std::vector<std::string> items;               // items[id] is the original item ID
  std::vector<std::vector<int>> sequences;      // per user, oldest first

  int vocab_size() const { return static_cast<int>(items.size()); }
  int item_count() const { return vocab_size() - 2; }
  std::size_t user_count() const { return sequences.size(); }
  std::size_t action_count() const;

  /// Index of the validation target (second to last) and test target (last).
  static std::size_t valid_index(const std::vector<int>& seq) { return seq.size() - 2; }
  static std::size_t test_index(const std::vector<int>& seq) { return seq.size() - 1; }

  /// History visible when predicting the target of `split`, and that target.
  /// For Train the target is the last item of the training prefix.
  std::vector<int> history(std::size_t user, Split split) const;
  int target(std::size_t user, Split split) const;
  bool eligible(std::size_t user, Split split) const;

  friend bool operator==(const InteractionDataset&, const InteractionDataset&) = default;
};

/// Stable chronological sort per user; vocabulary by first appearance.
InteractionDataset build_dataset(const std::vector<InteractionRecord>& records);

struct DatasetStats {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t actions = 0;
  double avg_length = 0.0;
  double sparsity = 0.0;  // 1 - actions / (users * items)

  std::string sparsity_percent() const;  // "95.81%"
  std::string to_json() const;
};

DatasetStats dataset_stats(const InteractionDataset& data);

struct Batch {
  std::vector<std::size_t> users;
  std::vector<std::vector<int>> rows;  // each of length T
  std::vector<int> targets;
};

/// Train rows end in their target; valid/test rows end in [unk] with the target held out.
/// Rows are visited in user order, or shuffled when a stream is supplied.
std::vector<Batch> make_batches(const InteractionDataset& data, Split split, int length, int batch_size,
                                RandomStream* shuffle = nullptr);

/// Training sequences (one per eligible user) in user order.
std::vector<std::vector<int>> training_rows(const InteractionDataset& data, int length);

struct SynthOptions {
  int users = 2000;
  int items = 100;
  double sharpness = 6.0;  // log-odds boost of the successor item; infinity gives a fixed cycle
  int min_length = 5;
  int max_length = 50;
  std::uint64_t seed = 0;
};

/// Order-1 Markov sequences over a seeded cyclic successor map.
std::vector<InteractionRecord> synth_records(const SynthOptions& options);
InteractionDataset synth_generate(const SynthOptions& options);

/// Binary container: "DFRC", u16 version, u32 vocabulary size, varint-delimited ID lists,
/// then the user and item string tables.
void save_dataset(const InteractionDataset& data, const std::filesystem::path& path);
InteractionDataset load_dataset(const std::filesystem::path& path);
void write_dataset(const InteractionDataset& data, std::ostream& out);
InteractionDataset read_dataset(std::istream& in);

}  // namespace seqdiff
