#include "seqdiff/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string_view>
#include <unordered_map>

#include <json.hpp>

#include "seqdiff/diffusion.hpp"
#include "seqdiff/sequence.hpp"

namespace seqdiff {

InputFormat parse_input_format(const std::string& tag) {
  if (tag == "csv") return InputFormat::Csv;
  if (tag == "tsv") return InputFormat::Tsv;
  if (tag == "movielens" || tag == "ml") return InputFormat::MovieLens;
  throw std::invalid_argument("unknown input format '" + tag + "'");
}

std::string to_string(InputFormat f) {
  switch (f) {
    case InputFormat::Csv: return "csv";
    case InputFormat::Tsv: return "tsv";
    case InputFormat::MovieLens: return "movielens";
  }
  return "?";
}

Split parse_split(const std::string& tag) {
  if (tag == "train") return Split::Train;
  if (tag == "valid" || tag == "validation") return Split::Valid;
  if (tag == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + tag + "'");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + sep.size();
  }
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::optional<std::int64_t> parse_timestamp(std::string_view s) {
  std::int64_t v = 0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || v < 0) return std::nullopt;
  return v;
}

}  // namespace

IngestResult parse_interactions(std::istream& in, InputFormat format) {
  IngestResult result;
  const std::string_view sep = format == InputFormat::Csv ? "," : format == InputFormat::Tsv ? "\t" : "::";
  const std::size_t ts_field = format == InputFormat::MovieLens ? 3 : 2;
  std::string line;
  while (std::getline(in, line)) {
    const auto text = trim(line);
    if (text.empty()) continue;
    const auto fields = split_fields(text, sep);
    if (fields.size() <= ts_field) {
      ++result.malformed;
      continue;
    }
    const auto user = trim(fields[0]);
    const auto item = trim(fields[1]);
    const auto ts = parse_timestamp(trim(fields[ts_field]));
    if (user.empty() || item.empty() || !ts) {
      ++result.malformed;
      continue;
    }
    result.records.push_back({std::string(user), std::string(item), *ts});
  }
  if (result.records.empty()) result.warnings.push_back("no interactions parsed");
  if (result.malformed > 0) result.warnings.push_back(std::to_string(result.malformed) + " malformed line(s) skipped");
  return result;
}

IngestResult ingest(const std::filesystem::path& path, InputFormat format) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  return parse_interactions(in, format);
}

std::vector<InteractionRecord> kcore_filter(const std::vector<InteractionRecord>& records, int k, bool iterative) {
  if (k < 1) throw std::invalid_argument("k-core threshold must be at least 1");
  std::vector<char> keep(records.size(), 1);
  while (true) {
    std::unordered_map<std::string_view, int> user_count;
    std::unordered_map<std::string_view, int> item_count;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (!keep[i]) continue;
      ++user_count[records[i].user];
      ++item_count[records[i].item];
    }
    bool changed = false;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (keep[i] && (user_count[records[i].user] < k || item_count[records[i].item] < k)) {
        keep[i] = 0;
        changed = true;
      }
    }
    if (!changed || !iterative) break;
  }
  std::vector<InteractionRecord> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (keep[i]) out.push_back(records[i]);
  return out;
}

std::size_t InteractionDataset::action_count() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.size();
  return n;
}

bool InteractionDataset::eligible(std::size_t user, Split split) const {
  const auto& seq = sequences.at(user);
  return split == Split::Test ? seq.size() >= 2 : seq.size() >= 3;
}

std::vector<int> InteractionDataset::history(std::size_t user, Split split) const {
  if (!eligible(user, split)) throw std::invalid_argument("user " + std::to_string(user) + " too short for split " + to_string(split));
  const auto& seq = sequences[user];
  const std::size_t end = split == Split::Test ? test_index(seq) : split == Split::Valid ? valid_index(seq) : valid_index(seq) - 1;
  return {seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(end)};
}

int InteractionDataset::target(std::size_t user, Split split) const {
  if (!eligible(user, split)) throw std::invalid_argument("user " + std::to_string(user) + " too short for split " + to_string(split));
  const auto& seq = sequences[user];
  switch (split) {
    case Split::Test: return seq[test_index(seq)];
    case Split::Valid: return seq[valid_index(seq)];
    case Split::Train: return seq[valid_index(seq) - 1];
  }
  return kPaddingId;
}

InteractionDataset build_dataset(const std::vector<InteractionRecord>& records) {
  if (records.empty()) throw std::invalid_argument("cannot build a dataset from zero interactions");
  InteractionDataset data;
  data.items = {InteractionDataset::kPaddingToken, InteractionDataset::kUnknownToken};
  std::unordered_map<std::string, int> item_ids;
  std::unordered_map<std::string, std::size_t> user_ids;
  std::vector<std::vector<std::pair<std::int64_t, int>>> events;
  for (const auto& r : records) {
    auto [it, fresh] = item_ids.try_emplace(r.item, static_cast<int>(data.items.size()));
    if (fresh) data.items.push_back(r.item);
    auto [ut, new_user] = user_ids.try_emplace(r.user, data.users.size());
    if (new_user) {
      data.users.push_back(r.user);
      events.emplace_back();
    }
    events[ut->second].emplace_back(r.timestamp, it->second);
  }
  data.sequences.reserve(events.size());
  for (auto& ev : events) {
    std::stable_sort(ev.begin(), ev.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<int> seq;
    seq.reserve(ev.size());
    for (const auto& e : ev) seq.push_back(e.second);
    data.sequences.push_back(std::move(seq));
  }
  return data;
}

std::string DatasetStats::sparsity_percent() const {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", sparsity * 100.0);
  return buf;
}

std::string DatasetStats::to_json() const {
  nlohmann::ordered_json j;
  j["#users"] = users;
  j["#items"] = items;
  j["#actions"] = actions;
  j["avg.length"] = avg_length;
  j["sparsity"] = sparsity_percent();
  return j.dump(2);
}

DatasetStats dataset_stats(const InteractionDataset& data) {
  DatasetStats s;
  s.users = data.user_count();
  s.items = static_cast<std::size_t>(std::max(0, data.item_count()));
  s.actions = data.action_count();
  s.avg_length = s.users ? static_cast<double>(s.actions) / static_cast<double>(s.users) : 0.0;
  const double cells = static_cast<double>(s.users) * static_cast<double>(s.items);
  s.sparsity = cells > 0 ? 1.0 - static_cast<double>(s.actions) / cells : 0.0;
  return s;
}

std::vector<Batch> make_batches(const InteractionDataset& data, Split split, int length, int batch_size,
                                RandomStream* shuffle) {
  if (length < 2) throw std::invalid_argument("sequence length must be at least 2");
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  std::vector<std::size_t> order;
  for (std::size_t u = 0; u < data.user_count(); ++u)
    if (data.eligible(u, split)) order.push_back(u);
  if (shuffle != nullptr)
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle->below(i)]);
  std::vector<Batch> batches;
  for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(batch_size)) {
    Batch b;
    const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(batch_size));
    for (std::size_t i = begin; i < end; ++i) {
      const std::size_t u = order[i];
      auto hist = data.history(u, split);
      b.users.push_back(u);
      b.targets.push_back(data.target(u, split));
      if (split == Split::Train) {
        hist.push_back(b.targets.back());
        b.rows.push_back(left_pad(hist, length));
      } else {
        b.rows.push_back(prepare_inference_sequence(hist, length));
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

std::vector<std::vector<int>> training_rows(const InteractionDataset& data, int length) {
  std::vector<std::vector<int>> rows;
  for (auto& b : make_batches(data, Split::Train, length, std::numeric_limits<int>::max()))
    for (auto& r : b.rows) rows.push_back(std::move(r));
  return rows;
}

std::vector<InteractionRecord> synth_records(const SynthOptions& o) {
  if (o.users < 1 || o.items < 2 || o.min_length < 1 || o.max_length < o.min_length || !(o.sharpness >= 0.0))
    throw std::invalid_argument("synthetic data parameters must be positive with min_length <= max_length");
  RandomStream rng(o.seed, "synth");
  std::vector<int> perm(static_cast<std::size_t>(o.items));
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<int> successor(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) successor[static_cast<std::size_t>(perm[i])] = perm[(i + 1) % perm.size()];
  // P(successor) = e^s / (e^s + items - 1); every other item shares the rest evenly
  const double p_next = 1.0 / (1.0 + (o.items - 1) * std::exp(-o.sharpness));

  std::vector<InteractionRecord> out;
  for (int u = 0; u < o.users; ++u) {
    const int len = o.min_length + static_cast<int>(rng.below(static_cast<std::uint64_t>(o.max_length - o.min_length + 1)));
    int cur = static_cast<int>(rng.below(static_cast<std::uint64_t>(o.items)));
    for (int t = 0; t < len; ++t) {
      out.push_back({"u" + std::to_string(u), "i" + std::to_string(cur), t});
      const int next = successor[static_cast<std::size_t>(cur)];
      if (rng.uniform() < p_next) {
        cur = next;
      } else {
        // uniform over the items other than the successor
        int pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(o.items - 1)));
        if (pick >= next) ++pick;
        cur = pick;
      }
    }
  }
  return out;
}

InteractionDataset synth_generate(const SynthOptions& options) { return build_dataset(synth_records(options)); }

namespace {

constexpr char kDatasetMagic[4] = {'D', 'F', 'R', 'C'};
constexpr std::uint16_t kDatasetVersion = 1;

void put_u16(std::ostream& out, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  out.write(b, 2);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

void put_varint(std::ostream& out, std::uint64_t v) {
  while (v >= 0x80) {
    out.put(static_cast<char>((v & 0x7f) | 0x80));
    v >>= 7;
  }
  out.put(static_cast<char>(v));
}

void put_string(std::ostream& out, const std::string& s) {
  put_varint(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint8_t get_byte(std::istream& in) {
  const int c = in.get();
  if (c == std::char_traits<char>::eof()) throw std::runtime_error("dataset container truncated");
  return static_cast<std::uint8_t>(c);
}

std::uint16_t get_u16(std::istream& in) {
  const std::uint16_t lo = get_byte(in);
  return static_cast<std::uint16_t>(lo | (get_byte(in) << 8));
}

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(get_byte(in)) << (8 * i);
  return v;
}

std::uint64_t get_varint(std::istream& in) {
  std::uint64_t v = 0;
  for (int shift = 0; shift < 64; shift += 7) {
    const std::uint8_t b = get_byte(in);
    v |= static_cast<std::uint64_t>(b & 0x7f) << shift;
    if (!(b & 0x80)) return v;
  }
  throw std::runtime_error("dataset container has an overlong varint");
}

std::string get_string(std::istream& in) {
  const auto n = get_varint(in);
  if (n > (1u << 20)) throw std::runtime_error("dataset container string too long");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("dataset container truncated");
  return s;
}

}  // namespace

void write_dataset(const InteractionDataset& data, std::ostream& out) {
  out.write(kDatasetMagic, 4);
  put_u16(out, kDatasetVersion);
  put_u32(out, static_cast<std::uint32_t>(data.vocab_size()));
  put_u32(out, static_cast<std::uint32_t>(data.user_count()));
  for (const auto& seq : data.sequences) {
    put_varint(out, seq.size());
    for (int id : seq) put_varint(out, static_cast<std::uint64_t>(id));
  }
  for (const auto& u : data.users) put_string(out, u);
  for (const auto& i : data.items) put_string(out, i);
  if (!out) throw std::runtime_error("failed writing dataset container");
}

InteractionDataset read_dataset(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || !std::equal(magic, magic + 4, kDatasetMagic)) throw std::runtime_error("not a dataset container (bad magic)");
  const auto version = get_u16(in);
  if (version != kDatasetVersion) throw std::runtime_error("unsupported dataset container version " + std::to_string(version));
  const auto vocab = get_u32(in);
  const auto users = get_u32(in);
  InteractionDataset data;
  data.sequences.resize(users);
  for (auto& seq : data.sequences) {
    const auto n = get_varint(in);
    seq.resize(n);
    for (auto& id : seq) {
      const auto v = get_varint(in);
      if (v >= vocab) throw std::runtime_error("dataset container item id outside vocabulary");
      id = static_cast<int>(v);
    }
  }
  data.users.resize(users);
  for (auto& u : data.users) u = get_string(in);
  data.items.resize(vocab);
  for (auto& i : data.items) i = get_string(in);
  return data;
}

void save_dataset(const InteractionDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  write_dataset(data, out);
}

InteractionDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  return read_dataset(in);
}

}  // namespace seqdiff
