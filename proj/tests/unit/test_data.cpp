#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "seqdiff/data.hpp"
#include "seqdiff/diffusion.hpp"

using namespace seqdiff;

namespace {

IngestResult parse(const std::string& text, InputFormat format) {
  std::istringstream in(text);
  return parse_interactions(in, format);
}

// Removes one violating record at a time and recounts from scratch.
std::vector<InteractionRecord> kcore_oracle(std::vector<InteractionRecord> records, int k) {
  while (true) {
    std::map<std::string, int> users, items;
    for (const auto& r : records) {
      ++users[r.user];
      ++items[r.item];
    }
    const auto bad = std::find_if(records.begin(), records.end(),
                                  [&](const auto& r) { return users[r.user] < k || items[r.item] < k; });
    if (bad == records.end()) return records;
    records.erase(bad);
  }
}

std::vector<InteractionRecord> user_block(const std::string& user, const std::vector<std::string>& items, std::int64_t t0 = 0) {
  std::vector<InteractionRecord> out;
  for (const auto& item : items) out.push_back({user, item, t0++});
  return out;
}

void append(std::vector<InteractionRecord>& a, const std::vector<InteractionRecord>& b) { a.insert(a.end(), b.begin(), b.end()); }

}  // namespace

TEST_CASE("movielens line parses into user, item and timestamp") {
  const auto r = parse("1::1193::5::978300760\n", InputFormat::MovieLens);
  REQUIRE(r.records.size() == 1);
  CHECK(r.records[0] == InteractionRecord{"1", "1193", 978300760});
  CHECK(r.malformed == 0);
}

TEST_CASE("csv and tsv lines parse, extra columns ignored") {
  const auto csv = parse("u1,i1,10\nu2, i2 ,20,4.5\n", InputFormat::Csv);
  REQUIRE(csv.records.size() == 2);
  CHECK(csv.records[1] == InteractionRecord{"u2", "i2", 20});
  const auto tsv = parse("u1\ti1\t10\r\n", InputFormat::Tsv);
  REQUIRE(tsv.records.size() == 1);
  CHECK(tsv.records[0] == InteractionRecord{"u1", "i1", 10});
}

TEST_CASE("malformed lines are counted and skipped") {
  const auto r = parse("user,item,timestamp\nu1,i1,abc\nu1,i1\n,i1,3\nu1,i1,-4\nu1,i1,5\n\n", InputFormat::Csv);
  CHECK(r.records.size() == 1);
  CHECK(r.malformed == 5);
  CHECK_FALSE(r.warnings.empty());
}

TEST_CASE("empty input yields no records and a warning") {
  const auto r = parse("", InputFormat::Csv);
  CHECK(r.records.empty());
  CHECK(r.malformed == 0);
  REQUIRE(r.warnings.size() == 1);
}

TEST_CASE("format and split tags") {
  CHECK(parse_input_format("movielens") == InputFormat::MovieLens);
  CHECK(parse_input_format("tsv") == InputFormat::Tsv);
  CHECK_THROWS_AS(parse_input_format("xml"), std::invalid_argument);
  CHECK(parse_split("valid") == Split::Valid);
  CHECK(to_string(Split::Test) == "test");
  CHECK_THROWS_AS(parse_split("dev"), std::invalid_argument);
  CHECK_THROWS(ingest("/nonexistent/ratings.dat", InputFormat::MovieLens));
}

TEST_CASE("k-core keeps input that already satisfies the threshold") {
  std::vector<InteractionRecord> records;
  for (int u = 0; u < 5; ++u) append(records, user_block("u" + std::to_string(u), {"a", "b", "c", "d", "e"}));
  CHECK(kcore_filter(records, 5) == records);
}

TEST_CASE("k-core removes a four-interaction user but keeps popular items") {
  std::vector<InteractionRecord> records;
  for (int u = 0; u < 5; ++u) append(records, user_block("u" + std::to_string(u), {"a", "b", "c", "d", "e"}));
  append(records, user_block("short", {"a", "b", "c", "d"}));
  const auto out = kcore_filter(records, 5);
  CHECK(out.size() == 25);
  CHECK(std::none_of(out.begin(), out.end(), [](const auto& r) { return r.user == "short"; }));
  std::set<std::string> items;
  for (const auto& r : out) items.insert(r.item);
  CHECK(items.size() == 5);
}

TEST_CASE("k-core cascades to the brute-force fixed point") {
  // Dropping `weak` starves item z, which then starves users u3..u4 below five.
  std::vector<InteractionRecord> records;
  for (int u = 0; u < 3; ++u) append(records, user_block("u" + std::to_string(u), {"a", "b", "c", "d", "e"}));
  for (int u = 3; u < 5; ++u) append(records, user_block("u" + std::to_string(u), {"a", "b", "c", "d", "z"}));
  append(records, user_block("weak", {"z", "z"}));
  append(records, user_block("x", {"z", "e", "e"}));
  const auto out = kcore_filter(records, 5);
  CHECK(out == kcore_oracle(records, 5));
  CHECK(out.empty());
  CHECK(kcore_filter(records, 5, false) != out);
}

TEST_CASE("k-core matches the oracle on random small logs") {
  RandomStream rng(3, "kcore-test");
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<InteractionRecord> records;
    const auto n = 20 + rng.below(81);
    const auto users = 2 + rng.below(8), items = 2 + rng.below(8);
    for (std::uint64_t i = 0; i < n; ++i)
      records.push_back({"u" + std::to_string(rng.below(users)), "i" + std::to_string(rng.below(items)),
                         static_cast<std::int64_t>(i)});
    const int k = 1 + static_cast<int>(rng.below(5));
    const auto out = kcore_filter(records, k);
    REQUIRE(out == kcore_oracle(records, k));
    CHECK(kcore_filter(out, k) == out);
    std::map<std::string, int> uc, ic;
    for (const auto& r : out) {
      ++uc[r.user];
      ++ic[r.item];
    }
    for (const auto& [_, c] : uc) CHECK(c >= k);
    for (const auto& [_, c] : ic) CHECK(c >= k);
  }
  CHECK_THROWS_AS(kcore_filter({}, 0), std::invalid_argument);
}

TEST_CASE("dataset vocabulary reserves 0 and 1 and follows first appearance") {
  const auto data = build_dataset({{"u1", "x", 3}, {"u2", "y", 1}, {"u1", "y", 1}, {"u2", "x", 2}});
  REQUIRE(data.items.size() == 4);
  CHECK(data.items[kPaddingId] == InteractionDataset::kPaddingToken);
  CHECK(data.items[kUnknownId] == InteractionDataset::kUnknownToken);
  CHECK(data.items[2] == "x");
  CHECK(data.items[3] == "y");
  CHECK(data.users == std::vector<std::string>{"u1", "u2"});
  CHECK(data.sequences[0] == std::vector<int>{3, 2});
  CHECK(data.sequences[1] == std::vector<int>{3, 2});
  CHECK_THROWS_AS(build_dataset({}), std::invalid_argument);
}

TEST_CASE("equal timestamps keep input order") {
  const auto data = build_dataset({{"u", "c", 5}, {"u", "a", 5}, {"u", "b", 1}, {"u", "d", 5}});
  const auto& s = data.sequences[0];
  std::vector<std::string> names;
  for (int id : s) names.push_back(data.items[static_cast<std::size_t>(id)]);
  CHECK(names == std::vector<std::string>{"b", "c", "a", "d"});
}

TEST_CASE("leave-one-out splits") {
  const auto data = build_dataset(user_block("u", {"a", "b", "c", "d", "e"}));
  // a..e map to 2..6
  CHECK(data.history(0, Split::Train) == std::vector<int>{2, 3});
  CHECK(data.target(0, Split::Train) == 4);
  CHECK(data.history(0, Split::Valid) == std::vector<int>{2, 3, 4});
  CHECK(data.target(0, Split::Valid) == 5);
  CHECK(data.history(0, Split::Test) == std::vector<int>{2, 3, 4, 5});
  CHECK(data.target(0, Split::Test) == 6);

  const auto pair = build_dataset(user_block("v", {"a", "b"}));
  CHECK(pair.eligible(0, Split::Test));
  CHECK_FALSE(pair.eligible(0, Split::Valid));
  CHECK_THROWS_AS(pair.history(0, Split::Train), std::invalid_argument);
}

TEST_CASE("train batches end in their target, evaluation batches in the placeholder") {
  const auto data = build_dataset(user_block("u", {"a", "b", "c", "d", "e"}));
  const auto train = make_batches(data, Split::Train, 6, 8);
  REQUIRE(train.size() == 1);
  CHECK(train[0].rows[0] == std::vector<int>{0, 0, 0, 2, 3, 4});
  CHECK(train[0].targets[0] == train[0].rows[0].back());
  const auto test = make_batches(data, Split::Test, 6, 8);
  CHECK(test[0].rows[0] == std::vector<int>{0, 2, 3, 4, 5, kUnknownId});
  CHECK(test[0].targets[0] == 6);
  const auto cut = make_batches(data, Split::Test, 3, 8);
  CHECK(cut[0].rows[0] == std::vector<int>{4, 5, kUnknownId});
  CHECK_THROWS_AS(make_batches(data, Split::Test, 1, 8), std::invalid_argument);
  CHECK_THROWS_AS(make_batches(data, Split::Test, 4, 0), std::invalid_argument);
}

TEST_CASE("batches cover every eligible user exactly once") {
  auto data = synth_generate({.users = 57, .items = 12, .min_length = 2, .max_length = 9, .seed = 4});
  for (Split split : {Split::Train, Split::Valid, Split::Test}) {
    std::multiset<std::size_t> seen, expected;
    for (std::size_t u = 0; u < data.user_count(); ++u)
      if (data.eligible(u, split)) expected.insert(u);
    RandomStream shuffle(1, "shuffle");
    const auto batches = make_batches(data, split, 5, 8, &shuffle);
    for (const auto& b : batches) {
      CHECK(b.rows.size() <= 8);
      CHECK(b.rows.size() == b.targets.size());
      for (std::size_t i = 0; i < b.users.size(); ++i) {
        seen.insert(b.users[i]);
        CHECK(b.targets[i] == data.target(b.users[i], split));
        CHECK(b.targets[i] >= 2);
      }
    }
    CHECK(seen == expected);
  }
  RandomStream a(9, "shuffle"), b(9, "shuffle");
  const auto x = make_batches(data, Split::Train, 5, 8, &a);
  const auto y = make_batches(data, Split::Train, 5, 8, &b);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(x[i].users == y[i].users);
  CHECK(training_rows(data, 5).size() == make_batches(data, Split::Train, 5, 1000)[0].rows.size());
}

TEST_CASE("synthetic data is seeded and honours its limits") {
  const SynthOptions o{.users = 40, .items = 15, .sharpness = 2.0, .min_length = 5, .max_length = 50, .seed = 7};
  const auto a = synth_generate(o);
  CHECK(a == synth_generate(o));
  auto other = o;
  other.seed = 8;
  CHECK_FALSE(a == synth_generate(other));
  CHECK(a.user_count() == 40);
  for (const auto& s : a.sequences) {
    CHECK(s.size() >= 5);
    CHECK(s.size() <= 50);
  }
  CHECK_THROWS_AS(synth_records({.users = 0}), std::invalid_argument);
}

TEST_CASE("infinite sharpness gives a deterministic successor map") {
  const auto data = synth_generate({.users = 100, .items = 20, .sharpness = std::numeric_limits<double>::infinity(), .seed = 1});
  std::map<int, int> next;
  for (const auto& s : data.sequences)
    for (std::size_t t = 0; t + 1 < s.size(); ++t) {
      const auto [it, fresh] = next.emplace(s[t], s[t + 1]);
      CHECK(it->second == s[t + 1]);
    }
  CHECK(next.size() == 20);
}

TEST_CASE("zero sharpness gives uniform transitions") {
  const auto data = synth_generate({.users = 2000, .items = 10, .sharpness = 0.0, .seed = 2});
  std::map<int, double> counts;
  double total = 0;
  for (const auto& s : data.sequences)
    for (std::size_t t = 1; t < s.size(); ++t) {
      ++counts[s[t]];
      ++total;
    }
  for (const auto& [_, c] : counts) CHECK(c / total == doctest::Approx(0.1).epsilon(0.05));
}

TEST_CASE("dataset statistics and sparsity string") {
  const auto data = build_dataset(user_block("u", {"a", "b", "c", "d"}));
  const auto s = dataset_stats(data);
  CHECK(s.users == 1);
  CHECK(s.items == 4);
  CHECK(s.actions == 4);
  CHECK(s.avg_length == 4.0);
  CHECK(s.sparsity_percent() == "0.00%");
  DatasetStats ml{6040, 3953, 1000209, 165.6, 1.0 - 1000209.0 / (6040.0 * 3953.0)};
  CHECK(ml.sparsity_percent() == "95.81%");
  CHECK(ml.to_json().find("\"sparsity\": \"95.81%\"") != std::string::npos);
}

TEST_CASE("container round trip is exact") {
  const auto data = synth_generate({.users = 30, .items = 300, .seed = 11});
  std::stringstream buf;
  write_dataset(data, buf);
  const auto bytes = buf.str();
  CHECK(bytes.substr(0, 4) == "DFRC");
  CHECK(read_dataset(buf) == data);

  const auto path = std::filesystem::temp_directory_path() / "seqdiff-test-roundtrip.dfrc";
  save_dataset(data, path);
  CHECK(load_dataset(path) == data);
  std::filesystem::remove(path);

  std::istringstream bad("XXXX" + bytes.substr(4));
  CHECK_THROWS(read_dataset(bad));
  std::istringstream cut(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS(read_dataset(cut));
}
