#include "seqdiff/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace seqdiff {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw std::invalid_argument("invalid value '" + value + "' for " + key);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T v{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (ec != std::errc() || ptr != end) bad_value(key, value);
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "off" || value == "no") return false;
  bad_value(key, value);
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string format_bool(bool v) { return v ? "true" : "false"; }

Activation parse_activation(const std::string& key, const std::string& value) {
  if (value == "gelu") return Activation::Gelu;
  if (value == "relu") return Activation::Relu;
  bad_value(key, value);
}

std::string format_activation(Activation a) { return a == Activation::Gelu ? "gelu" : "relu"; }

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SEQDIFF_INT_FIELD(key, member)                                                                         \
  {key, {[](RunConfig& c, const std::string& k, const std::string& v) { c.member = parse_number<int>(k, v); }, \
         [](const RunConfig& c) { return std::to_string(c.member); }}}
#define SEQDIFF_DOUBLE_FIELD(key, member)                                                                         \
  {key, {[](RunConfig& c, const std::string& k, const std::string& v) { c.member = parse_number<double>(k, v); }, \
         [](const RunConfig& c) { return format_double(c.member); }}}
#define SEQDIFF_BOOL_FIELD(key, member)                                                                 \
  {key, {[](RunConfig& c, const std::string& k, const std::string& v) { c.member = parse_bool(k, v); }, \
         [](const RunConfig& c) { return format_bool(c.member); }}}
#define SEQDIFF_STRING_FIELD(key, member)                                                    \
  {key, {[](RunConfig& c, const std::string&, const std::string& v) { c.member = v; }, \
         [](const RunConfig& c) { return c.member; }}}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      SEQDIFF_STRING_FIELD("data.path", data_path),
      SEQDIFF_STRING_FIELD("data.format", data_format),
      SEQDIFF_INT_FIELD("data.kcore", kcore),
      SEQDIFF_BOOL_FIELD("data.kcore_iterative", kcore_iterative),
      SEQDIFF_INT_FIELD("model.width", model.width),
      SEQDIFF_INT_FIELD("model.max_length", model.max_length),
      SEQDIFF_INT_FIELD("model.layers", model.layers),
      SEQDIFF_INT_FIELD("model.heads", model.heads),
      SEQDIFF_DOUBLE_FIELD("model.dropout", model.dropout),
      SEQDIFF_BOOL_FIELD("model.use_position_embedding", model.use_position_embedding),
      SEQDIFF_BOOL_FIELD("model.use_step_embedding", model.use_step_embedding),
      SEQDIFF_INT_FIELD("model.noise_last_k", model.noise_last_k),
      SEQDIFF_BOOL_FIELD("model.causal", model.causal),
      SEQDIFF_DOUBLE_FIELD("model.layer_norm_eps", model.layer_norm_eps),
      SEQDIFF_DOUBLE_FIELD("model.embedding_init_std", model.embedding_init_std),
      {"model.activation",
       {[](RunConfig& c, const std::string& k, const std::string& v) { c.model.activation = parse_activation(k, v); },
        [](const RunConfig& c) { return format_activation(c.model.activation); }}},
      SEQDIFF_INT_FIELD("diffusion.steps", model.steps),
      {"diffusion.schedule",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          try {
            c.model.schedule = parse_schedule_kind(v);
          } catch (const std::invalid_argument&) {
            bad_value(k, v);
          }
        },
        [](const RunConfig& c) { return to_string(c.model.schedule); }}},
      SEQDIFF_INT_FIELD("train.epochs", epochs),
      SEQDIFF_INT_FIELD("train.batch_size", batch_size),
      SEQDIFF_DOUBLE_FIELD("train.lr", lr),
      SEQDIFF_DOUBLE_FIELD("train.clip_norm", clip_norm),
      SEQDIFF_BOOL_FIELD("train.per_batch_step_sampling", per_batch_step_sampling),
      SEQDIFF_BOOL_FIELD("train.rec_on_clean", rec_on_clean),
      SEQDIFF_INT_FIELD("train.sampler_history", sampler_history),
      SEQDIFF_INT_FIELD("train.valid_seed_count", valid_seed_count),
      SEQDIFF_STRING_FIELD("inference.mode", inference_mode),
      SEQDIFF_INT_FIELD("inference.seed_count", seed_count),
      {"inference.seeds",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          c.seeds.clear();
          std::stringstream ss(v);
          std::string item;
          while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) c.seeds.push_back(parse_number<std::uint64_t>(k, item));
          }
        },
        [](const RunConfig& c) {
          std::string s;
          for (std::size_t i = 0; i < c.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(c.seeds[i]);
          return s;
        }}},
      SEQDIFF_BOOL_FIELD("inference.exclude_seen", exclude_seen),
      {"seed",
       {[](RunConfig& c, const std::string& k, const std::string& v) { c.master_seed = parse_number<std::uint64_t>(k, v); },
        [](const RunConfig& c) { return std::to_string(c.master_seed); }}},
      SEQDIFF_STRING_FIELD("output_dir", output_dir),
  };
  return table;
}

#undef SEQDIFF_INT_FIELD
#undef SEQDIFF_DOUBLE_FIELD
#undef SEQDIFF_BOOL_FIELD
#undef SEQDIFF_STRING_FIELD

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw std::invalid_argument("unknown config key '" + key + "'");
  it->second.set(*this, key, trim(value));
}

std::string RunConfig::get(const std::string& key) const {
  const auto it = fields().find(key);
  if (it == fields().end()) throw std::invalid_argument("unknown config key '" + key + "'");
  return it->second.get(*this);
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, f] : fields()) out.push_back(k);
  return out;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(*this) + "\n";
  return out;
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig c;
  c.merge_text(text);
  return c;
}

void RunConfig::merge_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw std::invalid_argument("config line " + std::to_string(lineno) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    set(section.empty() ? key : section + "." + key, value);
  }
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

void RunConfig::validate() const {
  model.validate();
  if (model.steps < 2) throw std::invalid_argument("diffusion.steps must be at least 2");
  if (kcore < 1) throw std::invalid_argument("data.kcore must be at least 1");
  if (epochs < 0) throw std::invalid_argument("train.epochs must be non-negative");
  if (batch_size < 1) throw std::invalid_argument("train.batch_size must be positive");
  if (!(lr >= 0.0)) throw std::invalid_argument("train.lr must be non-negative");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("train.clip_norm must be positive");
  if (sampler_history < 1) throw std::invalid_argument("train.sampler_history must be positive");
  if (seed_count < 1 && seeds.empty()) throw std::invalid_argument("inference.seed_count must be positive");
  if (valid_seed_count < 1) throw std::invalid_argument("train.valid_seed_count must be positive");
  parse_inference_mode(inference_mode);
  parse_input_format(data_format);
}

TrainOptions RunConfig::train_options() const {
  TrainOptions o;
  o.batch_size = batch_size;
  o.clip_norm = clip_norm;
  o.per_batch_step_sampling = per_batch_step_sampling;
  o.rec_on_clean = rec_on_clean;
  return o;
}

InferenceConfig RunConfig::inference_config() const {
  InferenceConfig ic;
  ic.mode = parse_inference_mode(inference_mode);
  ic.seeds = seeds.empty() ? InferenceConfig::derive_seeds(master_seed, seed_count) : seeds;
  return ic;
}

InferenceConfig RunConfig::validation_inference() const {
  InferenceConfig ic;
  ic.mode = InferenceMode::Efficient;
  ic.seeds = InferenceConfig::derive_seeds(master_seed, valid_seed_count);
  return ic;
}

}  // namespace seqdiff
