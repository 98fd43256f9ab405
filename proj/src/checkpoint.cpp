#include "seqdiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace seqdiff {

namespace {

constexpr char kMagic[4] = {'D', 'F', 'K', 'P'};
constexpr std::uint16_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  template <typename T>
  void pod(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void tensor(const Matrix<float>& m) {
    pod(static_cast<std::uint32_t>(m.rows()));
    pod(static_cast<std::uint32_t>(m.cols()));
    out_.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  template <typename T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in_) throw std::runtime_error("checkpoint truncated");
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (n > (1u << 28)) throw std::runtime_error("checkpoint string too long");
    std::string s(n, '\0');
    in_.read(s.data(), n);
    if (!in_) throw std::runtime_error("checkpoint truncated");
    return s;
  }
  Matrix<float> tensor() {
    const auto rows = pod<std::uint32_t>();
    const auto cols = pod<std::uint32_t>();
    if (static_cast<std::uint64_t>(rows) * cols > (1ull << 32)) throw std::runtime_error("checkpoint tensor too large");
    Matrix<float> m(rows, cols);
    in_.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
    if (!in_) throw std::runtime_error("checkpoint truncated");
    return m;
  }

 private:
  std::istream& in_;
};

std::vector<std::pair<std::string, RandomStream*>> named_streams(TrainStreams& s) {
  return {{"dropout", &s.dropout}, {"diffusion-noise", &s.noise}, {"step-sampler", &s.sampler}, {"shuffle", &s.shuffle}};
}

}  // namespace

TrainingState TrainingState::initial(const RunConfig& config, int vocab_size) {
  config.validate();
  TrainingState s{config,
                  init_params<float>(config.model, vocab_size, config.master_seed),
                  AdamState<float>{},
                  ImportanceSampler(config.model.steps, config.sampler_history),
                  TrainStreams::from_master(config.master_seed)};
  s.adam.hyper.lr = config.lr;
  return s;
}

bool operator==(const TrainingState& a, const TrainingState& b) {
  auto same_list = [](const std::vector<Matrix<float>>& x, const std::vector<Matrix<float>>& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i].rows() != y[i].rows() || x[i].cols() != y[i].cols() || x[i] != y[i]) return false;
    return true;
  };
  return a.config == b.config && a.params == b.params && a.adam.step == b.adam.step && same_list(a.adam.m, b.adam.m) &&
         same_list(a.adam.v, b.adam.v) && a.sampler == b.sampler && a.streams == b.streams && a.epoch == b.epoch &&
         a.best_ndcg == b.best_ndcg && a.best_epoch == b.best_epoch;
}

void write_checkpoint(const TrainingState& state, std::ostream& out) {
  Writer w(out);
  out.write(kMagic, 4);
  w.pod(kVersion);
  w.str(state.config.to_text());

  std::uint32_t count = 0;
  state.params.for_each([&](const std::string&, const Matrix<float>&) { ++count; });
  w.pod(count);
  state.params.for_each([&](const std::string& name, const Matrix<float>& m) {
    w.str(name);
    w.tensor(m);
  });

  w.pod(static_cast<std::int64_t>(state.adam.step));
  w.pod(static_cast<std::uint32_t>(state.adam.m.size()));
  for (std::size_t i = 0; i < state.adam.m.size(); ++i) {
    w.tensor(state.adam.m[i]);
    w.tensor(state.adam.v[i]);
  }

  const auto& sampler = state.sampler;
  w.pod(static_cast<std::uint32_t>(sampler.steps()));
  w.pod(static_cast<std::uint32_t>(sampler.history_depth()));
  for (int n = 1; n <= sampler.steps(); ++n) {
    const auto h = sampler.history(n);
    w.pod(static_cast<std::uint32_t>(h.size()));
    for (double v : h) w.pod(v);
  }

  w.pod(static_cast<std::int32_t>(state.epoch));
  w.pod(state.best_ndcg);
  w.pod(static_cast<std::int32_t>(state.best_epoch));

  auto streams = state.streams;
  const auto named = named_streams(streams);
  w.pod(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, rs] : named) {
    w.str(name);
    w.str(std::string(RandomStream::kAlgorithm));
    w.str(rs->state());
  }
  if (!out) throw std::runtime_error("checkpoint write failed");
}

TrainingState read_checkpoint(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("not a checkpoint (bad magic)");
  Reader r(in);
  const auto version = r.pod<std::uint16_t>();
  if (version != kVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));

  TrainingState s{RunConfig::from_text(r.str()), {}, {}, ImportanceSampler(2), {}};
  s.config.validate();
  s.adam.hyper.lr = s.config.lr;

  const auto count = r.pod<std::uint32_t>();
  s.params.layers.resize(static_cast<std::size_t>(s.config.model.layers));
  std::uint32_t expected = 0;
  s.params.for_each([&](const std::string&, Matrix<float>&) { ++expected; });
  if (count != expected) throw std::runtime_error("checkpoint tensor count does not match its config");
  s.params.for_each([&](const std::string& name, Matrix<float>& m) {
    const auto stored = r.str();
    if (stored != name) throw std::runtime_error("checkpoint tensor '" + stored + "' where '" + name + "' was expected");
    m = r.tensor();
  });
  const Index d = s.config.model.width;
  if (s.params.item_embedding.cols() != d || s.params.position_embedding.rows() != s.config.model.max_length)
    throw std::runtime_error("checkpoint tensor shapes do not match its config");

  s.adam.step = r.pod<std::int64_t>();
  const auto moments = r.pod<std::uint32_t>();
  if (moments != 0 && moments != count) throw std::runtime_error("checkpoint optimizer state does not match parameters");
  for (std::uint32_t i = 0; i < moments; ++i) {
    s.adam.m.push_back(r.tensor());
    s.adam.v.push_back(r.tensor());
  }

  const auto steps = static_cast<int>(r.pod<std::uint32_t>());
  const auto depth = static_cast<int>(r.pod<std::uint32_t>());
  if (steps != s.config.model.steps) throw std::runtime_error("checkpoint sampler does not match diffusion.steps");
  s.sampler = ImportanceSampler(steps, depth);
  for (int n = 1; n <= steps; ++n) {
    const auto k = r.pod<std::uint32_t>();
    if (k > static_cast<std::uint32_t>(depth)) throw std::runtime_error("checkpoint sampler history too deep");
    std::vector<double> h(k);
    for (auto& v : h) v = r.pod<double>();
    s.sampler.set_history(n, h);
  }

  s.epoch = r.pod<std::int32_t>();
  s.best_ndcg = r.pod<double>();
  s.best_epoch = r.pod<std::int32_t>();

  const auto named = named_streams(s.streams);
  const auto stored_streams = r.pod<std::uint32_t>();
  if (stored_streams != named.size()) throw std::runtime_error("checkpoint stream count mismatch");
  for (const auto& [name, rs] : named) {
    const auto stored = r.str();
    if (stored != name) throw std::runtime_error("checkpoint stream '" + stored + "' where '" + name + "' was expected");
    const auto algorithm = r.str();
    if (algorithm != RandomStream::kAlgorithm) throw std::runtime_error("checkpoint RNG algorithm '" + algorithm + "' unsupported");
    rs->set_state(r.str());
  }
  return s;
}

void save_checkpoint(const TrainingState& state, const std::filesystem::path& path) {
  // Write then rename so an interrupted save never leaves a torn checkpoint behind.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint '" + tmp.string() + "'");
    write_checkpoint(state, out);
    out.flush();
    if (!out) throw std::runtime_error("checkpoint write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

TrainingState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  return read_checkpoint(in);
}

}  // namespace seqdiff
