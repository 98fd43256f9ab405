#include "seqdiff/commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "seqdiff/evaluate.hpp"
#include "seqdiff/inference.hpp"
#include "seqdiff/sequence.hpp"
#include "seqdiff/trainer.hpp"

namespace seqdiff {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  out.flush();
  if (!out) throw CommandError("io", "cannot write '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CommandError("io", "cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool is_container(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[4] = {};
  in.read(magic, 4);
  return in && std::string(magic, 4) == "DFRC";
}

std::string checkpoint_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch-%04d.dfkp", epoch);
  return buf;
}

std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Keys that may differ between a checkpoint and the run resuming from it.
bool resumable_from(RunConfig stored, RunConfig requested) {
  stored.epochs = requested.epochs = 0;
  stored.output_dir = requested.output_dir = "";
  return stored == requested;
}

TrainingState load_state(const fs::path& path) {
  if (!fs::exists(path)) throw CommandError("checkpoint", "checkpoint '" + path.string() + "' not found");
  try {
    return load_checkpoint(path);
  } catch (const std::exception& e) {
    throw CommandError("checkpoint", e.what());
  }
}

}  // namespace

int exit_code_for(const std::string& code) {
  static const std::map<std::string, int> codes = {{"usage", 2}, {"config", 3}, {"io", 4}, {"data", 5}, {"checkpoint", 6}};
  const auto it = codes.find(code);
  return it == codes.end() ? 1 : it->second;
}

InteractionDataset load_run_dataset(const RunConfig& config) {
  if (config.data_path.empty()) throw CommandError("config", "data.path is not set");
  const fs::path path = config.data_path;
  if (!fs::exists(path)) throw CommandError("io", "dataset '" + path.string() + "' not found");
  try {
    if (is_container(path)) return load_dataset(path);
    const auto ingested = ingest(path, parse_input_format(config.data_format));
    return build_dataset(kcore_filter(ingested.records, config.kcore, config.kcore_iterative));
  } catch (const CommandError&) {
    throw;
  } catch (const std::exception& e) {
    throw CommandError("data", e.what());
  }
}

PreprocessResult cmd_preprocess(const PreprocessOptions& options, std::ostream* log) {
  if (!fs::exists(options.input)) throw CommandError("io", "input '" + options.input.string() + "' not found");
  if (options.k < 1) throw CommandError("config", "k must be at least 1");
  IngestResult ingested;
  InputFormat format;
  try {
    format = parse_input_format(options.format);
  } catch (const std::exception& e) {
    throw CommandError("config", e.what());
  }
  try {
    ingested = ingest(options.input, format);
  } catch (const std::exception& e) {
    throw CommandError("io", e.what());
  }
  if (log)
    for (const auto& w : ingested.warnings) *log << "warning: " << w << "\n";
  const auto data = build_dataset(kcore_filter(ingested.records, options.k, options.iterative));
  PreprocessResult result{dataset_stats(data), ingested.malformed};
  try {
    if (options.output.has_parent_path()) fs::create_directories(options.output.parent_path());
    save_dataset(data, options.output);
  } catch (const std::exception& e) {
    throw CommandError("io", e.what());
  }
  auto sidecar = options.output;
  sidecar += ".stats.json";
  write_text(sidecar, result.stats.to_json() + "\n");
  if (log) {
    *log << "#users " << result.stats.users << "\n"
         << "#items " << result.stats.items << "\n"
         << "#actions " << result.stats.actions << "\n"
         << "avg.length " << format_metric(result.stats.avg_length) << "\n"
         << "sparsity " << result.stats.sparsity_percent() << "\n";
    if (result.malformed) *log << "skipped " << result.malformed << " malformed lines\n";
  }
  return result;
}

TrainResult cmd_train(const RunConfig& config, const TrainRunOptions& options, std::ostream* log) {
  try {
    config.validate();
  } catch (const std::exception& e) {
    throw CommandError("config", e.what());
  }
  const auto data = load_run_dataset(config);
  const auto rows = training_rows(data, config.model.max_length);
  if (rows.empty()) throw CommandError("data", "dataset has no user with enough interactions to train");

  const fs::path out_dir = config.output_dir;
  const fs::path ckpt_dir = out_dir / "checkpoints";
  const fs::path metrics_path = out_dir / "metrics.csv";
  const std::string header = "epoch,mean_mse,mean_rec,valid_ndcg10\n";
  try {
    fs::create_directories(ckpt_dir);
  } catch (const std::exception& e) {
    throw CommandError("io", e.what());
  }

  TrainResult result{TrainingState::initial(config, data.vocab_size()), {}, {}};
  auto& state = result.state;
  std::string metrics = header;
  if (options.resume) {
    state = load_state(*options.resume);
    if (!resumable_from(state.config, config))
      throw CommandError("config", "configuration differs from the checkpoint being resumed");
    if (state.params.vocab_size() != data.vocab_size())
      throw CommandError("data", "checkpoint vocabulary does not match the dataset");
    state.config = config;
    state.adam.hyper.lr = config.lr;
    // keep the rows of epochs the checkpoint already covers
    if (fs::exists(metrics_path)) {
      std::istringstream in(read_text(metrics_path));
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line))
        if (!line.empty() && std::stoi(line.substr(0, line.find(','))) <= state.epoch) metrics += line + "\n";
    }
    if (state.best_epoch >= 1) result.best_checkpoint = ckpt_dir / checkpoint_name(state.best_epoch);
  } else {
    result.last_checkpoint = ckpt_dir / checkpoint_name(0);
    save_checkpoint(state, result.last_checkpoint);
  }
  write_text(out_dir / "config.txt", config.to_text());
  write_text(metrics_path, metrics);

  const auto schedule = make_schedule(config.model.schedule, config.model.steps);
  const auto train_options = config.train_options();
  const auto valid_inference = config.validation_inference();
  const EvalOptions eval_options{config.exclude_seen, false};
  const int last_epoch = options.stop_after ? std::min(config.epochs, *options.stop_after) : config.epochs;

  for (int epoch = state.epoch + 1; epoch <= last_epoch; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const auto stats = train_epoch<float>(rows, state.params, state.adam, state.sampler, schedule, config.model,
                                          train_options, state.streams);
    const auto trained = std::chrono::steady_clock::now();
    const auto report =
        evaluate_model<float>(data, Split::Valid, state.params, schedule, config.model, valid_inference, eval_options);
    const double ndcg = report.ndcg_at(10);
    state.epoch = epoch;
    if (ndcg > state.best_ndcg) {
      state.best_ndcg = ndcg;
      state.best_epoch = epoch;
    }
    result.last_checkpoint = ckpt_dir / checkpoint_name(epoch);
    save_checkpoint(state, result.last_checkpoint);
    if (state.best_epoch == epoch) {
      result.best_checkpoint = result.last_checkpoint;
      write_text(out_dir / "best", checkpoint_name(epoch) + "\n");
    }
    metrics += std::to_string(epoch) + "," + format_metric(stats.mean_mse) + "," + format_metric(stats.mean_rec) + "," +
               format_metric(ndcg) + "\n";
    write_text(metrics_path, metrics);
    if (log) {
      const auto seconds = [](auto a, auto b) { return std::chrono::duration<double>(b - a).count(); };
      *log << "epoch " << epoch << " mse " << format_metric(stats.mean_mse) << " rec " << format_metric(stats.mean_rec)
           << " valid NDCG@10 " << format_metric(ndcg) << " (train " << format_metric(seconds(started, trained))
           << "s, valid " << format_metric(seconds(trained, std::chrono::steady_clock::now())) << "s)\n";
    }
  }
  return result;
}

fs::path best_checkpoint(const fs::path& run_dir) {
  const auto marker = run_dir / "best";
  if (!fs::exists(marker)) throw CommandError("checkpoint", "no best marker in '" + run_dir.string() + "'");
  std::string name = read_text(marker);
  while (!name.empty() && (name.back() == '\n' || name.back() == '\r')) name.pop_back();
  return run_dir / "checkpoints" / name;
}

void write_report(const MetricsReport& report, const fs::path& dir, const std::string& stem) {
  write_text(dir / (stem + ".csv"), report.csv_header() + "\n" + report.csv_row() + "\n");
  write_text(dir / (stem + ".json"), report.to_json() + "\n");
}

MetricsReport cmd_evaluate(const RunConfig& config, const EvaluateOptions& options, std::ostream* log) {
  const auto state = load_state(options.checkpoint);
  InferenceConfig inference;
  try {
    config.validate();
    inference = config.inference_config();
  } catch (const std::exception& e) {
    throw CommandError("config", e.what());
  }
  const auto data = load_run_dataset(config);
  if (state.params.vocab_size() != data.vocab_size())
    throw CommandError("data", "checkpoint vocabulary does not match the dataset");
  const auto& model = state.config.model;
  const auto schedule = make_schedule(model.schedule, model.steps);
  MetricsReport report;
  try {
    report = evaluate_model<float>(data, options.split, state.params, schedule, model, inference,
                                   EvalOptions{config.exclude_seen, false});
  } catch (const std::invalid_argument& e) {
    throw CommandError("data", e.what());
  }
  if (options.output_dir) write_report(report, *options.output_dir, "eval-" + to_string(options.split));
  if (log) *log << report.csv_header() << "\n" << report.csv_row() << "\n";
  return report;
}

std::vector<Recommendation> cmd_infer(const RunConfig& config, const InferOptions& options, std::ostream* log) {
  const auto state = load_state(options.checkpoint);
  InferenceConfig inference;
  try {
    config.validate();
    inference = config.inference_config();
  } catch (const std::exception& e) {
    throw CommandError("config", e.what());
  }
  const auto data = load_run_dataset(config);
  if (state.params.vocab_size() != data.vocab_size())
    throw CommandError("data", "checkpoint vocabulary does not match the dataset");

  std::vector<int> history;
  std::uint64_t key = 0;
  if (options.user) {
    std::size_t u = 0;
    while (u < data.users.size() && data.users[u] != *options.user) ++u;
    if (u == data.users.size()) throw CommandError("data", "unknown user '" + *options.user + "'");
    history = data.sequences[u];
    key = u;
  } else {
    std::map<std::string, int> ids;
    for (int id = 2; id < data.vocab_size(); ++id) ids.emplace(data.items[static_cast<std::size_t>(id)], id);
    for (const auto& item : options.items) {
      const auto it = ids.find(item);
      if (it == ids.end()) {
        if (log) *log << "warning: unknown item '" << item << "' skipped\n";
        continue;
      }
      history.push_back(it->second);
    }
  }
  if (history.empty()) throw CommandError("data", "empty history");

  const auto& model = state.config.model;
  const auto schedule = make_schedule(model.schedule, model.steps);
  const InferenceRequest request{prepare_inference_sequence(history, model.max_length), key};
  const auto prediction =
      infer_batch<float>(std::span<const InferenceRequest>(&request, 1), state.params, schedule, model, inference).front();
  std::unordered_set<int> excluded;
  if (options.exclude_seen) excluded.insert(history.begin(), history.end());
  std::vector<int> ranked;
  try {
    ranked = rank_items(prediction.probabilities, options.top_k, excluded);
  } catch (const std::invalid_argument& e) {
    throw CommandError("usage", e.what());
  }
  std::vector<Recommendation> out;
  for (int id : ranked) out.push_back({id, data.items[static_cast<std::size_t>(id)], prediction.probabilities(id)});
  return out;
}

void cmd_inspect_schedule(ScheduleKind kind, int steps, std::ostream& out) {
  if (steps < 2) throw CommandError("config", "diffusion.steps must be at least 2");
  const auto s = make_schedule(kind, steps);
  out << "n,beta,alpha_bar,beta_tilde\n";
  char buf[128];
  for (int n = 0; n <= steps; ++n) {
    const double beta = n == 0 ? 0.0 : s.beta(n);
    const double tilde = n == 0 ? 0.0 : s.beta_tilde(n);
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", n, beta, s.alpha_bar(n), tilde);
    out << buf;
  }
}

DatasetStats cmd_synth_data(const SynthDataOptions& options, std::ostream* log) {
  if (options.synth.users < 1 || options.synth.items < 2 || options.synth.min_length < 1 ||
      options.synth.max_length < options.synth.min_length)
    throw CommandError("config", "invalid synthetic data options");
  const auto records = synth_records(options.synth);
  const auto data = build_dataset(records);
  if (options.raw_csv) {
    std::string text;
    for (const auto& r : records) text += r.user + "," + r.item + "," + std::to_string(r.timestamp) + "\n";
    write_text(options.output, text);
  } else {
    try {
      if (options.output.has_parent_path()) fs::create_directories(options.output.parent_path());
      save_dataset(data, options.output);
    } catch (const std::exception& e) {
      throw CommandError("io", e.what());
    }
  }
  const auto stats = dataset_stats(data);
  if (log) *log << stats.to_json() << "\n";
  return stats;
}

MetricsReport cmd_baseline_pop(const RunConfig& config, Split split, const std::optional<fs::path>& output_dir,
                               std::ostream* log) {
  const auto data = load_run_dataset(config);
  MetricsReport report;
  try {
    report = evaluate_popularity(data, split, EvalOptions{config.exclude_seen, false});
  } catch (const std::invalid_argument& e) {
    throw CommandError("data", e.what());
  }
  if (output_dir) write_report(report, *output_dir, "pop-" + to_string(split));
  if (log) *log << report.csv_header() << "\n" << report.csv_row() << "\n";
  return report;
}

}  // namespace seqdiff
