// Command-line front end: one subcommand per pipeline stage.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "seqdiff/commands.hpp"

namespace fs = std::filesystem;
using namespace seqdiff;

namespace {

constexpr const char* kOutputDirEnv = "SEQDIFF_OUTPUT_DIR";

// Dotted config flags shared by the subcommands that take a RunConfig.
struct ConfigFlags {
  std::string file;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "key = value config file")->check(CLI::ExistingFile);
    for (const auto& key : RunConfig::keys()) app->add_option("--" + key, values[key], "config key " + key);
  }

  // Layers: base, then the config file, then the environment, then explicit flags.
  RunConfig build(RunConfig base, const CLI::App* app) const {
    try {
      if (!file.empty()) {
        std::ifstream in(file);
        std::stringstream ss;
        ss << in.rdbuf();
        base.merge_text(ss.str());
      }
      if (const char* dir = std::getenv(kOutputDirEnv); dir && *dir) base.output_dir = dir;
      for (const auto& [key, value] : values)
        if (app->count("--" + key) > 0) base.set(key, value);
    } catch (const std::invalid_argument& e) {
      throw CommandError("config", e.what());
    }
    return base;
  }
};

RunConfig checkpoint_config(const std::string& path) {
  if (!fs::exists(path)) throw CommandError("checkpoint", "checkpoint '" + path + "' not found");
  try {
    return load_checkpoint(path).config;
  } catch (const std::exception& e) {
    throw CommandError("checkpoint", e.what());
  }
}

Split split_arg(const std::string& tag) {
  try {
    return parse_split(tag);
  } catch (const std::exception& e) {
    throw CommandError("usage", e.what());
  }
}

std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-based sequential recommender"};
  app.require_subcommand(1);

  // preprocess
  PreprocessOptions pre;
  bool single_pass = false;
  auto* preprocess = app.add_subcommand("preprocess", "Filter a raw interaction log into a dataset container");
  preprocess->add_option("--input", pre.input, "raw interaction file")->required();
  preprocess->add_option("--format", pre.format, "csv, tsv or movielens")->capture_default_str();
  preprocess->add_option("--k", pre.k, "k-core threshold")->capture_default_str();
  preprocess->add_flag("--single-pass", single_pass, "apply the k-core rule once instead of to a fixed point");
  preprocess->add_option("--output", pre.output, "dataset container to write")->required();

  // train
  ConfigFlags train_flags;
  std::string resume;
  std::optional<int> stop_after;
  auto* train = app.add_subcommand("train", "Train a model; writes checkpoints and per-epoch metrics");
  train_flags.attach(train);
  train->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);
  train->add_option("--stop-after", stop_after, "stop after this epoch");

  // evaluate
  ConfigFlags eval_flags;
  std::string eval_ckpt, eval_split = "test", eval_out;
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on the valid or test split");
  eval_flags.attach(evaluate);
  evaluate->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  evaluate->add_option("--split", eval_split, "valid or test")->capture_default_str();
  evaluate->add_option("--out", eval_out, "directory for eval-<split>.csv/.json");

  // infer
  ConfigFlags infer_flags;
  InferOptions inf;
  std::string infer_ckpt, infer_user;
  auto* infer = app.add_subcommand("infer", "Recommend next items for a user or an explicit history");
  infer_flags.attach(infer);
  infer->add_option("--checkpoint", infer_ckpt, "checkpoint file")->required();
  auto* user_opt = infer->add_option("--user", infer_user, "user ID from the dataset");
  infer->add_option("--items", inf.items, "history as original item IDs, oldest first")->delimiter(',')->excludes(user_opt);
  infer->add_option("--top-k", inf.top_k, "number of recommendations")->capture_default_str();
  infer->add_flag("--exclude-seen", inf.exclude_seen, "never recommend history items");

  // inspect-schedule
  std::string kind = "sqrt", schedule_out;
  int steps = 1000;
  auto* inspect = app.add_subcommand("inspect-schedule", "Dump a noise schedule as CSV");
  inspect->add_option("--kind", kind, "sqrt, cosine or linear")->capture_default_str();
  inspect->add_option("--steps", steps, "number of diffusion steps")->capture_default_str();
  inspect->add_option("--output", schedule_out, "CSV file (stdout when omitted)");

  // synth-data
  SynthDataOptions synth;
  auto* synth_cmd = app.add_subcommand("synth-data", "Generate order-1 Markov interaction data");
  synth_cmd->add_option("--users", synth.synth.users)->capture_default_str();
  synth_cmd->add_option("--items", synth.synth.items)->capture_default_str();
  synth_cmd->add_option("--sharpness", synth.synth.sharpness, "log-odds boost of the successor item")->capture_default_str();
  synth_cmd->add_option("--min-length", synth.synth.min_length)->capture_default_str();
  synth_cmd->add_option("--max-length", synth.synth.max_length)->capture_default_str();
  synth_cmd->add_option("--seed", synth.synth.seed)->capture_default_str();
  synth_cmd->add_option("--output", synth.output, "dataset container (or CSV with --csv)")->required();
  synth_cmd->add_flag("--csv", synth.raw_csv, "write raw user,item,timestamp lines");

  // baseline-pop
  ConfigFlags pop_flags;
  std::string pop_split = "test", pop_out;
  auto* pop = app.add_subcommand("baseline-pop", "Evaluate the popularity baseline");
  pop_flags.attach(pop);
  pop->add_option("--split", pop_split, "valid or test")->capture_default_str();
  pop->add_option("--out", pop_out, "directory for pop-<split>.csv/.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << "\n";
    return exit_code_for("usage");
  }

  try {
    if (*preprocess) {
      pre.iterative = !single_pass;
      cmd_preprocess(pre, &std::cout);
    } else if (*train) {
      RunConfig base = resume.empty() ? RunConfig{} : checkpoint_config(resume);
      const auto config = train_flags.build(base, train);
      TrainRunOptions options;
      if (!resume.empty()) options.resume = resume;
      options.stop_after = stop_after;
      const auto result = cmd_train(config, options, &std::cout);
      std::cout << "last checkpoint " << result.last_checkpoint.string() << "\n";
      if (!result.best_checkpoint.empty()) std::cout << "best checkpoint " << result.best_checkpoint.string() << "\n";
    } else if (*evaluate) {
      const auto config = eval_flags.build(checkpoint_config(eval_ckpt), evaluate);
      EvaluateOptions options{eval_ckpt, split_arg(eval_split), {}};
      if (!eval_out.empty()) options.output_dir = eval_out;
      cmd_evaluate(config, options, &std::cout);
    } else if (*infer) {
      const auto config = infer_flags.build(checkpoint_config(infer_ckpt), infer);
      inf.checkpoint = infer_ckpt;
      if (!infer_user.empty()) inf.user = infer_user;
      if (!inf.user && inf.items.empty()) throw CommandError("usage", "give --user or --items");
      const auto recs = cmd_infer(config, inf, &std::cerr);
      std::cout << "rank,item,probability\n";
      for (std::size_t i = 0; i < recs.size(); ++i)
        std::cout << i + 1 << "," << recs[i].item << "," << recs[i].probability << "\n";
    } else if (*inspect) {
      ScheduleKind k;
      try {
        k = parse_schedule_kind(kind);
      } catch (const std::exception& e) {
        throw CommandError("usage", e.what());
      }
      if (schedule_out.empty()) {
        cmd_inspect_schedule(k, steps, std::cout);
      } else {
        std::ofstream out(schedule_out);
        if (!out) throw CommandError("io", "cannot write '" + schedule_out + "'");
        cmd_inspect_schedule(k, steps, out);
      }
    } else if (*synth_cmd) {
      cmd_synth_data(synth, &std::cout);
    } else if (*pop) {
      const auto config = pop_flags.build(RunConfig{}, pop);
      std::optional<fs::path> out;
      if (!pop_out.empty()) out = pop_out;
      cmd_baseline_pop(config, split_arg(pop_split), out, &std::cout);
    }
  } catch (const CommandError& e) {
    std::cerr << "error: " << e.code() << ": " << one_line(e.what()) << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
