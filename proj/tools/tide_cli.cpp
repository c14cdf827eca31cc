// Command-line front end: calibrate, generate, sweep, probe, inspect, rig.
//
// Exit codes: 0 success, 1 runtime failure (bad files, corrupt banks),
// 2 usage or validation error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tide/adapter.hpp"
#include "tide/bank.hpp"
#include "tide/calibration.hpp"
#include "tide/corpus.hpp"
#include "tide/model.hpp"
#include "tide/report.hpp"
#include "tide/runtime.hpp"

namespace fs = std::filesystem;
using tide::ordered_json;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Everything needed to replay a run; echoed into every report.
struct RunConfig {
  std::string subcommand;
  std::string model_config_path;
  std::string routers_path;
  std::string corpus_path;
  std::string prompt;
  std::string prompts_path;
  std::string out_path;
  std::string report_path;
  std::string manifest_path;
  std::string thetas;
  std::size_t max_documents = 0;
  int rig_layer = -1;
  int threads = 1;
  tide::ModelConfig model;
  tide::CalibrationConfig calibration;
  tide::RuntimeConfig runtime;
  std::string mode = "per-token";
  bool exclude_final_layer = false;

  ordered_json to_json() const {
    ordered_json j;
    j["subcommand"] = subcommand;
    j["model_config"] = model_config_path;
    j["model"] = tide::to_json(model);
    if (subcommand == "calibrate") {
      j["corpus"] = corpus_path;
      j["max_documents"] = max_documents;
      j["calibration"] = tide::to_json(calibration);
      j["out"] = out_path;
    } else {
      j["routers"] = routers_path;
      j["runtime"] = tide::to_json(runtime);
      if (!prompt.empty()) j["prompt"] = prompt;
      if (!prompts_path.empty()) j["prompts"] = prompts_path;
      if (!thetas.empty()) j["thetas"] = thetas;
    }
    return j;
  }
};

std::uint64_t default_seed() {
  if (const char* env = std::getenv("TIDE_SEED"); env != nullptr && *env != '\0') {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw UsageError(std::string("TIDE_SEED is not an unsigned integer: ") + env);
    }
  }
  return 0;
}

CLI::Validator open_unit_interval(const std::string& name) {
  return CLI::Validator(
      [name](std::string& s) -> std::string {
        double v = 0;
        try {
          v = std::stod(s);
        } catch (const std::exception&) {
          return name + " must be a number";
        }
        if (!(v > 0.0 && v < 1.0)) return name + " must be in (0, 1), got " + s;
        return {};
      },
      "in (0, 1)");
}

CLI::Validator half_open_unit_interval(const std::string& name) {
  return CLI::Validator(
      [name](std::string& s) -> std::string {
        double v = 0;
        try {
          v = std::stod(s);
        } catch (const std::exception&) {
          return name + " must be a number";
        }
        if (!(v > 0.0 && v <= 1.0)) return name + " must be in (0, 1], got " + s;
        return {};
      },
      "in (0, 1]");
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A prompt argument naming an existing file is read from that file.
std::string resolve_prompt(const std::string& arg) {
  std::error_code ec;
  if (fs::is_regular_file(arg, ec)) return read_text_file(arg);
  return arg;
}

std::vector<float> parse_thetas(const std::string& list) {
  std::vector<float> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    float v = 0;
    try {
      v = std::stof(item);
    } catch (const std::exception&) {
      throw UsageError("bad theta '" + item + "'");
    }
    if (!(v > 0.0f && v <= 1.0f)) throw UsageError("theta must be in (0, 1], got " + item);
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("--thetas needs at least one value");
  return out;
}

void emit(const ordered_json& doc, const std::string& path) {
  if (path.empty()) {
    std::cout << doc.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
  } else {
    tide::write_json(doc, path);
  }
}

// ---------------------------------------------------------------- commands

int cmd_calibrate(RunConfig& run) {
  run.calibration.threads = run.threads;
  run.calibration.include_final_layer = !run.exclude_final_layer;
  run.calibration.validate();
  const tide::ReferenceModel model(run.model);
  auto corpus = tide::load_corpus(run.corpus_path);
  if (run.max_documents > 0 && corpus.size() > run.max_documents) corpus.resize(run.max_documents);
  if (corpus.empty()) throw std::runtime_error("corpus " + run.corpus_path + " has no documents");

  const tide::RouterBank bank = tide::calibrate(model, corpus, run.calibration);
  tide::save_bank(bank, run.out_path);

  std::cout << "calibrated " << bank.routers.size() << " routers on " << corpus.size()
            << " documents (" << (bank.stats.empty() ? 0 : bank.stats.front().examples)
            << " tokens), d=" << bank.hidden_dim << " b=" << bank.bottleneck
            << " tau=" << bank.tau << '\n';
  for (const auto& s : bank.stats) {
    std::cout << "  L" << s.layer << ": positives " << s.positives << "/" << s.examples
              << "  loss " << s.final_loss << "  accuracy " << s.accuracy
              << (s.single_class ? "  (warning: single-class labels)" : "") << '\n';
  }
  std::cout << "wrote " << run.out_path << " (" << fs::file_size(run.out_path) << " bytes)\n";

  if (!run.report_path.empty()) {
    ordered_json doc = tide::report_skeleton("calibrate");
    doc["run_config"] = run.to_json();
    doc["corpus_documents"] = corpus.size();
    doc["bank"] = tide::bank_summary(bank);
    tide::write_json(doc, run.report_path);
  }
  return 0;
}

std::optional<tide::RouterBank> load_optional_bank(const RunConfig& run) {
  if (run.routers_path.empty()) return std::nullopt;
  return tide::load_bank(run.routers_path);
}

int cmd_generate(RunConfig& run) {
  run.runtime.mode = tide::exit_mode_from_string(run.mode);
  run.runtime.validate();
  const tide::ReferenceModel model(run.model);
  const auto bank = load_optional_bank(run);
  const std::string prompt_text = resolve_prompt(run.prompt);
  const auto prompt = tide::tokenize_bytes(prompt_text);
  if (prompt.empty()) throw UsageError("prompt is empty");
  if (prompt.size() + run.runtime.max_new_tokens > static_cast<std::size_t>(run.model.max_seq_len)) {
    throw UsageError("prompt (" + std::to_string(prompt.size()) + " tokens) plus --max-tokens " +
                     std::to_string(run.runtime.max_new_tokens) + " exceeds max_seq_len " +
                     std::to_string(run.model.max_seq_len));
  }

  const auto result = tide::generate(model, bank ? &*bank : nullptr, prompt, run.runtime);

  ordered_json doc = tide::report_skeleton("generate");
  doc["run_config"] = run.to_json();
  doc["theta"] = run.runtime.theta;
  doc["mode"] = tide::to_string(run.runtime.mode);
  doc["routers_enabled"] = bank.has_value();
  doc["prompt_tokens"] = prompt.size();
  doc["output_tokens"] = result.output_tokens;
  doc["output_text"] = tide::detokenize_bytes(result.output_tokens);
  ordered_json pre = tide::to_json(result.prefill, true);
  pre["logits"] = "per-token-recomputed";
  doc["prefill"] = pre;
  doc["decode"] = tide::to_json(result.decode, true);
  doc["kv_cache_length"] = result.cache.length();

  if (run.report_path.empty()) {
    std::cout << doc.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
  } else {
    tide::write_json(doc, run.report_path);
    std::cout << "theta=" << run.runtime.theta << " prefill exit_rate="
              << result.prefill.exit_rate() << " decode exit_rate=" << result.decode.exit_rate()
              << " unique_output_tokens=" << result.decode.unique_output_tokens.value_or(0)
              << '\n';
  }
  return 0;
}

int cmd_sweep(RunConfig& run) {
  run.runtime.mode = tide::exit_mode_from_string(run.mode);
  const auto thetas = parse_thetas(run.thetas);
  const tide::ReferenceModel model(run.model);
  const tide::RouterBank bank = tide::load_bank(run.routers_path);

  std::vector<std::vector<int>> prompts;
  if (!run.prompts_path.empty()) {
    for (const auto& doc : tide::load_corpus(run.prompts_path)) {
      prompts.push_back(tide::tokenize_bytes(doc));
    }
  }
  if (!run.prompt.empty()) prompts.push_back(tide::tokenize_bytes(resolve_prompt(run.prompt)));
  if (prompts.empty()) throw UsageError("sweep needs --prompt or --prompts");

  const auto rows = tide::sweep_thresholds(model, bank, prompts, thetas, run.runtime);
  ordered_json doc = tide::report_skeleton("sweep");
  doc["run_config"] = run.to_json();
  doc["prompts"] = prompts.size();
  ordered_json table = ordered_json::array();
  for (const auto& row : rows) {
    ordered_json r;
    r["theta"] = row.theta;
    r.update(tide::to_json(row.report, false));
    table.push_back(r);
    std::cout << "theta=" << row.theta << " tokens=" << row.report.tokens_total()
              << " exit_rate=" << row.report.exit_rate() << " histogram:";
    for (const auto& [layer, count] : row.report.histogram) {
      std::cout << ' ' << tide::histogram_key(layer) << ':' << count;
    }
    std::cout << '\n';
  }
  doc["rows"] = table;
  if (!run.report_path.empty()) tide::write_json(doc, run.report_path);
  return 0;
}

int cmd_probe(RunConfig& run) {
  const auto manifest = tide::ModelManifest::load(run.manifest_path);
  std::cout << tide::probe(manifest).to_text();
  return 0;
}

int cmd_inspect(RunConfig& run) {
  const tide::RouterBank bank = tide::load_bank(run.routers_path);
  ordered_json doc = tide::bank_summary(bank);
  doc["file_bytes"] = fs::file_size(run.routers_path);
  emit(doc, run.report_path);
  return 0;
}

int cmd_rig(RunConfig& run) {
  const tide::RouterBank bank =
      tide::make_rigged_bank(run.model, run.calibration.checkpoint_interval, run.rig_layer,
                             run.calibration.seed, !run.exclude_final_layer);
  tide::save_bank(bank, run.out_path);
  std::cout << "wrote rigged bank exiting at L" << run.rig_layer << " to " << run.out_path << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Early-exit inference runtime: router calibration, post-hoc exit generation, "
               "threshold sweeps and model-structure probing."};
  app.require_subcommand(1);
  RunConfig run;
  std::uint64_t seed = 0;
  try {
    seed = default_seed();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  run.calibration.seed = seed;
  run.runtime.seed = seed;

  auto add_model = [&](CLI::App* cmd) {
    cmd->add_option("--model-config", run.model_config_path, "Model config (key=value file)")
        ->required()
        ->check(CLI::ExistingFile);
  };
  auto add_runtime = [&](CLI::App* cmd) {
    cmd->add_option("--k-min", run.runtime.k_min, "Never exit below this layer")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--mode", run.mode, "Prefill exit accounting")
        ->check(CLI::IsMember({"per-token", "batch-unanimous"}));
    cmd->add_option("--report", run.report_path, "Write the JSON report here");
  };

  auto* calibrate = app.add_subcommand("calibrate", "Train convergence routers on a corpus");
  add_model(calibrate);
  calibrate->add_option("--corpus", run.corpus_path, "Text file (one document per line) or directory")
      ->required()
      ->check(CLI::ExistingPath);
  calibrate->add_option("--interval", run.calibration.checkpoint_interval, "Checkpoint interval c")
      ->check(CLI::PositiveNumber);
  calibrate->add_option("--tau", run.calibration.tau, "Convergence threshold")
      ->check(open_unit_interval("tau"));
  calibrate->add_option("--epochs", run.calibration.epochs)->check(CLI::PositiveNumber);
  calibrate->add_option("--lr", run.calibration.learning_rate)->check(CLI::PositiveNumber);
  calibrate->add_option("--batch-size", run.calibration.batch_size)->check(CLI::PositiveNumber);
  calibrate->add_option("--bottleneck", run.calibration.bottleneck, "0 = min(128, d/2)")
      ->check(CLI::NonNegativeNumber);
  calibrate->add_option("--seed", run.calibration.seed, "Overrides TIDE_SEED");
  calibrate->add_option("--max-documents", run.max_documents, "Use at most this many documents");
  calibrate->add_flag("--exclude-final-layer", run.exclude_final_layer,
                      "Do not place a router on layer L-1");
  calibrate->add_option("--threads", run.threads)->check(CLI::PositiveNumber);
  calibrate->add_option("--out", run.out_path, "Router bank output")->required();
  calibrate->add_option("--report", run.report_path, "Write a JSON summary here");

  auto* generate = app.add_subcommand("generate", "Greedy generation with post-hoc exits");
  add_model(generate);
  generate->add_option("--routers", run.routers_path, "Router bank; omit for the baseline model")
      ->check(CLI::ExistingFile);
  generate->add_option("--prompt", run.prompt, "Prompt text, or a file to read it from")
      ->required();
  generate->add_option("--theta", run.runtime.theta, "Exit threshold (1.0 disables exits)")
      ->check(half_open_unit_interval("theta"));
  generate->add_option("--max-tokens", run.runtime.max_new_tokens)->check(CLI::PositiveNumber);
  generate->add_option("--temperature", run.runtime.temperature)->check(CLI::NonNegativeNumber);
  generate->add_option("--seed", run.runtime.seed, "Sampling seed; overrides TIDE_SEED");
  add_runtime(generate);

  auto* sweep = app.add_subcommand("sweep", "Prefill exit rates across thresholds");
  add_model(sweep);
  sweep->add_option("--routers", run.routers_path)->required()->check(CLI::ExistingFile);
  sweep->add_option("--thetas", run.thetas, "Comma-separated thresholds")
      ->default_val("1.0,0.85,0.7,0.5");
  sweep->add_option("--prompts", run.prompts_path, "One prompt per line")->check(CLI::ExistingFile);
  sweep->add_option("--prompt", run.prompt, "Single prompt text or file");
  add_runtime(sweep);

  auto* probe = app.add_subcommand("probe", "Resolve model components from a structure manifest");
  probe->add_option("--manifest", run.manifest_path)->required()->check(CLI::ExistingFile);

  auto* inspect = app.add_subcommand("inspect", "Print router bank metadata and training stats");
  inspect->add_option("--routers", run.routers_path)->required()->check(CLI::ExistingFile);
  inspect->add_option("--report", run.report_path, "Write JSON here instead of stdout");

  auto* rig = app.add_subcommand("rig", "Write a rigged bank that always exits at one layer");
  add_model(rig);
  rig->add_option("--layer", run.rig_layer, "Checkpoint layer that always exits")->required();
  rig->add_option("--interval", run.calibration.checkpoint_interval)->check(CLI::PositiveNumber);
  rig->add_option("--seed", run.calibration.seed);
  rig->add_flag("--exclude-final-layer", run.exclude_final_layer);
  rig->add_option("--out", run.out_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    run.subcommand = app.get_subcommands().front()->get_name();
    if (!run.model_config_path.empty()) run.model = tide::load_model_config(run.model_config_path);
    if (run.subcommand == "calibrate") return cmd_calibrate(run);
    if (run.subcommand == "generate") return cmd_generate(run);
    if (run.subcommand == "sweep") return cmd_sweep(run);
    if (run.subcommand == "probe") return cmd_probe(run);
    if (run.subcommand == "inspect") return cmd_inspect(run);
    if (run.subcommand == "rig") return cmd_rig(run);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const tide::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
