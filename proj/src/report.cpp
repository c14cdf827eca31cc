#include "tide/report.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <stdexcept>

namespace tide {

std::string histogram_key(int layer) {
  return layer == kNoExit ? "final" : "L" + std::to_string(layer);
}

ordered_json to_json(const ExitReport& report, bool include_per_token) {
  ordered_json j;
  j["tokens_total"] = report.tokens_total();
  j["exited"] = report.exited();
  j["exit_rate"] = report.exit_rate();
  ordered_json hist = ordered_json::object();
  // Checkpoints ascending, then the no-exit bucket.
  for (const auto& [layer, count] : report.histogram) {
    if (layer != kNoExit) hist[histogram_key(layer)] = count;
  }
  if (auto it = report.histogram.find(kNoExit); it != report.histogram.end()) {
    hist["final"] = it->second;
  }
  j["histogram"] = hist;
  if (report.unique_output_tokens) j["unique_output_tokens"] = *report.unique_output_tokens;
  if (include_per_token) j["exit_layers"] = report.exit_layers;
  return j;
}

ordered_json to_json(const ModelConfig& c) {
  return ordered_json{{"num_layers", c.num_layers}, {"hidden_dim", c.hidden_dim},
                      {"num_heads", c.num_heads},   {"ffn_dim", c.ffn_dim},
                      {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
                      {"seed", c.seed}};
}

ordered_json to_json(const CalibrationConfig& c) {
  return ordered_json{{"interval", c.checkpoint_interval},
                      {"tau", c.tau},
                      {"bottleneck", c.bottleneck},
                      {"learning_rate", c.learning_rate},
                      {"epochs", c.epochs},
                      {"batch_size", c.batch_size},
                      {"adam_beta1", c.adam_beta1},
                      {"adam_beta2", c.adam_beta2},
                      {"adam_eps", c.adam_eps},
                      {"seed", c.seed},
                      {"include_final_layer", c.include_final_layer}};
}

ordered_json to_json(const RuntimeConfig& c) {
  return ordered_json{{"theta", c.theta},
                      {"k_min", c.k_min},
                      {"mode", to_string(c.mode)},
                      {"max_new_tokens", c.max_new_tokens},
                      {"temperature", c.temperature},
                      {"seed", c.seed}};
}

ordered_json to_json(const RouterStats& s) {
  return ordered_json{{"layer", s.layer},
                      {"final_loss", s.final_loss},
                      {"accuracy", s.accuracy},
                      {"positives", s.positives},
                      {"examples", s.examples},
                      {"single_class", s.single_class}};
}

ordered_json bank_summary(const RouterBank& bank) {
  ordered_json j;
  j["hidden_dim"] = bank.hidden_dim;
  j["bottleneck"] = bank.bottleneck;
  j["interval"] = bank.interval;
  j["tau"] = bank.tau;
  j["rmsnorm_eps"] = bank.eps;
  j["num_layers"] = bank.num_layers;
  j["includes_final_layer"] = bank.includes_final_layer;
  char digest[17];
  std::snprintf(digest, sizeof digest, "%016llx",
                static_cast<unsigned long long>(bank.model_digest));
  j["model_digest"] = digest;
  j["checkpoint_layers"] = bank.layers();
  j["parameters_per_router"] = bank.routers.empty() ? 0 : bank.routers.front().parameter_count();
  ordered_json routers = ordered_json::array();
  for (const auto& s : bank.stats) routers.push_back(to_json(s));
  j["routers"] = routers;
  return j;
}

ordered_json report_skeleton(const std::string& kind) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm utc{};
  gmtime_r(&now, &utc);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &utc);
  ordered_json j;
  j["generated_at"] = stamp;
  j["report"] = kind;
  return j;
}

void write_json(const ordered_json& doc, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  out << doc.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
}

}  // namespace tide
