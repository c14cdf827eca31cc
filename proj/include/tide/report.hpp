#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "tide/bank.hpp"
#include "tide/calibration.hpp"
#include "tide/model.hpp"
#include "tide/runtime.hpp"

namespace tide {

using ordered_json = nlohmann::ordered_json;

// Histogram keys are "L<layer>" for checkpoints and "final" for no exit.
std::string histogram_key(int layer);

ordered_json to_json(const ExitReport& report, bool include_per_token);
ordered_json to_json(const ModelConfig& config);
ordered_json to_json(const CalibrationConfig& config);
ordered_json to_json(const RuntimeConfig& config);
ordered_json to_json(const RouterStats& stats);

/// Bank metadata and per-router statistics, as printed by `inspect`.
ordered_json bank_summary(const RouterBank& bank);

/// Starts a report whose first key is the timestamp, so the pretty-printed
/// file carries it on a single line directly after the opening brace.
ordered_json report_skeleton(const std::string& kind);

/// Pretty-printed with two-space indent and a trailing newline.
void write_json(const ordered_json& doc, const std::filesystem::path& path);

}  // namespace tide
