#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tide/format.hpp"
#include "tide/router_ops.hpp"

namespace tide {

struct RouterStats {
  int layer = 0;
  float final_loss = 0.0f;
  float accuracy = 0.0f;
  std::uint64_t positives = 0;
  std::uint64_t examples = 0;
  bool single_class = false;  // every label identical; recorded as a warning

  bool operator==(const RouterStats&) const = default;
};

/// Trained routers keyed by checkpoint layer, with calibration metadata.
struct RouterBank {
  std::uint32_t hidden_dim = 0;
  std::uint32_t bottleneck = 0;
  std::uint32_t interval = 0;
  float tau = 0.0f;
  float eps = 0.0f;
  std::uint32_t num_layers = 0;
  bool includes_final_layer = true;
  std::uint64_t model_digest = 0;
  std::vector<Router> routers;     // ascending by layer
  std::vector<RouterStats> stats;  // parallel to routers

  std::vector<int> layers() const;
  const Router* router_at(int layer) const;

  // Throws FormatError(DimensionMismatch) if routers disagree with the metadata.
  void validate() const;

  bool operator==(const RouterBank& other) const;
};

inline constexpr std::uint32_t kBankVersion = 1;

/// Exact byte size of a serialized bank.
std::size_t bank_file_size(std::size_t hidden_dim, std::size_t bottleneck,
                           std::size_t n_checkpoints);

std::vector<unsigned char> serialize_bank(const RouterBank& bank);
RouterBank deserialize_bank(std::span<const unsigned char> bytes);

void save_bank(const RouterBank& bank, const std::filesystem::path& path);
RouterBank load_bank(const std::filesystem::path& path);

}  // namespace tide
