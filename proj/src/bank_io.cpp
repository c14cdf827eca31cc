// Router bank container, little-endian throughout:
//
//   "TIDE"  u32 version  u32 d  u32 b  u32 c  f32 tau  f32 eps  u32 L  u32 n
//   n × { u32 layer, f32 W_down[b×d] row-major, f32 W_up[b] }
//   u32 flags (bit 0: final layer may host a router)  u64 model-config digest
//   n × { f32 final_loss, f32 accuracy, u64 positives, u64 examples, u32 single_class }
//   u32 CRC32 of every preceding byte

#include "tide/bank.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

#include "binary_io.hpp"
#include "tide/calibration.hpp"

namespace tide {

namespace {

constexpr std::size_t kHeaderBytes = 36;
constexpr std::size_t kExtensionBytes = 12;
constexpr std::size_t kStatsBytes = 28;
constexpr std::uint32_t kFlagIncludesFinal = 1u;
// Larger values are rejected before any size arithmetic.
constexpr std::uint32_t kMaxDim = 1u << 20;

[[noreturn]] void mismatch(const std::string& msg) {
  throw FormatError(FormatErrorKind::DimensionMismatch, msg);
}

}  // namespace

std::vector<int> RouterBank::layers() const {
  std::vector<int> out;
  for (const auto& r : routers) out.push_back(r.layer);
  return out;
}

const Router* RouterBank::router_at(int layer) const {
  for (const auto& r : routers) {
    if (r.layer == layer) return &r;
  }
  return nullptr;
}

void RouterBank::validate() const {
  if (hidden_dim == 0 || bottleneck == 0 || hidden_dim > kMaxDim || bottleneck > kMaxDim) {
    mismatch("hidden_dim and bottleneck must be in [1, 2^20]");
  }
  if (interval == 0) mismatch("checkpoint interval must be >= 1");
  if (num_layers < 2) mismatch("num_layers must be >= 2");
  if (routers.size() != stats.size()) mismatch("router and stats counts differ");
  const auto expected = checkpoint_layers(static_cast<int>(num_layers), static_cast<int>(interval),
                                          includes_final_layer);
  if (layers() != expected) {
    mismatch("checkpoint layers do not follow the interval-" + std::to_string(interval) +
             " placement for " + std::to_string(num_layers) + " layers");
  }
  for (std::size_t i = 0; i < routers.size(); ++i) {
    const Router& r = routers[i];
    if (r.hidden_dim() != hidden_dim || r.bottleneck() != bottleneck) {
      mismatch("router at layer " + std::to_string(r.layer) + " has shape " +
               r.w_down.shape_string() + ", expected [" + std::to_string(bottleneck) + "x" +
               std::to_string(hidden_dim) + "]");
    }
    if (stats[i].layer != r.layer) mismatch("stats are not aligned with routers");
  }
}

bool RouterBank::operator==(const RouterBank& o) const {
  auto bits = [](float f) { return std::bit_cast<std::uint32_t>(f); };
  return hidden_dim == o.hidden_dim && bottleneck == o.bottleneck && interval == o.interval &&
         bits(tau) == bits(o.tau) && bits(eps) == bits(o.eps) && num_layers == o.num_layers &&
         includes_final_layer == o.includes_final_layer && model_digest == o.model_digest &&
         routers == o.routers && stats == o.stats;
}

std::size_t bank_file_size(std::size_t hidden_dim, std::size_t bottleneck,
                           std::size_t n_checkpoints) {
  const std::size_t per_router = 4 + 4 * (hidden_dim * bottleneck + bottleneck);
  return kHeaderBytes + n_checkpoints * per_router + kExtensionBytes +
         n_checkpoints * kStatsBytes + 4;
}

std::vector<unsigned char> serialize_bank(const RouterBank& bank) {
  bank.validate();
  detail::ByteWriter w;
  w.tag("TIDE");
  w.u32(kBankVersion);
  w.u32(bank.hidden_dim);
  w.u32(bank.bottleneck);
  w.u32(bank.interval);
  w.f32(bank.tau);
  w.f32(bank.eps);
  w.u32(bank.num_layers);
  w.u32(static_cast<std::uint32_t>(bank.routers.size()));
  for (const Router& r : bank.routers) {
    w.u32(static_cast<std::uint32_t>(r.layer));
    w.f32s(r.w_down.data());
    w.f32s(r.w_up.data());
  }
  w.u32(bank.includes_final_layer ? kFlagIncludesFinal : 0u);
  w.u64(bank.model_digest);
  for (const RouterStats& s : bank.stats) {
    w.f32(s.final_loss);
    w.f32(s.accuracy);
    w.u64(s.positives);
    w.u64(s.examples);
    w.u32(s.single_class ? 1u : 0u);
  }
  w.seal();
  return w.bytes();
}

RouterBank deserialize_bank(std::span<const unsigned char> bytes) {
  detail::ByteReader head(bytes);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), "TIDE", 4) != 0) {
    throw FormatError(FormatErrorKind::BadMagic, "not a router bank (magic is not TIDE)");
  }
  head.take(4);
  if (const std::uint32_t version = head.u32(); version != kBankVersion) {
    throw FormatError(FormatErrorKind::VersionMismatch,
                      "bank version " + std::to_string(version) + ", expected " +
                          std::to_string(kBankVersion));
  }

  RouterBank bank;
  bank.hidden_dim = head.u32();
  bank.bottleneck = head.u32();
  bank.interval = head.u32();
  bank.tau = head.f32();
  bank.eps = head.f32();
  bank.num_layers = head.u32();
  const std::uint32_t n = head.u32();
  if (bank.hidden_dim == 0 || bank.bottleneck == 0 || bank.hidden_dim > kMaxDim ||
      bank.bottleneck > kMaxDim || n > 1u << 16) {
    mismatch("header declares d=" + std::to_string(bank.hidden_dim) +
             ", b=" + std::to_string(bank.bottleneck) + ", n=" + std::to_string(n));
  }
  const std::size_t expected = bank_file_size(bank.hidden_dim, bank.bottleneck, n);
  if (bytes.size() < expected) {
    throw FormatError(FormatErrorKind::Truncated,
                      "file has " + std::to_string(bytes.size()) + " bytes, header implies " +
                          std::to_string(expected));
  }
  if (bytes.size() > expected) {
    mismatch("file has " + std::to_string(bytes.size() - expected) +
             " bytes beyond the size implied by its header");
  }

  detail::ByteReader r(detail::verify_crc(bytes));
  r.take(kHeaderBytes);
  const std::size_t d = bank.hidden_dim, b = bank.bottleneck;
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto layer = static_cast<int>(r.u32());
    Tensor wd({b, d}), wu({1, b});
    r.f32s(wd.data());
    r.f32s(wu.data());
    bank.routers.emplace_back(layer, std::move(wd), std::move(wu));
  }
  const std::uint32_t flags = r.u32();
  bank.includes_final_layer = (flags & kFlagIncludesFinal) != 0;
  bank.model_digest = r.u64();
  for (std::uint32_t i = 0; i < n; ++i) {
    RouterStats s;
    s.layer = bank.routers[i].layer;
    s.final_loss = r.f32();
    s.accuracy = r.f32();
    s.positives = r.u64();
    s.examples = r.u64();
    s.single_class = r.u32() != 0;
    bank.stats.push_back(s);
  }
  bank.validate();
  return bank;
}

void save_bank(const RouterBank& bank, const std::filesystem::path& path) {
  detail::write_file(path, serialize_bank(bank));
}

RouterBank load_bank(const std::filesystem::path& path) {
  return deserialize_bank(detail::read_file(path));
}

}  // namespace tide
