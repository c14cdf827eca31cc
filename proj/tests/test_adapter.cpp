#include <filesystem>
#include <set>
#include <string>
#include <thread>

#include <doctest.h>

#include "tide/adapter.hpp"

using namespace tide;
namespace fs = std::filesystem;

namespace {

ModelManifest bundled(const std::string& name) {
  return ModelManifest::load(fs::path(TIDE_DATA_DIR) / "manifests" / (name + ".manifest"));
}

bool all_named(const AdapterMap& m) {
  for (auto c : {AdapterComponent::Layers, AdapterComponent::FinalNorm, AdapterComponent::LmHead,
                 AdapterComponent::Embedding, AdapterComponent::HiddenDim}) {
    if (m.method_for(c) != ResolutionMethod::NamedPath) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("seventeen distinct attribute paths") {
  std::set<std::string_view> all;
  for (auto p : kLayerPaths) all.insert(p);
  for (auto p : kFinalNormPaths) all.insert(p);
  for (auto p : kLmHeadPaths) all.insert(p);
  for (auto p : kEmbeddingPaths) all.insert(p);
  CHECK(all.size() == 17);
}

TEST_CASE("manifest parsing") {
  const ModelManifest m = ModelManifest::parse(
      "# comment\n"
      "@config hidden_size=8 vocab_size=16\n"
      "model: module\n"
      "  layers: module-list [3]\n"
      "    0: module\n"
      "  norm: norm [8]\n"
      "lm_head: linear [16x8]\n");
  CHECK(m.hidden_size == 8u);
  CHECK(m.vocab_size == 16u);
  const ManifestNode* layers = m.find("model.layers");
  REQUIRE(layers != nullptr);
  CHECK(layers->kind == NodeKind::ModuleList);
  CHECK(layers->child_count == 3);
  CHECK(m.find("model.layers.0") != nullptr);
  const ManifestNode* head = m.find("lm_head");
  REQUIRE(head != nullptr);
  CHECK(head->rows == 16u);
  CHECK(head->cols == 8u);
  CHECK(m.find("model.nothing") == nullptr);
}

TEST_CASE("manifest grammar errors") {
  CHECK_THROWS_AS(ModelManifest::parse("a: widget\n"), ManifestParseError);
  CHECK_THROWS_AS(ModelManifest::parse("a: module-list\n"), ManifestParseError);
  CHECK_THROWS_AS(ModelManifest::parse("a: module\n    b: norm\n"), ManifestParseError);
  CHECK_THROWS_AS(ModelManifest::parse("a: module\n b: norm\n"), ManifestParseError);
  CHECK_THROWS_AS(ModelManifest::parse("a: module\na: module\n"), ManifestParseError);
  CHECK_THROWS_AS(ModelManifest::parse("@config depth=3\n"), ManifestParseError);
  CHECK_THROWS_AS(ModelManifest::parse("a: linear [3x\n"), ManifestParseError);
  CHECK_THROWS_AS(ModelManifest::parse("l: module-list [1]\n  0: module\n  1: module\n"),
                  ManifestParseError);
}

TEST_CASE("the five reference manifests resolve through named paths") {
  struct Expect {
    const char* file;
    const char* layers;
    const char* norm;
    const char* head;
    const char* embed;
    std::size_t num_layers;
  };
  for (const Expect& e : {
           Expect{"llama", "model.layers", "model.norm", "lm_head", "model.embed_tokens", 32},
           Expect{"gpt2", "transformer.h", "transformer.ln_f", "lm_head", "transformer.wte", 12},
           Expect{"gpt_neox", "gpt_neox.layers", "gpt_neox.final_layer_norm", "embed_out",
                  "gpt_neox.embed_in", 24},
           Expect{"opt", "model.decoder.layers", "model.decoder.final_layer_norm", "lm_head",
                  "model.decoder.embed_tokens", 24},
           Expect{"falcon", "transformer.h", "transformer.ln_f", "lm_head",
                  "transformer.word_embeddings", 32},
       }) {
    CAPTURE(e.file);
    const AdapterMap m = probe_builtin(bundled(e.file));
    CHECK(m.layers == e.layers);
    CHECK(m.final_norm == e.norm);
    CHECK(m.lm_head == e.head);
    CHECK(m.embedding == e.embed);
    CHECK(m.num_layers == e.num_layers);
    CHECK(all_named(m));
  }
  CHECK(probe_builtin(bundled("llama")).hidden_dim == 4096);
}

TEST_CASE("pathless manifest resolves through fallbacks") {
  const AdapterMap m = probe_builtin(bundled("pathless"));
  CHECK(m.layers == "backbone.stack");
  CHECK(m.num_layers == 16);
  CHECK(m.final_norm == "backbone.out_norm");
  CHECK(m.lm_head == "readout");
  CHECK(m.embedding == "backbone.tok");
  CHECK(m.hidden_dim == 512);
  for (auto c : {AdapterComponent::Layers, AdapterComponent::FinalNorm, AdapterComponent::LmHead,
                 AdapterComponent::Embedding}) {
    CHECK(m.method_for(c) == ResolutionMethod::FallbackHeuristic);
  }
}

TEST_CASE("single unnamed block list with a vocab-shaped head") {
  const AdapterMap m = probe_builtin(ModelManifest::parse(
      "@config hidden_size=64 vocab_size=100\n"
      "net: module\n"
      "  blocks: module-list [24]\n"
      "  emb: embedding [100x64]\n"
      "  final: norm [64]\n"
      "  proj: linear [64x64]\n"
      "  out: linear [100x64]\n"));
  CHECK(m.layers == "net.blocks");
  CHECK(m.method_for(AdapterComponent::Layers) == ResolutionMethod::FallbackHeuristic);
  CHECK(m.lm_head == "net.out");
  CHECK(m.method_for(AdapterComponent::LmHead) == ResolutionMethod::FallbackHeuristic);
}

TEST_CASE("named path wins over a fallback that would also match") {
  const AdapterMap m = probe_builtin(ModelManifest::parse(
      "@config hidden_size=8 vocab_size=10\n"
      "model: module\n"
      "  layers: module-list [2]\n"
      "  norm: norm [8]\n"
      "  big: module-list [40]\n"
      "  embed_tokens: embedding [10x8]\n"
      "lm_head: linear [10x8]\n"
      "other_head: linear [10x8]\n"));
  CHECK(m.layers == "model.layers");
  CHECK(m.num_layers == 2);
  CHECK(m.lm_head == "lm_head");
  CHECK(all_named(m));
}

TEST_CASE("equal largest module lists are ambiguous") {
  try {
    probe_builtin(bundled("ambiguous"));
    FAIL("ambiguous manifest resolved");
  } catch (const ProbeError& e) {
    CHECK(e.component() == AdapterComponent::Layers);
    CHECK(e.reason() == ProbeError::Reason::Ambiguous);
    CHECK(std::string(e.what()).find("ambiguous") != std::string::npos);
  }
}

TEST_CASE("vocab shape matching prefers nodes outside the layer stack") {
  const char* base =
      "@config hidden_size=8 vocab_size=10\n"
      "net: module\n"
      "  stack: module-list [4]\n"
      "    0: module\n"
      "      tied: linear [10x8]\n"
      "  emb: embedding [10x8]\n"
      "  ln: norm [8]\n";
  const AdapterMap m = probe_builtin(ModelManifest::parse(std::string(base) + "head: linear [10x8]\n"));
  CHECK(m.lm_head == "head");

  // Only the nested candidate: it is used.
  CHECK(probe_builtin(ModelManifest::parse(base)).lm_head == "net.stack.0.tied");

  try {
    probe_builtin(ModelManifest::parse(std::string(base) +
                                       "head: linear [10x8]\nhead2: linear [10x8]\n"));
    FAIL("two heads resolved");
  } catch (const ProbeError& e) {
    CHECK(e.component() == AdapterComponent::LmHead);
    CHECK(e.reason() == ProbeError::Reason::Ambiguous);
  }
}

TEST_CASE("missing components name themselves") {
  try {
    probe_builtin(ModelManifest::parse("@config hidden_size=8 vocab_size=10\nx: norm [8]\n"));
    FAIL("resolved without layers");
  } catch (const ProbeError& e) {
    CHECK(e.component() == AdapterComponent::Layers);
    CHECK(e.reason() == ProbeError::Reason::Missing);
  }
  try {
    probe_builtin(ModelManifest::parse(
        "@config vocab_size=10\nmodel: module\n  layers: module-list [2]\n  norm: norm [8]\n"
        "  embed_tokens: embedding [10x8]\nlm_head: linear [10x8]\n"));
    FAIL("resolved without hidden size");
  } catch (const ProbeError& e) {
    CHECK(e.component() == AdapterComponent::HiddenDim);
  }
}

TEST_CASE("custom adapters take precedence and fall through") {
  AdapterRegistry reg;
  reg.register_adapter("mine", [](const ModelManifest& m) -> std::optional<AdapterMap> {
    if (m.find("custom") == nullptr) return std::nullopt;
    AdapterMap out;
    out.layers = "custom.blocks";
    out.hidden_dim = 1;
    out.method.fill(ResolutionMethod::Custom);
    return out;
  });
  CHECK(reg.contains("mine"));
  CHECK_THROWS_AS(reg.register_adapter("mine", [](const ModelManifest&) {
    return std::optional<AdapterMap>{};
  }), std::invalid_argument);

  const AdapterMap claimed = reg.probe(ModelManifest::parse("custom: module\n"));
  CHECK(claimed.layers == "custom.blocks");
  CHECK(claimed.method_for(AdapterComponent::Layers) == ResolutionMethod::Custom);

  const AdapterMap builtin = reg.probe(bundled("gpt2"));
  CHECK(builtin.layers == "transformer.h");
}

TEST_CASE("probe is deterministic and safe to call concurrently") {
  const ModelManifest m = bundled("opt");
  const std::string expected = probe(m).to_text();
  std::vector<std::thread> threads;
  std::vector<std::string> got(4);
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] { got[t] = probe(m).to_text(); });
  }
  for (auto& th : threads) th.join();
  for (const auto& g : got) CHECK(g == expected);
  CHECK(expected.find("layers.method=named-path") != std::string::npos);
}
