#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include <doctest.h>

#include "tide/calibration.hpp"
#include "tide/rng.hpp"
#include "tide/runtime.hpp"

using namespace tide;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.num_layers = 8;
  c.hidden_dim = 32;
  c.num_heads = 4;
  c.ffn_dim = 64;
  c.max_seq_len = 128;
  c.seed = 11;
  return c;
}

// Routers with random weights so scores spread over (0, 1).
RouterBank random_bank(const ModelConfig& mc, int interval, std::uint64_t seed) {
  SplitMix64 rng(seed);
  RouterBank bank;
  bank.hidden_dim = mc.hidden_dim;
  bank.bottleneck = 8;
  bank.interval = interval;
  bank.tau = 0.98f;
  bank.eps = kRmsNormEps;
  bank.num_layers = mc.num_layers;
  bank.includes_final_layer = true;
  bank.model_digest = mc.digest();
  for (int layer : checkpoint_layers(mc.num_layers, interval, true)) {
    Tensor wd({8, static_cast<std::size_t>(mc.hidden_dim)}), wu({1, 8});
    for (float& v : wd.data()) v = static_cast<float>(rng.normal(0, 0.5));
    for (float& v : wu.data()) v = static_cast<float>(rng.normal(0, 1.5));
    bank.routers.emplace_back(layer, std::move(wd), std::move(wu));
    RouterStats s;
    s.layer = layer;
    bank.stats.push_back(s);
  }
  bank.validate();
  return bank;
}

const std::vector<std::string> kPrompts = {
    "Once upon a time", "The licence grants permission", "zebra", "0 1 2 3 4 5 6 7 8 9",
    "Copyright holders and contributors provide the program as is"};

RuntimeConfig with_theta(float theta, int max_tokens = 12) {
  RuntimeConfig c;
  c.theta = theta;
  c.max_new_tokens = max_tokens;
  return c;
}

float max_abs_diff(std::span<const float> a, std::span<const float> b) {
  float m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("runtime config validation and mode names") {
  CHECK_NOTHROW(with_theta(1.0f).validate());
  CHECK_THROWS_AS(with_theta(0.0f).validate(), ConfigError);
  CHECK_THROWS_AS(with_theta(1.01f).validate(), ConfigError);
  RuntimeConfig c;
  c.k_min = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(exit_mode_from_string("per-token") == ExitMode::PerToken);
  CHECK(std::string(to_string(ExitMode::BatchUnanimous)) == "batch-unanimous");
  CHECK_THROWS_AS(exit_mode_from_string("sometimes"), std::invalid_argument);
}

TEST_CASE("exit report accounting") {
  ExitReport r;
  for (int l : {3, kNoExit, 7, 3, kNoExit}) r.record(l);
  CHECK(r.tokens_total() == 5);
  CHECK(r.exited() == 3);
  CHECK(r.exit_rate() == doctest::Approx(0.6));
  std::size_t sum = 0;
  for (auto [layer, count] : r.histogram) sum += count;
  CHECK(sum == r.tokens_total());
  CHECK(r.histogram.at(3) == 2);
  CHECK(ExitReport{}.exit_rate() == 0.0);
}

TEST_CASE("theta 1.0 reproduces the baseline") {
  const ReferenceModel model(small_model());
  const RouterBank bank = random_bank(model.config(), 2, 5);
  const RouterBank rigged = make_rigged_bank(model.config(), 2, 1, 3);
  for (const auto& text : kPrompts) {
    const auto prompt = tokenize_bytes(text);
    const GenerationResult base = generate(model, nullptr, prompt, with_theta(1.0f));
    for (const RouterBank* b : {&bank, &rigged}) {
      for (auto mode : {ExitMode::PerToken, ExitMode::BatchUnanimous}) {
        RuntimeConfig cfg = with_theta(1.0f);
        cfg.mode = mode;
        const GenerationResult off = generate(model, b, prompt, cfg);
        CHECK(off.output_tokens == base.output_tokens);
        CHECK(off.prefill.exit_rate() == 0.0);
        CHECK(off.decode.exit_rate() == 0.0);
      }
    }
    CHECK(base.prefill.exit_rate() == 0.0);
  }

  // Selection at theta 1.0 returns the forward logits unchanged.
  KVCache cache = model.new_cache();
  const ForwardOutput out = model.forward(tokenize_bytes(kPrompts[1]), cache, true);
  const SelectionResult sel = posthoc_select(model, out, &rigged, with_theta(1.0f), ExitMode::PerToken);
  CHECK(sel.logits == out.logits);
}

TEST_CASE("rigged bank exits at its layer with that layer's logits") {
  const ReferenceModel model(small_model());
  for (int exit_layer : {1, 3, 5, 7}) {
    const RouterBank bank = make_rigged_bank(model.config(), 2, exit_layer, 17);
    KVCache cache = model.new_cache();
    const ForwardOutput out = model.forward(tokenize_bytes(kPrompts[4]), cache, true);
    const Tensor expected = model.lm_head_from_hidden(out.hidden_states[exit_layer + 1]);
    for (auto mode : {ExitMode::PerToken, ExitMode::BatchUnanimous}) {
      const SelectionResult sel = posthoc_select(model, out, &bank, with_theta(0.9f), mode);
      CHECK(sel.report.exit_rate() == 1.0);
      CHECK(sel.report.histogram.size() == 1);
      CHECK(sel.report.histogram.count(exit_layer) == 1);
      CHECK(max_abs_diff(sel.logits.data(), expected.data()) <= 1e-5f);
    }
  }
  CHECK_THROWS_AS(make_rigged_bank(model.config(), 2, 2, 1), std::invalid_argument);
}

TEST_CASE("exit at the final layer gives the baseline logits") {
  const ReferenceModel model(small_model());
  const RouterBank bank = make_rigged_bank(model.config(), 2, 7, 1);
  const auto prompt = tokenize_bytes(kPrompts[0]);
  const GenerationResult base = generate(model, nullptr, prompt, with_theta(1.0f, 20));
  const GenerationResult ex = generate(model, &bank, prompt, with_theta(0.5f, 20));
  CHECK(ex.prefill.exit_rate() == 1.0);
  CHECK(ex.output_tokens == base.output_tokens);
}

TEST_CASE("k_min above every checkpoint behaves as theta 1.0") {
  const ReferenceModel model(small_model());
  const RouterBank bank = make_rigged_bank(model.config(), 2, 3, 1);
  const auto prompt = tokenize_bytes(kPrompts[2]);
  RuntimeConfig cfg = with_theta(0.5f);
  cfg.k_min = 8;
  const GenerationResult r = generate(model, &bank, prompt, cfg);
  CHECK(r.prefill.exit_rate() == 0.0);
  CHECK(r.output_tokens == generate(model, nullptr, prompt, with_theta(1.0f)).output_tokens);

  // k_min between checkpoints skips the rigged layer.
  cfg.k_min = 4;
  KVCache cache = model.new_cache();
  const ForwardOutput out = model.forward(prompt, cache, true);
  CHECK(posthoc_select(model, out, &bank, cfg, ExitMode::PerToken).report.exit_rate() == 0.0);
}

TEST_CASE("per-token exits are the earliest passing checkpoint") {
  const ReferenceModel model(small_model());
  const RouterBank bank = random_bank(model.config(), 2, 23);
  KVCache cache = model.new_cache();
  const ForwardOutput out = model.forward(tokenize_bytes(kPrompts[4]), cache, true);
  const std::size_t seq = out.logits.rows();

  std::vector<Tensor> scores;
  for (const Router& r : bank.routers) {
    scores.push_back(route_scores(out.hidden_states[r.layer + 1], r, bank.eps));
  }
  bool saw_exit = false, saw_final = false;
  for (float theta : {0.95f, 0.8f, 0.6f, 0.4f}) {
    for (int k_min : {0, 2, 5}) {
      RuntimeConfig cfg = with_theta(theta);
      cfg.k_min = k_min;
      const SelectionResult sel = posthoc_select(model, out, &bank, cfg, ExitMode::PerToken);
      for (std::size_t i = 0; i < seq; ++i) {
        int expect = kNoExit;
        for (std::size_t c = 0; c < bank.routers.size(); ++c) {
          if (bank.routers[c].layer >= k_min && scores[c].data()[i] > theta) {
            expect = bank.routers[c].layer;
            break;
          }
        }
        // Scores within float noise of theta may legitimately go either way.
        bool near = false;
        for (const Tensor& s : scores) near = near || std::abs(s.data()[i] - theta) < 1e-5f;
        if (!near) CHECK(sel.report.exit_layers[i] == expect);
        saw_exit = saw_exit || expect != kNoExit;
        saw_final = saw_final || expect == kNoExit;

        const Tensor& ref = expect == kNoExit
                                ? out.logits
                                : model.lm_head_from_hidden(out.hidden_states[expect + 1]);
        if (!near) CHECK(max_abs_diff(sel.logits.row(i), ref.row(i)) <= 1e-5f);
      }
    }
  }
  CHECK(saw_exit);
  CHECK(saw_final);
}

TEST_CASE("batch-unanimous exits only when every row passes") {
  const ReferenceModel model(small_model());
  const RouterBank bank = random_bank(model.config(), 2, 29);
  KVCache cache = model.new_cache();
  const ForwardOutput out = model.forward(tokenize_bytes(kPrompts[3]), cache, true);
  for (float theta : {0.9f, 0.5f, 0.2f, 0.05f}) {
    const SelectionResult sel =
        posthoc_select(model, out, &bank, with_theta(theta), ExitMode::BatchUnanimous);
    int expect = kNoExit;
    for (const Router& r : bank.routers) {
      const Tensor s = route_scores(out.hidden_states[r.layer + 1], r, bank.eps);
      if (std::all_of(s.data().begin(), s.data().end(), [&](float v) { return v > theta; })) {
        expect = r.layer;
        break;
      }
    }
    CHECK(sel.report.histogram.size() == 1);
    CHECK(sel.report.histogram.begin()->first == expect);
    CHECK(sel.report.tokens_total() == out.logits.rows());
  }
}

TEST_CASE("lower thresholds exit earlier") {
  const ReferenceModel model(small_model());
  const RouterBank bank = random_bank(model.config(), 2, 31);
  std::vector<std::vector<int>> prompts;
  for (const auto& p : kPrompts) prompts.push_back(tokenize_bytes(p));
  const auto rows = sweep_thresholds(model, bank, prompts, {0.5f, 1.0f, 0.7f, 0.85f, 0.3f}, RuntimeConfig{});
  REQUIRE(rows.size() == 5);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i].theta < rows[i - 1].theta);
    CHECK(rows[i].report.exit_rate() >= rows[i - 1].report.exit_rate());
    const auto& now = rows[i].report.exit_layers;
    const auto& before = rows[i - 1].report.exit_layers;
    REQUIRE(now.size() == before.size());
    for (std::size_t t = 0; t < now.size(); ++t) {
      // kNoExit sorts as "after every checkpoint".
      const int a = now[t] == kNoExit ? 1 << 20 : now[t];
      const int b = before[t] == kNoExit ? 1 << 20 : before[t];
      CHECK(a <= b);
    }
  }
  CHECK(rows.front().theta == 1.0f);
  CHECK(rows.front().report.exit_rate() == 0.0);

  const auto layers = bank.layers();
  for (const auto& row : rows) {
    for (auto [layer, count] : row.report.histogram) {
      CHECK((layer == kNoExit || std::find(layers.begin(), layers.end(), layer) != layers.end()));
    }
  }
  CHECK_THROWS_AS(sweep_thresholds(model, bank, {}, {0.5f}, RuntimeConfig{}), std::invalid_argument);
  CHECK_THROWS_AS(sweep_thresholds(model, bank, prompts, {}, RuntimeConfig{}), std::invalid_argument);
}

TEST_CASE("cache integrity with and without exits") {
  const ReferenceModel model(small_model());
  const RouterBank bank = make_rigged_bank(model.config(), 2, 3, 7);
  const auto prompt = tokenize_bytes(kPrompts[1]);
  for (int n : {1, 5, 16}) {
    const GenerationResult r = generate(model, &bank, prompt, with_theta(0.5f, n));
    CHECK(r.output_tokens.size() == static_cast<std::size_t>(n));
    CHECK(r.decode.tokens_total() == static_cast<std::size_t>(n));
    CHECK(r.prefill.tokens_total() == prompt.size());
    for (std::size_t l = 0; l < r.cache.num_layers(); ++l) {
      CHECK(r.cache.layer_length(l) == prompt.size() + n);
    }
  }

  const PrefillResult on = prefill(model, &bank, prompt, with_theta(0.5f));
  const PrefillResult off = prefill(model, nullptr, prompt, with_theta(0.5f));
  CHECK(on.selection.report.exit_rate() == 1.0);
  CHECK(on.cache.contents_equal(off.cache));

  const GenerationResult a = generate(model, &bank, prompt, with_theta(1.0f, 10));
  const GenerationResult b = generate(model, nullptr, prompt, with_theta(1.0f, 10));
  CHECK(a.cache.contents_equal(b.cache));
}

TEST_CASE("generation details") {
  const ReferenceModel model(small_model());
  const auto prompt = tokenize_bytes(kPrompts[0]);
  const GenerationResult r = generate(model, nullptr, prompt, with_theta(1.0f, 30));
  std::set<int> distinct(r.output_tokens.begin(), r.output_tokens.end());
  REQUIRE(r.decode.unique_output_tokens.has_value());
  CHECK(*r.decode.unique_output_tokens == distinct.size());
  CHECK_FALSE(r.prefill.unique_output_tokens.has_value());

  // Greedy: the first token is the argmax of the last prompt position.
  KVCache cache = model.new_cache();
  const ForwardOutput out = model.forward(prompt, cache, false);
  auto last = out.logits.row(prompt.size() - 1);
  CHECK(r.output_tokens[0] == std::max_element(last.begin(), last.end()) - last.begin());

  RuntimeConfig hot = with_theta(1.0f, 30);
  hot.temperature = 1.5f;
  hot.seed = 4;
  const auto s1 = generate(model, nullptr, prompt, hot).output_tokens;
  const auto s2 = generate(model, nullptr, prompt, hot).output_tokens;
  CHECK(s1 == s2);
  hot.seed = 5;
  CHECK(generate(model, nullptr, prompt, hot).output_tokens != s1);

  CHECK_THROWS_AS(generate(model, nullptr, std::vector<int>{}, with_theta(1.0f)),
                  std::invalid_argument);
}

TEST_CASE("bank and model shapes must agree") {
  const ReferenceModel model(small_model());
  ModelConfig other = small_model();
  other.num_layers = 10;
  const RouterBank bank = make_rigged_bank(other, 2, 3, 1);
  CHECK_THROWS_AS(generate(model, &bank, tokenize_bytes("x"), with_theta(0.5f)),
                  std::invalid_argument);
  KVCache cache = model.new_cache();
  const ForwardOutput no_capture = model.forward(tokenize_bytes("x"), cache, false);
  const RouterBank ok = make_rigged_bank(model.config(), 2, 3, 1);
  CHECK_THROWS_AS(posthoc_select(model, no_capture, &ok, with_theta(0.5f), ExitMode::PerToken),
                  std::invalid_argument);
}
