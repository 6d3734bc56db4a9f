#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "qg/decode.hpp"

using namespace qg;

namespace {

// one shared trained tiny model so beam/greedy comparisons are meaningful
struct Fixture {
  Vocab vocab;
  Checkpoint ck;

  Fixture()
      : vocab(train_bpe(
            std::vector<std::string>{"what is ab? what is cd? ab maps to cd. cd maps to ab."},
            300, 8)) {
    ModelConfig mc;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.n_enc_layers = 1;
    mc.n_dec_layers = 1;
    mc.d_ff = 24;
    mc.vocab_size = vocab.vocab_size;
    mc.max_seq_len = 32;
    std::vector<std::pair<std::string, std::string>> pairs = {
        {"ab", "what is cd?"}, {"cd", "what is ab?"}, {"ab ab", "what is cd?"},
        {"cd cd", "what is ab?"}};
    std::vector<TrainItem> items;
    for (auto& [s, t] : pairs) {
      TrainItem it;
      it.src = encode(vocab, s).ids;
      it.src.push_back(vocab.eos_id());
      it.tgt = encode(vocab, t).ids;
      items.push_back(it);
    }
    TrainConfig tc;
    tc.learning_rate = 3e-3;
    tc.warmup_steps = 10;
    tc.total_steps = 400;
    tc.batch_size = 4;
    tc.seed = 3;
    ck = train_loop(fresh_checkpoint(mc, 21, vocab.content_hash(), make_template("qg-v1")), items,
                    tc, vocab);
  }
};

Fixture& fix() {
  static Fixture f;
  return f;
}

DecodeConfig base_cfg(DecodeStrategy s) {
  DecodeConfig c;
  c.strategy = s;
  c.beam_width = 2;
  c.max_len = 16;
  c.length_penalty = 0.0;  // raw log-prob scores, comparable across strategies
  return c;
}

}  // namespace

TEST_CASE("decode config validation") {
  DecodeConfig c;
  c.max_len = 200;
  CHECK_THROWS_AS(c.validate(64), Error);
  c = DecodeConfig{};
  c.beam_width = 0;
  CHECK_THROWS_AS(c.validate(64), Error);
  c = DecodeConfig{};
  c.temperature = 0.0;
  CHECK_THROWS_AS(c.validate(64), Error);
  c = DecodeConfig{};
  c.top_p = 1.5;
  CHECK_THROWS_AS(c.validate(64), Error);
  CHECK_NOTHROW(DecodeConfig{}.validate(64));
}

TEST_CASE("config hash tracks every decode knob") {
  DecodeConfig a, b;
  CHECK(a.config_hash() == b.config_hash());
  b.beam_width = 7;
  CHECK(a.config_hash() != b.config_hash());
  b = a;
  b.temperature = 0.9;
  CHECK(a.config_hash() != b.config_hash());
}

TEST_CASE("greedy decoding is deterministic and strips EOS") {
  auto& f = fix();
  auto r1 = generate(f.ck, f.vocab, {"ab", "cd"}, base_cfg(DecodeStrategy::Greedy));
  auto r2 = generate(f.ck, f.vocab, {"ab", "cd"}, base_cfg(DecodeStrategy::Greedy));
  REQUIRE(r1.size() == 2);
  CHECK(r1[0].ids == r2[0].ids);
  CHECK(r1[1].text == r2[1].text);
  for (const auto& r : r1) {
    for (int id : r.ids) CHECK(id != f.vocab.eos_id());
    CHECK(std::isfinite(r.logprob));
  }
}

TEST_CASE("beam width 1 coincides with greedy") {
  auto& f = fix();
  DecodeConfig g = base_cfg(DecodeStrategy::Greedy);
  DecodeConfig b1 = base_cfg(DecodeStrategy::Beam);
  b1.beam_width = 1;
  auto rg = generate(f.ck, f.vocab, {"ab", "cd", "ab ab"}, g);
  auto rb = generate(f.ck, f.vocab, {"ab", "cd", "ab ab"}, b1);
  for (size_t i = 0; i < rg.size(); ++i) {
    CHECK(rb[i].ids == rg[i].ids);
    CHECK(rb[i].logprob == doctest::Approx(rg[i].logprob).epsilon(1e-9));
  }
}

TEST_CASE("beam(2) never scores below greedy on the toy model") {
  auto& f = fix();
  std::vector<std::string> inputs = {"ab", "cd", "ab ab", "cd cd", "ab cd"};
  auto rg = generate(f.ck, f.vocab, inputs, base_cfg(DecodeStrategy::Greedy));
  auto rb = generate(f.ck, f.vocab, inputs, base_cfg(DecodeStrategy::Beam));
  for (size_t i = 0; i < inputs.size(); ++i) CHECK(rb[i].logprob >= rg[i].logprob - 1e-9);
}

TEST_CASE("sampling is reproducible per seed and varies across seeds") {
  auto& f = fix();
  DecodeConfig c = base_cfg(DecodeStrategy::Sample);
  c.temperature = 1.5;
  c.seed = 4;
  auto a = generate(f.ck, f.vocab, {"ab", "cd", "ab cd", "cd ab"}, c);
  auto b = generate(f.ck, f.vocab, {"ab", "cd", "ab cd", "cd ab"}, c);
  bool same = true;
  for (size_t i = 0; i < a.size(); ++i) same = same && a[i].ids == b[i].ids;
  CHECK(same);
  c.seed = 5;
  auto d = generate(f.ck, f.vocab, {"ab", "cd", "ab cd", "cd ab"}, c);
  bool any_diff = false;
  for (size_t i = 0; i < a.size(); ++i) any_diff = any_diff || a[i].ids != d[i].ids;
  CHECK(any_diff);  // hot sampling across 4 inputs should diverge somewhere
}

TEST_CASE("top-k sampling restricts choices to high-probability tokens") {
  auto& f = fix();
  DecodeConfig c = base_cfg(DecodeStrategy::Sample);
  c.top_k = 1;  // degenerate sampling = greedy
  auto rs = generate(f.ck, f.vocab, {"ab", "cd"}, c);
  auto rg = generate(f.ck, f.vocab, {"ab", "cd"}, base_cfg(DecodeStrategy::Greedy));
  for (size_t i = 0; i < rs.size(); ++i) CHECK(rs[i].ids == rg[i].ids);
}

TEST_CASE("generation rejects overlong sources with their indices") {
  auto& f = fix();
  std::string overlong(500, 'x');
  try {
    generate(f.ck, f.vocab, {"ab", overlong}, base_cfg(DecodeStrategy::Greedy));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("1") != std::string::npos);
  }
}

TEST_CASE("generation guards against a mismatched vocabulary") {
  auto& f = fix();
  Vocab other = train_bpe(std::vector<std::string>{"zz zz yy yy"}, 300, 8);
  CHECK_THROWS_AS(generate(f.ck, other, {"ab"}, base_cfg(DecodeStrategy::Greedy)), Error);
}

TEST_CASE("the trained toy model answers its drilled mapping") {
  auto& f = fix();
  auto r = generate(f.ck, f.vocab, {"ab"}, base_cfg(DecodeStrategy::Beam));
  CHECK(r[0].text == "what is cd?");
}
