#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "qg/training.hpp"

using namespace qg;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 24;
  c.vocab_size = 300;
  c.max_seq_len = 32;
  return c;
}

Vocab tiny_vocab() { return train_bpe(std::vector<std::string>{"ab ab cd cd"}, 300, 8); }

std::vector<u_char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::vector<u_char>(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("learning-rate schedule: linear warmup, continuous inverse-sqrt decay") {
  TrainConfig c;
  c.learning_rate = 0.01;
  c.warmup_steps = 100;
  c.total_steps = 1000;
  CHECK(lr_at(1, c) == doctest::Approx(0.01 * 1.0 / 100));
  CHECK(lr_at(50, c) == doctest::Approx(0.01 * 50.0 / 100));
  CHECK(lr_at(100, c) == doctest::Approx(0.01));
  // continuity and inverse-sqrt shape after warmup
  CHECK(lr_at(101, c) < 0.01);
  CHECK(lr_at(400, c) == doctest::Approx(0.01 * std::sqrt(100.0 / 400.0)));
  CHECK(lr_at(400, c) == doctest::Approx(lr_at(100, c) / 2));
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.total_steps = 10;
  c.warmup_steps = 20;
  CHECK_THROWS_AS(c.validate(), Error);
  c.warmup_steps = 5;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("adamw first step matches the bias-corrected formula by hand") {
  Parameters p;
  p.tensors["w"] = Tensor::full({1}, 1.0);
  std::map<std::string, Tensor> g;
  g["w"] = Tensor::full({1}, 0.5);
  OptimizerState st;
  const real lr = 0.1;
  adamw_step(p, g, st, lr, 0.0);
  // m_hat = g, v_hat = g^2 at step 1, so the update is lr * g/(|g| + eps)
  real expected = 1.0 - lr * 0.5 / (std::sqrt(0.25) + 1e-8);
  CHECK(p.tensors["w"].v[0] == doctest::Approx(expected).epsilon(1e-12));
  CHECK(st.step == 1);

  // second step, constant gradient: moments follow the recurrences
  adamw_step(p, g, st, lr, 0.0);
  real m = (0.9 * (0.1 * 0.5) + 0.1 * 0.5) / (1 - 0.9 * 0.9);
  real v = (0.999 * (0.001 * 0.25) + 0.001 * 0.25) / (1 - 0.999 * 0.999);
  real expected2 = expected - lr * m / (std::sqrt(v) + 1e-8);
  CHECK(p.tensors["w"].v[0] == doctest::Approx(expected2).epsilon(1e-10));
}

TEST_CASE("adamw decoupled weight decay shrinks parameters independently") {
  Parameters p;
  p.tensors["w"] = Tensor::full({1}, 2.0);
  std::map<std::string, Tensor> g;
  g["w"] = Tensor::full({1}, 0.0);
  OptimizerState st;
  adamw_step(p, g, st, 0.1, 0.5);
  // zero gradient: only the decay term moves the weight
  CHECK(p.tensors["w"].v[0] == doctest::Approx(2.0 * (1 - 0.1 * 0.5)).epsilon(1e-12));
}

TEST_CASE("gradient clipping rescales to the max norm and reports the pre-norm") {
  std::map<std::string, Tensor> g;
  g["a"] = Tensor::full({2}, 3.0);  // contributes 18
  g["b"] = Tensor::full({1}, 4.0);  // contributes 16 -> norm sqrt(34)
  real pre = clip_grad_norm(g, 1.0);
  CHECK(pre == doctest::Approx(std::sqrt(34.0)));
  real post = 0;
  for (const auto& [k, t] : g)
    for (real e : t.v) post += e * e;
  CHECK(std::sqrt(post) == doctest::Approx(1.0).epsilon(1e-12));

  // under the cap nothing changes
  std::map<std::string, Tensor> h;
  h["a"] = Tensor::full({1}, 0.3);
  real pre2 = clip_grad_norm(h, 1.0);
  CHECK(pre2 == doctest::Approx(0.3));
  CHECK(h["a"].v[0] == doctest::Approx(0.3));
}

TEST_CASE("span corruption reconstructs the original sequence, 1000 cases") {
  SentinelRange sent{300, 8, 1};
  std::mt19937_64 seq_rng(7);
  std::uniform_int_distribution<int> len(1, 60);
  std::uniform_int_distribution<int> tok(3, 258);
  for (int t = 0; t < 1000; ++t) {
    TokenSeq seq;
    int n = len(seq_rng);
    for (int i = 0; i < n; ++i) seq.ids.push_back(tok(seq_rng));
    std::mt19937_64 rng(1000 + t);
    auto [src, tgt] = span_corrupt(seq, 0.15, 3.0, rng, sent);

    // target ends with EOS and interleaves sentinels with span contents
    REQUIRE(!tgt.ids.empty());
    CHECK(tgt.ids.back() == 1);

    // rebuild: walk src, splice in the span keyed by each sentinel
    std::vector<int> rebuilt;
    size_t ti = 0;
    auto span_for = [&](int sentinel) {
      std::vector<int> out;
      REQUIRE(ti < tgt.ids.size());
      REQUIRE(tgt.ids[ti] == sentinel);
      ++ti;
      while (ti < tgt.ids.size() && !sent.contains(tgt.ids[ti]) && tgt.ids[ti] != 1)
        out.push_back(tgt.ids[ti++]);
      return out;
    };
    int expected_k = 0;
    for (int id : src.ids) {
      if (sent.contains(id)) {
        CHECK(sent.index(id) == expected_k);  // sentinels appear in order 0,1,2...
        ++expected_k;
        for (int s : span_for(id)) rebuilt.push_back(s);
      } else {
        rebuilt.push_back(id);
      }
    }
    CHECK(rebuilt == seq.ids);
  }
}

TEST_CASE("span corruption masks roughly the requested ratio") {
  SentinelRange sent{500, 150, 1};
  TokenSeq seq;
  for (int i = 0; i < 2000; ++i) seq.ids.push_back(3 + (i % 200));
  std::mt19937_64 rng(11);
  auto [src, tgt] = span_corrupt(seq, 0.15, 3.0, rng, sent);
  size_t kept = 0;
  for (int id : src.ids)
    if (!sent.contains(id)) ++kept;
  real masked = real(seq.ids.size() - kept) / real(seq.ids.size());
  CHECK(masked > 0.10);
  CHECK(masked < 0.20);
}

TEST_CASE("qg and denoise item builders respect max_seq_len") {
  Vocab v = tiny_vocab();
  DatasetSplit split;
  QGExample ex;
  ex.id = "x";
  ex.context = std::string(500, 'a');
  ex.answer = "ab";
  ex.question = "cd cd?";
  ex.has_question = true;
  split.examples = {ex};
  auto items = make_qg_items(split, v, make_template("qg-v1"), 32);
  REQUIRE(items.size() == 1);
  CHECK(items[0].src.size() <= 32);
  CHECK(items[0].src.back() == v.eos_id());
  CHECK(!items[0].tgt.empty());

  AbstractDoc d;
  d.text = std::string(500, 'b');
  auto ditems = make_denoise_items({d}, v, 32);
  REQUIRE(!ditems.empty());
  CHECK(ditems[0].src.size() <= 30);  // headroom for sentinel growth + EOS
}

TEST_CASE("checkpoint roundtrips byte-identically and detects corruption") {
  ModelConfig mc = tiny_cfg();
  Checkpoint ck = fresh_checkpoint(mc, 42, 0xabcdefull, make_template("qg-v1"));
  ck.history.push_back({1, 0.5});
  save_checkpoint(ck, "t_ck.bin");
  Checkpoint lk = load_checkpoint("t_ck.bin");
  CHECK(lk.vocab_hash == ck.vocab_hash);
  CHECK(lk.model.d_model == mc.d_model);
  CHECK(lk.params.tensors.at("embedding").v == ck.params.tensors.at("embedding").v);
  CHECK(lk.history.size() == 1);
  CHECK(lk.manifest_hash() == ck.manifest_hash());
  // byte-identical re-save
  save_checkpoint(lk, "t_ck2.bin");
  CHECK(slurp("t_ck.bin") == slurp("t_ck2.bin"));

  // flip one byte in the middle -> hash mismatch error
  auto bytes = slurp("t_ck.bin");
  bytes[bytes.size() / 2] ^= 0xff;
  std::ofstream f("t_ck3.bin", std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  f.close();
  CHECK_THROWS_AS(load_checkpoint("t_ck3.bin"), Error);

  // vocab hash guard
  CHECK_THROWS_AS(load_checkpoint("t_ck.bin", 0x1234ull), Error);
  CHECK_NOTHROW(load_checkpoint("t_ck.bin", 0xabcdefull));
  std::remove("t_ck.bin");
  std::remove("t_ck2.bin");
  std::remove("t_ck3.bin");
}

TEST_CASE("training is deterministic and resume matches an uninterrupted run") {
  Vocab v = tiny_vocab();
  ModelConfig mc = tiny_cfg();
  std::vector<TrainItem> items;
  for (int i = 0; i < 12; ++i) {
    TrainItem it;
    it.src = {3 + i, 4 + i, 5 + i, 1};
    it.tgt = {10 + i, 11 + i};
    items.push_back(it);
  }
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.warmup_steps = 2;
  tc.total_steps = 8;
  tc.batch_size = 4;
  tc.seed = 99;

  Checkpoint a = train_loop(fresh_checkpoint(mc, 5, v.content_hash(), make_template("qg-v1")),
                            items, tc, v);
  Checkpoint b = train_loop(fresh_checkpoint(mc, 5, v.content_hash(), make_template("qg-v1")),
                            items, tc, v);
  CHECK(a.params.tensors.at("embedding").v == b.params.tensors.at("embedding").v);
  CHECK(a.opt.step == 8);
  CHECK(a.history.size() == 8);

  // run to step 4, save, resume to 8
  TrainConfig half = tc;
  half.total_steps = 4;
  Checkpoint mid = train_loop(fresh_checkpoint(mc, 5, v.content_hash(), make_template("qg-v1")),
                              items, half, v);
  save_checkpoint(mid, "t_mid.bin");
  Checkpoint resumed = train_loop(load_checkpoint("t_mid.bin"), items, tc, v);
  std::remove("t_mid.bin");
  CHECK(resumed.opt.step == 8);
  for (const auto& [name, t] : a.params.tensors) {
    const Tensor& r = resumed.params.tensors.at(name);
    REQUIRE(r.v.size() == t.v.size());
    for (size_t i = 0; i < t.v.size(); ++i) CHECK(r.v[i] == t.v[i]);  // bit-for-bit
  }
  // loss history of the overlapping steps matches too
  for (size_t i = 0; i < 8; ++i) CHECK(resumed.history[i].loss == a.history[i].loss);
}

TEST_CASE("intermediate checkpoints are written at the configured interval") {
  Vocab v = tiny_vocab();
  ModelConfig mc = tiny_cfg();
  std::vector<TrainItem> items(4, TrainItem{{3, 4, 1}, {5}});
  TrainConfig tc;
  tc.warmup_steps = 1;
  tc.total_steps = 4;
  tc.batch_size = 2;
  tc.checkpoint_interval = 2;
  train_loop(fresh_checkpoint(mc, 5, v.content_hash(), make_template("qg-v1")), items, tc, v,
             "t_ival.bin");
  CHECK(std::ifstream("t_ival.bin.step2").good());
  CHECK(std::ifstream("t_ival.bin").good());
  std::remove("t_ival.bin.step2");
  std::remove("t_ival.bin.step4");
  std::remove("t_ival.bin");
}

TEST_CASE("token accuracy and dataset loss run in eval mode") {
  Vocab v = tiny_vocab();
  ModelConfig mc = tiny_cfg();
  Checkpoint ck = fresh_checkpoint(mc, 17, v.content_hash(), make_template("qg-v1"));
  std::vector<TrainItem> items(3, TrainItem{{3, 4, 5, 1}, {6, 7}});
  real acc = token_accuracy(ck, items, v);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  real l1 = dataset_loss(ck, items, v);
  real l2 = dataset_loss(ck, items, v);
  CHECK(l1 == l2);
  CHECK(std::isfinite(l1));
}
