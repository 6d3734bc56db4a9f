#include "qg/decode.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace qg {

void DecodeConfig::validate(size_t max_seq_len) const {
  if (beam_width < 1) throw config_error("DecodeConfig: beam_width must be >= 1");
  if (max_len < 1 || max_len > max_seq_len)
    throw config_error("DecodeConfig: max_len must be in [1, max_seq_len]");
  if (temperature <= 0) throw config_error("DecodeConfig: temperature must be > 0");
  if (top_p <= 0 || top_p > 1) throw config_error("DecodeConfig: top_p must be in (0,1]");
}

uint64_t DecodeConfig::config_hash() const {
  std::string s = std::to_string(static_cast<int>(strategy)) + "|" + std::to_string(beam_width) +
                  "|" + std::to_string(max_len) + "|" + std::to_string(temperature) + "|" +
                  std::to_string(top_k) + "|" + std::to_string(top_p) + "|" +
                  std::to_string(length_penalty) + "|" + std::to_string(seed);
  return fnv1a(s);
}

namespace {

// log-softmax of the final position row for each batch element
std::vector<std::vector<real>> next_token_logprobs(const Checkpoint& ck, const Vocab& vocab,
                                                   const std::vector<int>& src,
                                                   const std::vector<std::vector<int>>& prefixes) {
  std::vector<std::vector<int>> srcs(prefixes.size(), src);
  std::vector<std::vector<int>> tgt_in;
  tgt_in.reserve(prefixes.size());
  for (const auto& p : prefixes) {
    std::vector<int> t;
    t.reserve(p.size() + 1);
    t.push_back(vocab.eos_id());
    t.insert(t.end(), p.begin(), p.end());
    tgt_in.push_back(std::move(t));
  }
  Tensor logits = forward(ck.params, ck.model, srcs, tgt_in, false, 0, vocab.pad_id());
  size_t vsz = logits.shape.back();
  size_t tlen = logits.shape[1];
  std::vector<std::vector<real>> out(prefixes.size());
  for (size_t b = 0; b < prefixes.size(); ++b) {
    size_t pos = prefixes[b].size();  // last real position (rows padded to tlen)
    const real* row = &logits.v[(b * tlen + pos) * vsz];
    real mx = *std::max_element(row, row + vsz);
    real z = 0;
    for (size_t j = 0; j < vsz; ++j) z += std::exp(row[j] - mx);
    real logz = std::log(z) + mx;
    out[b].resize(vsz);
    for (size_t j = 0; j < vsz; ++j) out[b][j] = row[j] - logz;
    out[b][vocab.pad_id()] = -1e30;  // never emit padding
  }
  return out;
}

real length_norm(size_t len, real alpha) {
  if (alpha == 0) return 1;
  return std::pow(real(5 + len), alpha) / std::pow(real(6), alpha);
}

DecodeResult decode_beam(const Checkpoint& ck, const Vocab& vocab, const std::vector<int>& src,
                         const DecodeConfig& cfg) {
  struct Hyp {
    std::vector<int> ids;
    real logp = 0;
  };
  std::vector<Hyp> alive{Hyp{}};
  std::vector<Hyp> finished;
  for (size_t step = 0; step < cfg.max_len && !alive.empty(); ++step) {
    std::vector<std::vector<int>> prefixes;
    for (const auto& h : alive) prefixes.push_back(h.ids);
    auto lp = next_token_logprobs(ck, vocab, src, prefixes);
    std::vector<Hyp> cand;
    for (size_t b = 0; b < alive.size(); ++b) {
      // top beam_width expansions of this hypothesis
      std::vector<size_t> order(lp[b].size());
      std::iota(order.begin(), order.end(), size_t(0));
      size_t k = std::min(cfg.beam_width, order.size());
      std::partial_sort(order.begin(), order.begin() + k, order.end(),
                        [&](size_t x, size_t y) { return lp[b][x] > lp[b][y]; });
      for (size_t j = 0; j < k; ++j) {
        Hyp h = alive[b];
        h.logp += lp[b][order[j]];
        h.ids.push_back(static_cast<int>(order[j]));
        cand.push_back(std::move(h));
      }
    }
    std::sort(cand.begin(), cand.end(), [](const Hyp& a, const Hyp& b) { return a.logp > b.logp; });
    alive.clear();
    for (auto& h : cand) {
      if (h.ids.back() == vocab.eos_id()) {
        h.ids.pop_back();
        finished.push_back(std::move(h));
      } else if (alive.size() < cfg.beam_width) {
        alive.push_back(std::move(h));
      }
      if (finished.size() >= cfg.beam_width && alive.size() >= cfg.beam_width) break;
    }
  }
  for (auto& h : alive) finished.push_back(std::move(h));  // ran out of length
  auto score = [&](const Hyp& h) { return h.logp / length_norm(h.ids.size() + 1, cfg.length_penalty); };
  const Hyp* best = &finished[0];
  for (const auto& h : finished)
    if (score(h) > score(*best)) best = &h;
  DecodeResult r;
  r.ids = best->ids;
  r.logprob = best->logp;
  return r;
}

DecodeResult decode_sample(const Checkpoint& ck, const Vocab& vocab, const std::vector<int>& src,
                           const DecodeConfig& cfg, uint64_t seed) {
  std::mt19937_64 rng(seed);
  DecodeResult r;
  std::vector<int> ids;
  for (size_t step = 0; step < cfg.max_len; ++step) {
    auto lp = next_token_logprobs(ck, vocab, src, {ids})[0];
    size_t vsz = lp.size();
    std::vector<size_t> order(vsz);
    std::iota(order.begin(), order.end(), size_t(0));
    std::sort(order.begin(), order.end(), [&](size_t x, size_t y) { return lp[x] > lp[y]; });
    size_t keep = vsz;
    if (cfg.top_k > 0) keep = std::min(keep, cfg.top_k);
    // temperature, over the kept candidates
    std::vector<real> probs(keep);
    real mx = lp[order[0]] / cfg.temperature;
    real z = 0;
    for (size_t j = 0; j < keep; ++j) {
      probs[j] = std::exp(lp[order[j]] / cfg.temperature - mx);
      z += probs[j];
    }
    for (auto& p : probs) p /= z;
    if (cfg.top_p < 1) {
      real cum = 0;
      size_t cut = keep;
      for (size_t j = 0; j < keep; ++j) {
        cum += probs[j];
        if (cum >= cfg.top_p) {
          cut = j + 1;
          break;
        }
      }
      keep = cut;
      real zz = 0;
      for (size_t j = 0; j < keep; ++j) zz += probs[j];
      for (size_t j = 0; j < keep; ++j) probs[j] /= zz;
    }
    std::uniform_real_distribution<real> u(0.0, 1.0);
    real x = u(rng);
    size_t pick = keep - 1;
    real cum = 0;
    for (size_t j = 0; j < keep; ++j) {
      cum += probs[j];
      if (x < cum) {
        pick = j;
        break;
      }
    }
    int tok = static_cast<int>(order[pick]);
    r.logprob += lp[tok];
    if (tok == vocab.eos_id()) break;
    ids.push_back(tok);
  }
  r.ids = std::move(ids);
  return r;
}

}  // namespace

std::vector<DecodeResult> generate(const Checkpoint& ck, const Vocab& vocab,
                                   const std::vector<std::string>& source_texts,
                                   const DecodeConfig& cfg) {
  cfg.validate(ck.model.max_seq_len);
  if (ck.vocab_hash != vocab.content_hash())
    throw data_error("generate: checkpoint vocab hash does not match supplied vocabulary");

  std::vector<std::vector<int>> srcs;
  std::vector<size_t> overlong;
  for (size_t i = 0; i < source_texts.size(); ++i) {
    std::vector<int> ids = encode(vocab, source_texts[i]).ids;
    ids.push_back(vocab.eos_id());
    if (ids.size() > ck.model.max_seq_len) overlong.push_back(i);
    srcs.push_back(std::move(ids));
  }
  if (!overlong.empty()) {
    std::string msg = "generate: source texts exceed max_seq_len at indices";
    for (size_t i : overlong) msg += " " + std::to_string(i);
    throw data_error(msg);
  }

  std::vector<DecodeResult> out;
  out.reserve(srcs.size());
  for (size_t i = 0; i < srcs.size(); ++i) {
    DecodeConfig c = cfg;
    DecodeResult r;
    switch (cfg.strategy) {
      case DecodeStrategy::Greedy:
        c.beam_width = 1;
        c.length_penalty = 0;
        r = decode_beam(ck, vocab, srcs[i], c);
        break;
      case DecodeStrategy::Beam:
        r = decode_beam(ck, vocab, srcs[i], c);
        break;
      case DecodeStrategy::Sample:
        r = decode_sample(ck, vocab, srcs[i], c, derive_seed(cfg.seed, "sample:" + std::to_string(i)));
        break;
    }
    for (int id : r.ids)
      if (vocab.is_sentinel(id)) r.sentinel_leak = true;
    if (r.sentinel_leak)
      std::cerr << "[qg] warning: sentinel token in generated output " << i << "\n";
    TokenSeq seq;
    seq.ids = r.ids;
    r.text = decode(vocab, seq);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace qg
