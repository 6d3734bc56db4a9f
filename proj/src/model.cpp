#include "qg/model.hpp"

#include <cmath>

namespace qg {

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
    throw config_error("ModelConfig: d_model must be a positive multiple of n_heads");
  if (max_seq_len < 2) throw config_error("ModelConfig: max_seq_len must be >= 2");
  if (dropout_rate < 0 || dropout_rate >= 1)
    throw config_error("ModelConfig: dropout_rate must be in [0,1)");
  if (vocab_size == 0 || d_ff == 0 || n_enc_layers == 0 || n_dec_layers == 0)
    throw config_error("ModelConfig: zero-sized dimension");
}

namespace {

std::vector<std::string> param_names(const ModelConfig& cfg) {
  std::vector<std::string> names;
  names.push_back("embedding");
  for (size_t i = 0; i < cfg.n_enc_layers; ++i) {
    std::string p = "enc" + std::to_string(i) + ".";
    for (const char* n : {"ln1.gain", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain",
                          "ffn.w1", "ffn.w2"})
      names.push_back(p + n);
  }
  names.push_back("enc.ln_final.gain");
  for (size_t i = 0; i < cfg.n_dec_layers; ++i) {
    std::string p = "dec" + std::to_string(i) + ".";
    for (const char* n : {"ln1.gain", "self.wq", "self.wk", "self.wv", "self.wo", "ln2.gain",
                          "cross.wq", "cross.wk", "cross.wv", "cross.wo", "ln3.gain", "ffn.w1",
                          "ffn.w2"})
      names.push_back(p + n);
  }
  names.push_back("dec.ln_final.gain");
  return names;
}

std::vector<size_t> param_shape(const ModelConfig& cfg, const std::string& name) {
  size_t d = cfg.d_model;
  if (name == "embedding") return {cfg.vocab_size, d};
  if (name.find(".gain") != std::string::npos) return {d};
  if (name.find("ffn.w1") != std::string::npos) return {d, cfg.d_ff};
  if (name.find("ffn.w2") != std::string::npos) return {cfg.d_ff, d};
  return {d, d};  // attention projections
}

Tensor sinusoidal_positions(size_t max_len, size_t d) {
  Tensor p({max_len, d});
  for (size_t t = 0; t < max_len; ++t) {
    for (size_t i = 0; i < d; ++i) {
      real angle = real(t) / std::pow(10000.0, real(2 * (i / 2)) / real(d));
      p.v[t * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return p;
}

constexpr real kMaskNegInf = -1e9;

struct Builder {
  Tape& tape;
  const ModelConfig& cfg;
  std::map<std::string, Tape::VarId>& pv;
  bool train_mode;
  std::mt19937_64& rng;

  Tape::VarId P(const std::string& name) const { return pv.at(name); }

  Tape::VarId maybe_dropout(Tape::VarId x) {
    if (train_mode && cfg.dropout_rate > 0) return tape.dropout(x, cfg.dropout_rate, rng);
    return x;
  }

  // x: [B, Tq, d]; kv: [B, Tk, d]; mask: additive [B, h, Tq, Tk] constant.
  Tape::VarId attention(Tape::VarId x, Tape::VarId kv, Tape::VarId mask, const std::string& pfx) {
    size_t b = tape.val(x).dim(0), tq = tape.val(x).dim(1);
    size_t tk = tape.val(kv).dim(1);
    size_t h = cfg.n_heads, hd = cfg.head_dim();
    auto split = [&](Tape::VarId y, size_t tlen) {
      y = tape.reshape(y, {b, tlen, h, hd});
      return tape.permute(y, {0, 2, 1, 3});  // [B, h, T, hd]
    };
    Tape::VarId q = split(tape.linear(x, P(pfx + ".wq")), tq);
    Tape::VarId k = split(tape.linear(kv, P(pfx + ".wk")), tk);
    Tape::VarId v = split(tape.linear(kv, P(pfx + ".wv")), tk);
    Tape::VarId scores = tape.bmm(q, tape.transpose_last2(k));  // [B, h, Tq, Tk]
    scores = tape.scale(scores, real(1) / std::sqrt(real(hd)));
    scores = tape.add(scores, mask);
    Tape::VarId att = tape.softmax_lastdim(scores);
    att = maybe_dropout(att);
    Tape::VarId ctx = tape.bmm(att, v);                 // [B, h, Tq, hd]
    ctx = tape.permute(ctx, {0, 2, 1, 3});              // [B, Tq, h, hd]
    ctx = tape.reshape(ctx, {b, tq, cfg.d_model});
    return tape.linear(ctx, P(pfx + ".wo"));
  }

  Tape::VarId ffn(Tape::VarId x, const std::string& pfx) {
    Tape::VarId h1 = tape.relu(tape.linear(x, P(pfx + ".w1")));
    return tape.linear(h1, P(pfx + ".w2"));
  }
};

std::vector<int> pad_batch(const std::vector<std::vector<int>>& seqs, int pad_id, size_t& out_len,
                           size_t max_seq_len, const char* which) {
  size_t mx = 1;
  for (size_t i = 0; i < seqs.size(); ++i) {
    if (seqs[i].size() > max_seq_len)
      throw runtime_error(std::string("forward: ") + which + " sequence " + std::to_string(i) +
                          " length " + std::to_string(seqs[i].size()) + " exceeds max_seq_len " +
                          std::to_string(max_seq_len));
    mx = std::max(mx, seqs[i].size());
  }
  out_len = mx;
  std::vector<int> flat(seqs.size() * mx, pad_id);
  for (size_t i = 0; i < seqs.size(); ++i)
    std::copy(seqs[i].begin(), seqs[i].end(), flat.begin() + i * mx);
  return flat;
}

}  // namespace

Parameters init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Parameters p;
  std::mt19937_64 rng(seed);
  for (const auto& name : param_names(cfg)) {
    auto shape = param_shape(cfg, name);
    if (name.find(".gain") != std::string::npos) {
      p.tensors[name] = Tensor::full(shape, 1.0);
    } else if (name == "embedding") {
      p.tensors[name] = Tensor::normal(shape, real(1) / std::sqrt(real(cfg.d_model)), rng);
    } else {
      // fan-in scaled
      p.tensors[name] = Tensor::normal(shape, real(1) / std::sqrt(real(shape[0])), rng);
    }
  }
  return p;
}

ForwardGraph forward_graph(const Parameters& params, const ModelConfig& cfg,
                           const std::vector<std::vector<int>>& src,
                           const std::vector<std::vector<int>>& tgt_in, bool train_mode,
                           uint64_t seed, int pad_id, bool with_grad) {
  cfg.validate();
  if (src.empty() || src.size() != tgt_in.size())
    throw runtime_error("forward: batch size mismatch between src and tgt_in");

  ForwardGraph g;
  Tape& tape = g.tape;
  for (const auto& [name, t] : params.tensors) g.param_vars[name] = tape.leaf(t, with_grad);

  size_t b = src.size(), src_len = 0, tgt_len = 0;
  std::vector<int> src_flat = pad_batch(src, pad_id, src_len, cfg.max_seq_len, "src");
  std::vector<int> tgt_flat = pad_batch(tgt_in, pad_id, tgt_len, cfg.max_seq_len, "tgt");
  size_t h = cfg.n_heads;

  // additive pad masks, built once as constants
  auto make_mask = [&](size_t tq, size_t tk, const std::vector<int>& key_flat, size_t key_len,
                       bool causal) {
    Tensor m({b, h, tq, tk});
    for (size_t bi = 0; bi < b; ++bi)
      for (size_t qi = 0; qi < tq; ++qi)
        for (size_t ki = 0; ki < tk; ++ki) {
          bool blocked = key_flat[bi * key_len + ki] == pad_id || (causal && ki > qi);
          if (blocked)
            for (size_t hi = 0; hi < h; ++hi) m.v[((bi * h + hi) * tq + qi) * tk + ki] = kMaskNegInf;
        }
    return m;
  };

  std::mt19937_64 rng(seed);
  Builder bld{tape, cfg, g.param_vars, train_mode, rng};

  Tape::VarId pos = tape.leaf(sinusoidal_positions(cfg.max_seq_len, cfg.d_model), false);
  real emb_scale = std::sqrt(real(cfg.d_model));

  auto embed = [&](const std::vector<int>& flat, size_t tlen) {
    Tape::VarId e = tape.lookup(g.param_vars.at("embedding"), flat, {b, tlen});
    e = tape.scale(e, emb_scale);
    // positions for the first tlen steps
    Tensor ptrunc({tlen, cfg.d_model});
    std::copy_n(tape.val(pos).v.begin(), tlen * cfg.d_model, ptrunc.v.begin());
    e = tape.add(e, tape.leaf(std::move(ptrunc), false));
    return bld.maybe_dropout(e);
  };

  Tape::VarId enc_mask = tape.leaf(make_mask(src_len, src_len, src_flat, src_len, false), false);
  Tape::VarId x = embed(src_flat, src_len);
  for (size_t i = 0; i < cfg.n_enc_layers; ++i) {
    std::string p = "enc" + std::to_string(i);
    Tape::VarId ln1 = tape.layernorm(x, bld.P(p + ".ln1.gain"));
    Tape::VarId a = bld.attention(ln1, ln1, enc_mask, p + ".attn");
    x = tape.add(x, bld.maybe_dropout(a));
    Tape::VarId f = bld.ffn(tape.layernorm(x, bld.P(p + ".ln2.gain")), p + ".ffn");
    x = tape.add(x, bld.maybe_dropout(f));
  }
  Tape::VarId enc_out = tape.layernorm(x, bld.P("enc.ln_final.gain"));

  Tape::VarId dec_self_mask =
      tape.leaf(make_mask(tgt_len, tgt_len, tgt_flat, tgt_len, true), false);
  Tape::VarId cross_mask = tape.leaf(make_mask(tgt_len, src_len, src_flat, src_len, false), false);

  Tape::VarId y = embed(tgt_flat, tgt_len);
  for (size_t i = 0; i < cfg.n_dec_layers; ++i) {
    std::string p = "dec" + std::to_string(i);
    Tape::VarId ln1 = tape.layernorm(y, bld.P(p + ".ln1.gain"));
    Tape::VarId a = bld.attention(ln1, ln1, dec_self_mask, p + ".self");
    y = tape.add(y, bld.maybe_dropout(a));
    Tape::VarId ln2 = tape.layernorm(y, bld.P(p + ".ln2.gain"));
    Tape::VarId c = bld.attention(ln2, enc_out, cross_mask, p + ".cross");
    y = tape.add(y, bld.maybe_dropout(c));
    Tape::VarId f = bld.ffn(tape.layernorm(y, bld.P(p + ".ln3.gain")), p + ".ffn");
    y = tape.add(y, bld.maybe_dropout(f));
  }
  y = tape.layernorm(y, bld.P("dec.ln_final.gain"));
  // tied output projection: logits = y @ embedding^T
  g.logits = tape.linear(y, g.param_vars.at("embedding"), /*trans_w=*/true);
  return g;
}

Tensor forward(const Parameters& params, const ModelConfig& cfg,
               const std::vector<std::vector<int>>& src,
               const std::vector<std::vector<int>>& tgt_in, bool train_mode, uint64_t seed,
               int pad_id) {
  ForwardGraph g = forward_graph(params, cfg, src, tgt_in, train_mode, seed, pad_id, false);
  Tensor out = g.tape.val(g.logits);
  if (!out.all_finite()) throw runtime_error("forward: non-finite logits");
  return out;
}

real loss_ce(const Tensor& logits, const std::vector<int>& targets_flat, int pad_id) {
  Tape tape;
  Tape::VarId l = tape.leaf(logits, false);
  Tape::VarId loss = tape.cross_entropy_mean(l, targets_flat, pad_id);
  return tape.val(loss).v[0];
}

LossGrads loss_and_grads(const Parameters& params, const ModelConfig& cfg,
                         const std::vector<std::vector<int>>& src,
                         const std::vector<std::vector<int>>& tgt_in,
                         const std::vector<int>& tgt_out_flat, bool train_mode, uint64_t seed,
                         int pad_id) {
  ForwardGraph g = forward_graph(params, cfg, src, tgt_in, train_mode, seed, pad_id, true);
  Tape::VarId loss = g.tape.cross_entropy_mean(g.logits, tgt_out_flat, pad_id);
  g.tape.backward(loss);
  LossGrads out;
  out.loss = g.tape.val(loss).v[0];
  for (const auto& [name, var] : g.param_vars) out.grads[name] = g.tape.grad(var);
  return out;
}

}  // namespace qg
