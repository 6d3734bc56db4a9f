#include "qg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace qg {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (total_steps < warmup_steps)
    throw config_error("TrainConfig: total_steps must be >= warmup_steps");
  if (batch_size < 1) throw config_error("TrainConfig: batch_size must be >= 1");
  if (clip_norm <= 0) throw config_error("TrainConfig: clip_norm must be > 0");
  if (learning_rate <= 0) throw config_error("TrainConfig: learning_rate must be > 0");
  if (mask_ratio < 0 || mask_ratio >= 1) throw config_error("TrainConfig: mask_ratio in [0,1)");
  if (mean_span_len < 1) throw config_error("TrainConfig: mean_span_len must be >= 1");
}

std::pair<TokenSeq, TokenSeq> span_corrupt(const TokenSeq& seq, real mask_ratio,
                                           real mean_span_len, std::mt19937_64& rng,
                                           const SentinelRange& sent) {
  if (seq.ids.empty()) throw data_error("span_corrupt: empty sequence");
  if (mask_ratio < 0 || mask_ratio >= 1) throw config_error("span_corrupt: mask_ratio in [0,1)");
  if (mean_span_len < 1) throw config_error("span_corrupt: mean_span_len must be >= 1");

  size_t n = seq.ids.size();
  long long budget = std::llround(mask_ratio * real(n));
  TokenSeq src, tgt;
  if (budget <= 0) {
    src = seq;
    tgt.ids = {sent.eos_id};
    return {src, tgt};
  }

  std::vector<char> masked(n, 0);
  auto feasible_starts = [&](size_t len) {
    std::vector<size_t> out;
    for (size_t s = 0; s + len <= n; ++s) {
      bool ok = true;
      size_t lo = s > 0 ? s - 1 : 0;
      size_t hi = std::min(n, s + len + 1);  // gap of one keeps spans separate
      for (size_t i = lo; i < hi && ok; ++i)
        if (masked[i]) ok = false;
      if (ok) out.push_back(s);
    }
    return out;
  };

  real p = real(1) / mean_span_len;
  std::geometric_distribution<long long> geom(p);
  while (budget > 0) {
    long long len = std::min<long long>(1 + (mean_span_len > 1 ? geom(rng) : 0), budget);
    std::vector<size_t> starts;
    while (len > 0 && (starts = feasible_starts(static_cast<size_t>(len))).empty()) --len;
    if (len == 0) break;
    std::uniform_int_distribution<size_t> pick(0, starts.size() - 1);
    size_t s = starts[pick(rng)];
    for (long long i = 0; i < len; ++i) masked[s + i] = 1;
    budget -= len;
  }

  // count spans and check against available sentinels
  int spans = 0;
  for (size_t i = 0; i < n; ++i)
    if (masked[i] && (i == 0 || !masked[i - 1])) ++spans;
  if (spans > sent.num_sentinels)
    throw runtime_error("span_corrupt: " + std::to_string(spans) + " spans exceed " +
                        std::to_string(sent.num_sentinels) + " sentinels");

  int k = 0;
  for (size_t i = 0; i < n;) {
    if (!masked[i]) {
      src.ids.push_back(seq.ids[i]);
      ++i;
      continue;
    }
    src.ids.push_back(sent.id(k));
    tgt.ids.push_back(sent.id(k));
    while (i < n && masked[i]) tgt.ids.push_back(seq.ids[i++]);
    ++k;
  }
  tgt.ids.push_back(sent.eos_id);
  return {src, tgt};
}

real clip_grad_norm(std::map<std::string, Tensor>& grads, real max_norm) {
  if (max_norm <= 0) throw config_error("clip_grad_norm: max_norm must be > 0");
  real sq = 0;
  for (const auto& [k, g] : grads)
    for (real x : g.v) sq += x * x;
  real norm = std::sqrt(sq);
  if (norm > max_norm) {
    real s = max_norm / norm;
    for (auto& [k, g] : grads)
      for (real& x : g.v) x *= s;
  }
  return norm;
}

void adamw_step(Parameters& params, const std::map<std::string, Tensor>& grads,
                OptimizerState& st, real lr, real weight_decay) {
  if (lr <= 0) throw config_error("adamw_step: lr must be > 0");
  if (st.m.empty()) {
    for (const auto& [k, t] : params.tensors) {
      st.m[k] = Tensor::zeros(t.shape);
      st.v[k] = Tensor::zeros(t.shape);
    }
  }
  size_t t = st.step + 1;
  real bc1 = 1 - std::pow(st.beta1, real(t));
  real bc2 = 1 - std::pow(st.beta2, real(t));
  for (auto& [name, p] : params.tensors) {
    auto git = grads.find(name);
    if (git == grads.end()) throw runtime_error("adamw_step: missing gradient for " + name);
    const Tensor& g = git->second;
    if (!g.same_shape(p)) throw runtime_error("adamw_step: gradient shape mismatch for " + name);
    Tensor& m = st.m[name];
    Tensor& v = st.v[name];
    for (size_t i = 0; i < p.size(); ++i) {
      real gi = g.v[i];
      if (!std::isfinite(gi)) throw runtime_error("adamw_step: non-finite gradient in " + name);
      if (weight_decay != 0) p.v[i] *= (1 - lr * weight_decay);
      m.v[i] = st.beta1 * m.v[i] + (1 - st.beta1) * gi;
      v.v[i] = st.beta2 * v.v[i] + (1 - st.beta2) * gi * gi;
      real mhat = m.v[i] / bc1;
      real vhat = v.v[i] / bc2;
      p.v[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
  st.step = t;
}

real lr_at(size_t step, const TrainConfig& cfg) {
  if (step < 1) throw config_error("lr_at: step must be >= 1");
  size_t w = std::max<size_t>(cfg.warmup_steps, 1);
  if (step <= cfg.warmup_steps) return cfg.learning_rate * real(step) / real(w);
  return cfg.learning_rate * std::sqrt(real(w) / real(step));
}

std::vector<TrainItem> make_qg_items(const DatasetSplit& split, const Vocab& vocab,
                                     const FormatTemplate& tmpl, size_t max_seq_len) {
  std::vector<TrainItem> items;
  items.reserve(split.examples.size());
  for (const auto& ex : split.examples) {
    auto [src_text, tgt_text] = format_example(ex, tmpl, true);
    TrainItem it;
    it.src = encode(vocab, src_text).ids;
    if (it.src.size() > max_seq_len - 1) it.src.resize(max_seq_len - 1);
    it.src.push_back(vocab.eos_id());
    it.tgt = encode(vocab, tgt_text).ids;
    if (it.tgt.size() > max_seq_len - 1) it.tgt.resize(max_seq_len - 1);
    items.push_back(std::move(it));
  }
  return items;
}

std::vector<TrainItem> make_denoise_items(const std::vector<AbstractDoc>& docs, const Vocab& vocab,
                                          size_t max_seq_len) {
  std::vector<TrainItem> items;
  items.reserve(docs.size());
  for (const auto& d : docs) {
    TrainItem it;
    it.src = encode(vocab, d.text).ids;
    if (it.src.empty()) continue;
    if (it.src.size() > max_seq_len - 2) it.src.resize(max_seq_len - 2);
    items.push_back(std::move(it));
  }
  return items;
}

namespace {

struct Batch {
  std::vector<std::vector<int>> src, tgt_in;
  std::vector<int> tgt_out_flat;
  size_t tgt_len = 0;
};

Batch assemble(const std::vector<TrainItem>& data, const std::vector<size_t>& idx,
               const TrainConfig& cfg, const Vocab& vocab, size_t max_seq_len, size_t step) {
  Batch b;
  std::vector<std::vector<int>> tgt_out;
  for (size_t slot = 0; slot < idx.size(); ++slot) {
    const TrainItem& it = data[idx[slot]];
    std::vector<int> src, tgt;
    if (cfg.objective == Objective::Denoise) {
      std::mt19937_64 rng(
          derive_seed(cfg.seed, "corrupt:" + std::to_string(step) + ":" + std::to_string(slot)));
      TokenSeq in;
      in.ids = it.src;
      auto [csrc, ctgt] = span_corrupt(in, cfg.mask_ratio, cfg.mean_span_len, rng,
                                       SentinelRange::of(vocab));
      src = csrc.ids;
      src.push_back(vocab.eos_id());
      tgt = ctgt.ids;  // already EOS-terminated
    } else {
      src = it.src;  // EOS appended at item construction
      tgt = it.tgt;
      tgt.push_back(vocab.eos_id());
    }
    if (src.size() > max_seq_len) src.resize(max_seq_len);
    if (tgt.size() > max_seq_len) tgt.resize(max_seq_len);
    // decoder start token is EOS; targets are the unshifted sequence
    std::vector<int> tin;
    tin.reserve(tgt.size());
    tin.push_back(vocab.eos_id());
    tin.insert(tin.end(), tgt.begin(), tgt.end() - 1);
    b.src.push_back(std::move(src));
    b.tgt_in.push_back(std::move(tin));
    tgt_out.push_back(std::move(tgt));
  }
  size_t tlen = 1;
  for (const auto& t : tgt_out) tlen = std::max(tlen, t.size());
  b.tgt_len = tlen;
  b.tgt_out_flat.assign(tgt_out.size() * tlen, vocab.pad_id());
  for (size_t i = 0; i < tgt_out.size(); ++i)
    std::copy(tgt_out[i].begin(), tgt_out[i].end(), b.tgt_out_flat.begin() + i * tlen);
  // tgt_in rows must pad to the same length as tgt_out
  for (auto& t : b.tgt_in) t.resize(tlen, vocab.pad_id());
  return b;
}

std::vector<size_t> batch_indices(size_t n, size_t batch_size, uint64_t seed, size_t step) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t(0));
  std::mt19937_64 rng(derive_seed(seed, "batch:" + std::to_string(step)));
  std::shuffle(idx.begin(), idx.end(), rng);
  if (idx.size() > batch_size) idx.resize(batch_size);
  return idx;
}

std::string rng_state_at(uint64_t seed, size_t step) {
  std::mt19937_64 rng(derive_seed(seed, "rng:" + std::to_string(step)));
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace

Checkpoint fresh_checkpoint(const ModelConfig& cfg, uint64_t init_seed, uint64_t vocab_hash,
                            const FormatTemplate& tmpl) {
  Checkpoint ck;
  ck.model = cfg;
  ck.params = init_params(cfg, init_seed);
  ck.vocab_hash = vocab_hash;
  ck.tmpl = tmpl;
  ck.rng_state = rng_state_at(init_seed, 0);
  return ck;
}

Checkpoint train_loop(Checkpoint start, const std::vector<TrainItem>& data, const TrainConfig& cfg,
                      const Vocab& vocab, const std::string& checkpoint_path,
                      const TrainCallbacks& cb) {
  cfg.validate();
  if (data.empty()) throw data_error("train_loop: empty training data");
  if (start.vocab_hash != vocab.content_hash())
    throw data_error("train_loop: checkpoint vocab hash does not match supplied vocabulary");

  Checkpoint ck = std::move(start);
  size_t done = ck.opt.step;
  for (size_t step = done + 1; step <= cfg.total_steps; ++step) {
    auto idx = batch_indices(data.size(), cfg.batch_size, cfg.seed, step);
    Batch b = assemble(data, idx, cfg, vocab, ck.model.max_seq_len, step);
    uint64_t drop_seed = derive_seed(cfg.seed, "dropout:" + std::to_string(step));
    LossGrads lg = loss_and_grads(ck.params, ck.model, b.src, b.tgt_in, b.tgt_out_flat, true,
                                  drop_seed, vocab.pad_id());
    if (!std::isfinite(lg.loss))
      throw runtime_error("train_loop: non-finite loss at step " + std::to_string(step) +
                          "; aborting (last saved checkpoint retained)");
    clip_grad_norm(lg.grads, cfg.clip_norm);
    adamw_step(ck.params, lg.grads, ck.opt, lr_at(step, cfg), cfg.weight_decay);
    ck.history.push_back({step, lg.loss});
    ck.rng_state = rng_state_at(cfg.seed, step);
    if (cb.on_step) cb.on_step(step, lg.loss);
    if (!checkpoint_path.empty() && cfg.checkpoint_interval > 0 &&
        step % cfg.checkpoint_interval == 0 && step != cfg.total_steps)
      save_checkpoint(ck, checkpoint_path + ".step" + std::to_string(step));
  }
  if (!checkpoint_path.empty()) save_checkpoint(ck, checkpoint_path);
  return ck;
}

real token_accuracy(const Checkpoint& ck, const std::vector<TrainItem>& items, const Vocab& vocab) {
  if (items.empty()) throw data_error("token_accuracy: no items");
  size_t correct = 0, total = 0;
  size_t bs = 16;
  for (size_t at = 0; at < items.size(); at += bs) {
    std::vector<size_t> idx;
    for (size_t i = at; i < std::min(items.size(), at + bs); ++i) idx.push_back(i);
    TrainConfig tc;
    tc.objective = Objective::QGFinetune;
    Batch b = assemble(items, idx, tc, vocab, ck.model.max_seq_len, 0);
    Tensor logits = forward(ck.params, ck.model, b.src, b.tgt_in, false, 0, vocab.pad_id());
    size_t vsz = logits.shape.back();
    for (size_t p = 0; p < b.tgt_out_flat.size(); ++p) {
      int t = b.tgt_out_flat[p];
      if (t == vocab.pad_id()) continue;
      const real* row = &logits.v[p * vsz];
      size_t arg = 0;
      for (size_t j = 1; j < vsz; ++j)
        if (row[j] > row[arg]) arg = j;
      if (static_cast<int>(arg) == t) ++correct;
      ++total;
    }
  }
  return total ? real(correct) / real(total) : 0;
}

real dataset_loss(const Checkpoint& ck, const std::vector<TrainItem>& items, const Vocab& vocab,
                  size_t batch_size) {
  if (items.empty()) throw data_error("dataset_loss: no items");
  real total_nll = 0;
  size_t total_tok = 0;
  for (size_t at = 0; at < items.size(); at += batch_size) {
    std::vector<size_t> idx;
    for (size_t i = at; i < std::min(items.size(), at + batch_size); ++i) idx.push_back(i);
    TrainConfig tc;
    tc.objective = Objective::QGFinetune;
    Batch b = assemble(items, idx, tc, vocab, ck.model.max_seq_len, 0);
    Tensor logits = forward(ck.params, ck.model, b.src, b.tgt_in, false, 0, vocab.pad_id());
    size_t n_active = 0;
    for (int t : b.tgt_out_flat)
      if (t != vocab.pad_id()) ++n_active;
    total_nll += loss_ce(logits, b.tgt_out_flat, vocab.pad_id()) * real(n_active);
    total_tok += n_active;
  }
  return total_nll / real(total_tok);
}

// ---- checkpoint serialization -------------------------------------------
// Layout: "QGCK" u32 version | u32 header_len | header json | raw little-
// endian f64 blocks (params, then opt.m, then opt.v, in name order) followed
// by u64 fnv manifest hash over everything before it.

namespace {

constexpr uint32_t kCkptVersion = 1;

void put_u32(std::string& s, uint32_t x) { s.append(reinterpret_cast<const char*>(&x), 4); }
void put_u64(std::string& s, uint64_t x) { s.append(reinterpret_cast<const char*>(&x), 8); }

json model_to_json(const ModelConfig& m) {
  return json{{"d_model", m.d_model},       {"n_heads", m.n_heads},
              {"n_enc_layers", m.n_enc_layers}, {"n_dec_layers", m.n_dec_layers},
              {"d_ff", m.d_ff},             {"vocab_size", m.vocab_size},
              {"max_seq_len", m.max_seq_len}, {"dropout_rate", m.dropout_rate}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.d_model = j.at("d_model");
  m.n_heads = j.at("n_heads");
  m.n_enc_layers = j.at("n_enc_layers");
  m.n_dec_layers = j.at("n_dec_layers");
  m.d_ff = j.at("d_ff");
  m.vocab_size = j.at("vocab_size");
  m.max_seq_len = j.at("max_seq_len");
  m.dropout_rate = j.at("dropout_rate");
  return m;
}

std::string serialize_body(const Checkpoint& ck) {
  json hdr;
  hdr["model"] = model_to_json(ck.model);
  hdr["vocab_hash"] = hash_hex(ck.vocab_hash);
  hdr["template"] = ck.tmpl.name;
  hdr["rng_state"] = ck.rng_state;
  hdr["opt"] = {{"step", ck.opt.step}, {"beta1", ck.opt.beta1}, {"beta2", ck.opt.beta2},
                {"eps", ck.opt.eps},   {"has_moments", !ck.opt.m.empty()}};
  json hist = json::array();
  for (const auto& h : ck.history) hist.push_back({{"step", h.step}, {"loss", h.loss}});
  hdr["history"] = std::move(hist);
  json shapes = json::object();
  for (const auto& [k, t] : ck.params.tensors) shapes[k] = t.shape;
  hdr["param_shapes"] = std::move(shapes);
  std::string hjson = hdr.dump();

  std::string body = "QGCK";
  put_u32(body, kCkptVersion);
  put_u32(body, static_cast<uint32_t>(hjson.size()));
  body += hjson;
  auto put_block = [&](const std::map<std::string, Tensor>& ts) {
    for (const auto& [k, t] : ts)
      body.append(reinterpret_cast<const char*>(t.v.data()), t.v.size() * sizeof(real));
  };
  put_block(ck.params.tensors);
  if (!ck.opt.m.empty()) {
    put_block(ck.opt.m);
    put_block(ck.opt.v);
  }
  return body;
}

}  // namespace

uint64_t Checkpoint::manifest_hash() const { return fnv1a(serialize_body(*this)); }

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::string body = serialize_body(ck);
  uint64_t h = fnv1a(body);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("save_checkpoint: cannot open " + path);
  f.write(body.data(), static_cast<std::streamsize>(body.size()));
  f.write(reinterpret_cast<const char*>(&h), 8);
  if (!f) throw data_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path, std::optional<uint64_t> expected_vocab_hash) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("load_checkpoint: cannot open " + path);
  std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (all.size() < 20) throw data_error("load_checkpoint: truncated file " + path);
  std::string body = all.substr(0, all.size() - 8);
  uint64_t stored;
  std::memcpy(&stored, all.data() + all.size() - 8, 8);
  if (fnv1a(body) != stored)
    throw data_error("load_checkpoint: manifest hash mismatch in " + path +
                     " (field: manifest_hash)");
  if (body.compare(0, 4, "QGCK") != 0)
    throw data_error("load_checkpoint: bad magic in " + path + " (field: magic)");
  uint32_t version, hlen;
  std::memcpy(&version, body.data() + 4, 4);
  std::memcpy(&hlen, body.data() + 8, 4);
  if (version != kCkptVersion)
    throw data_error("load_checkpoint: unsupported version " + std::to_string(version) +
                     " (field: version)");
  json hdr = json::parse(body.substr(12, hlen));

  Checkpoint ck;
  ck.model = model_from_json(hdr.at("model"));
  ck.vocab_hash = std::stoull(hdr.at("vocab_hash").get<std::string>(), nullptr, 16);
  if (expected_vocab_hash && *expected_vocab_hash != ck.vocab_hash)
    throw data_error("load_checkpoint: vocab hash mismatch in " + path + " (field: vocab_hash)");
  ck.tmpl = make_template(hdr.at("template").get<std::string>());
  ck.rng_state = hdr.at("rng_state").get<std::string>();
  ck.opt.step = hdr.at("opt").at("step");
  ck.opt.beta1 = hdr.at("opt").at("beta1");
  ck.opt.beta2 = hdr.at("opt").at("beta2");
  ck.opt.eps = hdr.at("opt").at("eps");
  for (const auto& h : hdr.at("history"))
    ck.history.push_back({h.at("step").get<size_t>(), h.at("loss").get<real>()});

  size_t off = 12 + hlen;
  auto read_block = [&](std::map<std::string, Tensor>& ts) {
    for (const auto& [key, shape_j] : hdr.at("param_shapes").items()) {
      std::vector<size_t> shape = shape_j.get<std::vector<size_t>>();
      Tensor t(shape);
      size_t bytes = t.size() * sizeof(real);
      if (off + bytes > body.size())
        throw data_error("load_checkpoint: truncated tensor block (field: " + key + ")");
      std::memcpy(t.v.data(), body.data() + off, bytes);
      off += bytes;
      ts[key] = std::move(t);
    }
  };
  read_block(ck.params.tensors);
  if (hdr.at("opt").at("has_moments").get<bool>()) {
    read_block(ck.opt.m);
    read_block(ck.opt.v);
  }
  return ck;
}

}  // namespace qg
