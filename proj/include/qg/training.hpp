#pragma once

#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "qg/corpus.hpp"
#include "qg/model.hpp"
#include "qg/tokenizer.hpp"

namespace qg {

enum class Objective { Denoise, QGFinetune };

struct TrainConfig {
  real learning_rate = 1e-3;
  size_t warmup_steps = 500;
  size_t total_steps = 0;
  size_t batch_size = 8;
  real clip_norm = 1.0;
  real weight_decay = 0.0;
  uint64_t seed = 0;
  Objective objective = Objective::QGFinetune;
  // denoising knobs
  real mask_ratio = 0.15;
  real mean_span_len = 3.0;
  // steps between intermediate checkpoint writes; 0 = final only
  size_t checkpoint_interval = 0;

  void validate() const;
};

struct OptimizerState {
  std::map<std::string, Tensor> m;  // first moments
  std::map<std::string, Tensor> v;  // second moments
  size_t step = 0;
  real beta1 = 0.9;
  real beta2 = 0.999;
  real eps = 1e-8;
};

struct HistoryEntry {
  size_t step;
  real loss;
};

struct Checkpoint {
  ModelConfig model;
  Parameters params;
  OptimizerState opt;
  std::string rng_state;  // serialized mt19937_64
  uint64_t vocab_hash = 0;
  FormatTemplate tmpl;
  std::vector<HistoryEntry> history;

  uint64_t manifest_hash() const;
};

Checkpoint fresh_checkpoint(const ModelConfig& cfg, uint64_t init_seed, uint64_t vocab_hash,
                            const FormatTemplate& tmpl);

struct SentinelRange {
  int vocab_size = 0;
  int num_sentinels = 0;
  int eos_id = 1;
  int id(int k) const { return vocab_size - 1 - k; }
  bool contains(int token) const { return token >= vocab_size - num_sentinels && token < vocab_size; }
  int index(int token) const { return vocab_size - 1 - token; }
  static SentinelRange of(const Vocab& v) {
    return SentinelRange{static_cast<int>(v.vocab_size), static_cast<int>(v.num_sentinels),
                         v.eos_id()};
  }
};

// T5-style span corruption. Roughly mask_ratio of the tokens are replaced by
// sentinel-marked spans (geometric lengths with the given mean); the target
// interleaves sentinels with the masked spans and ends with EOS.
std::pair<TokenSeq, TokenSeq> span_corrupt(const TokenSeq& seq, real mask_ratio,
                                           real mean_span_len, std::mt19937_64& rng,
                                           const SentinelRange& sent);

// Decoupled-weight-decay adaptive-moment update with bias correction.
void adamw_step(Parameters& params, const std::map<std::string, Tensor>& grads,
                OptimizerState& st, real lr, real weight_decay);

// Scales all gradients by max_norm/global_l2 when the global norm exceeds
// max_norm. Returns the pre-clip norm.
real clip_grad_norm(std::map<std::string, Tensor>& grads, real max_norm);

// Linear warmup to learning_rate, then inverse-square-root decay, continuous
// at the boundary. step is 1-based.
real lr_at(size_t step, const TrainConfig& cfg);

// Pre-tokenized training item. For QG fine-tuning tgt holds the question ids;
// for denoising tgt is unused and src holds the full sequence to corrupt.
struct TrainItem {
  std::vector<int> src;
  std::vector<int> tgt;
};

std::vector<TrainItem> make_qg_items(const DatasetSplit& split, const Vocab& vocab,
                                     const FormatTemplate& tmpl, size_t max_seq_len);
std::vector<TrainItem> make_denoise_items(const std::vector<AbstractDoc>& docs, const Vocab& vocab,
                                          size_t max_seq_len);

struct TrainCallbacks {
  // called after every step with (step, loss)
  std::function<void(size_t, real)> on_step;
};

// Runs cfg.total_steps - already-completed updates starting from `start`.
// Deterministic: every random draw is keyed on (cfg.seed, step), so resuming
// from an intermediate checkpoint reproduces an uninterrupted run bit-for-bit.
Checkpoint train_loop(Checkpoint start, const std::vector<TrainItem>& data, const TrainConfig& cfg,
                      const Vocab& vocab, const std::string& checkpoint_path = "",
                      const TrainCallbacks& cb = {});

// Teacher-forced token accuracy of the model on QG items (argmax vs target).
real token_accuracy(const Checkpoint& ck, const std::vector<TrainItem>& items, const Vocab& vocab);

// Mean teacher-forced loss over all items, batched, eval mode.
real dataset_loss(const Checkpoint& ck, const std::vector<TrainItem>& items, const Vocab& vocab,
                  size_t batch_size = 16);

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path,
                           std::optional<uint64_t> expected_vocab_hash = std::nullopt);

}  // namespace qg
