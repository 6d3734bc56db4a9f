#pragma once

#include <map>
#include <string>
#include <vector>

#include "qg/tape.hpp"
#include "qg/tensor.hpp"

namespace qg {

struct ModelConfig {
  size_t d_model = 128;
  size_t n_heads = 4;
  size_t n_enc_layers = 2;
  size_t n_dec_layers = 2;
  size_t d_ff = 256;
  size_t vocab_size = 8000;
  size_t max_seq_len = 128;
  real dropout_rate = 0.0;

  void validate() const;
  size_t head_dim() const { return d_model / n_heads; }
};

// Named parameter tensors. std::map keeps iteration order deterministic,
// which the checkpoint layout and optimizer rely on.
struct Parameters {
  std::map<std::string, Tensor> tensors;

  size_t total_size() const {
    size_t n = 0;
    for (const auto& [k, t] : tensors) n += t.size();
    return n;
  }
};

// Scaled-normal init: embedding std d_model^{-1/2}, projections fan-in
// scaled, layer-norm gains 1. Deterministic given seed.
Parameters init_params(const ModelConfig& cfg, uint64_t seed);

// Forward graph handle; keeps the tape alive so callers can run backward.
struct ForwardGraph {
  Tape tape;
  std::map<std::string, Tape::VarId> param_vars;
  Tape::VarId logits = -1;  // [B, tgt_len, vocab]
};

// Encoder-decoder forward. src/tgt_in are ragged id sequences, padded
// internally with pad_id; masks follow: encoder self-attention masks pads,
// decoder self-attention is causal plus pad mask, cross-attention masks
// encoder pads. Dropout only when train_mode.
ForwardGraph forward_graph(const Parameters& params, const ModelConfig& cfg,
                           const std::vector<std::vector<int>>& src,
                           const std::vector<std::vector<int>>& tgt_in, bool train_mode,
                           uint64_t seed, int pad_id, bool with_grad);

Tensor forward(const Parameters& params, const ModelConfig& cfg,
               const std::vector<std::vector<int>>& src,
               const std::vector<std::vector<int>>& tgt_in, bool train_mode, uint64_t seed,
               int pad_id);

// Mean token-level cross-entropy (natural log) over non-pad target positions.
real loss_ce(const Tensor& logits, const std::vector<int>& targets_flat, int pad_id);

struct LossGrads {
  real loss = 0;
  std::map<std::string, Tensor> grads;
};

// Forward + cross-entropy + full backward in one evaluation context.
// tgt_out must be the flat row-major [B, tgt_len] target ids matching the
// padded tgt_in length.
LossGrads loss_and_grads(const Parameters& params, const ModelConfig& cfg,
                         const std::vector<std::vector<int>>& src,
                         const std::vector<std::vector<int>>& tgt_in,
                         const std::vector<int>& tgt_out_flat, bool train_mode, uint64_t seed,
                         int pad_id);

}  // namespace qg
