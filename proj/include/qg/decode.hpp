#pragma once

#include <string>
#include <vector>

#include "qg/training.hpp"

namespace qg {

enum class DecodeStrategy { Greedy, Beam, Sample };

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::Beam;
  size_t beam_width = 4;
  size_t max_len = 64;
  real temperature = 1.0;
  size_t top_k = 0;   // 0 disables the filter
  real top_p = 1.0;   // 1 disables the filter
  real length_penalty = 0.6;
  uint64_t seed = 0;

  void validate(size_t max_seq_len) const;
  uint64_t config_hash() const;
};

struct DecodeResult {
  std::vector<int> ids;   // generated ids, EOS stripped
  real logprob = 0;       // sum of token log-probabilities
  std::string text;
  bool sentinel_leak = false;  // output contained a sentinel id
};

// One output per source text. Sources are formatted strings (the checkpoint's
// stored template must already have been applied). Overlong sources raise an
// error listing the offending indices.
std::vector<DecodeResult> generate(const Checkpoint& ck, const Vocab& vocab,
                                   const std::vector<std::string>& source_texts,
                                   const DecodeConfig& cfg);

}  // namespace qg
