#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "qg/common.hpp"

namespace qg {

// Byte-level BPE vocabulary.
//
// Id layout: 0=PAD, 1=EOS, 2=UNK, 3..258 the 256 byte values, then merge
// products, and the top `num_sentinels` ids are the sentinels in descending
// usage order (SENT_0 = vocab_size-1, SENT_1 = vocab_size-2, ...).
// Specials and sentinels are never produced by merges or by encode.
struct Vocab {
  size_t vocab_size = 0;
  size_t num_sentinels = 0;
  // merge i joins token ids (left, right) into id first_merge_id() + i
  std::vector<std::pair<int, int>> merges;
  // surface byte strings for byte + merge tokens, indexed by id
  std::vector<std::string> surfaces;
  std::unordered_map<std::string, int> token_to_id;

  static constexpr int kPad = 0;
  static constexpr int kEos = 1;
  static constexpr int kUnk = 2;
  static constexpr int kFirstByte = 3;

  int pad_id() const { return kPad; }
  int eos_id() const { return kEos; }
  int unk_id() const { return kUnk; }
  int first_merge_id() const { return kFirstByte + 256; }
  int sentinel_id(int k) const { return static_cast<int>(vocab_size) - 1 - k; }
  int first_sentinel_id() const { return static_cast<int>(vocab_size - num_sentinels); }
  bool is_sentinel(int id) const { return id >= first_sentinel_id() && id < static_cast<int>(vocab_size); }
  // SENT_k for a sentinel id
  int sentinel_index(int id) const { return static_cast<int>(vocab_size) - 1 - id; }

  uint64_t content_hash() const;
};

struct TokenSeq {
  std::vector<int> ids;
};

// Greedy highest-frequency pair merging over a byte-level base alphabet.
// Deterministic: ties broken by lexicographic order of the merged pair's
// surface strings. Stops early when no pair occurs at least twice.
Vocab train_bpe(const std::function<bool(std::string&)>& next_line, size_t vocab_size,
                size_t num_sentinels = 100);
Vocab train_bpe(const std::vector<std::string>& corpus, size_t vocab_size,
                size_t num_sentinels = 100);

// Applies merges in training priority order. Never emits specials/sentinels;
// no EOS is appended.
TokenSeq encode(const Vocab& v, const std::string& text);

// Inverse of encode on encode's image. Specials and sentinels render as
// the markers "<pad>", "</s>", "<unk>", "⟨Xk⟩".
std::string decode(const Vocab& v, const TokenSeq& seq);

// Marker text used when decoding special/sentinel ids.
std::string special_marker(const Vocab& v, int id);

void save_vocab(const Vocab& v, const std::string& path);
Vocab load_vocab(const std::string& path);

}  // namespace qg
