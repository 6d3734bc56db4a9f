#include "qg/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

namespace qg {

namespace {

// Chunks are maximal runs of whitespace or non-whitespace bytes. Merges
// never cross chunk boundaries; concatenating chunks restores the text.
std::vector<std::string> chunk_text(const std::string& text) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < text.size()) {
    bool ws = std::isspace(static_cast<unsigned char>(text[i])) != 0;
    size_t j = i;
    while (j < text.size() && (std::isspace(static_cast<unsigned char>(text[j])) != 0) == ws) ++j;
    out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string hex_encode(const std::string& s) {
  static const char* d = "0123456789abcdef";
  std::string out;
  out.reserve(s.size() * 2);
  for (unsigned char c : s) {
    out.push_back(d[c >> 4]);
    out.push_back(d[c & 0xf]);
  }
  return out;
}

std::string hex_decode(const std::string& s) {
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw data_error("vocab file: bad hex");
  };
  if (s.size() % 2) throw data_error("vocab file: bad hex length");
  std::string out;
  out.reserve(s.size() / 2);
  for (size_t i = 0; i < s.size(); i += 2)
    out.push_back(static_cast<char>(nib(s[i]) * 16 + nib(s[i + 1])));
  return out;
}

struct PairHash {
  size_t operator()(const std::pair<int, int>& p) const {
    return std::hash<uint64_t>()((uint64_t(uint32_t(p.first)) << 32) | uint32_t(p.second));
  }
};

}  // namespace

uint64_t Vocab::content_hash() const {
  uint64_t h = fnv1a("qgvocab1");
  h = fnv1a(&vocab_size, sizeof(vocab_size), h);
  h = fnv1a(&num_sentinels, sizeof(num_sentinels), h);
  for (const auto& m : merges) {
    h = fnv1a(&m.first, sizeof(m.first), h);
    h = fnv1a(&m.second, sizeof(m.second), h);
  }
  return h;
}

Vocab train_bpe(const std::function<bool(std::string&)>& next_line, size_t vocab_size,
                size_t num_sentinels) {
  size_t base = 3 + 256;
  if (vocab_size <= base + num_sentinels)
    throw config_error("train_bpe: vocab_size must exceed " + std::to_string(base + num_sentinels));

  Vocab v;
  v.vocab_size = vocab_size;
  v.num_sentinels = num_sentinels;
  v.surfaces.assign(vocab_size, std::string());
  for (int b = 0; b < 256; ++b) {
    std::string s(1, static_cast<char>(b));
    v.surfaces[Vocab::kFirstByte + b] = s;
    v.token_to_id[s] = Vocab::kFirstByte + b;
  }

  // chunk -> frequency
  std::unordered_map<std::string, long long> chunk_freq;
  bool any = false;
  std::string line;
  while (next_line(line)) {
    any = true;
    for (auto& c : chunk_text(line)) ++chunk_freq[c];
  }
  if (!any) throw data_error("train_bpe: empty corpus");

  // working symbol sequences
  struct Word {
    std::vector<int> syms;
    long long freq;
  };
  std::vector<Word> words;
  words.reserve(chunk_freq.size());
  // deterministic iteration order
  std::map<std::string, long long> ordered(chunk_freq.begin(), chunk_freq.end());
  for (auto& [chunk, f] : ordered) {
    Word w;
    w.freq = f;
    for (unsigned char c : chunk) w.syms.push_back(Vocab::kFirstByte + c);
    words.push_back(std::move(w));
  }

  size_t max_merges = vocab_size - base - num_sentinels;
  int next_id = v.first_merge_id();
  for (size_t mi = 0; mi < max_merges; ++mi) {
    std::unordered_map<std::pair<int, int>, long long, PairHash> pair_count;
    for (const auto& w : words)
      for (size_t i = 0; i + 1 < w.syms.size(); ++i)
        pair_count[{w.syms[i], w.syms[i + 1]}] += w.freq;

    std::pair<int, int> best{-1, -1};
    long long best_count = 1;  // require count >= 2
    std::string best_surface;
    for (const auto& [p, c] : pair_count) {
      if (c < best_count) continue;
      std::string surf = v.surfaces[p.first] + v.surfaces[p.second];
      if (v.token_to_id.count(surf)) continue;  // keep token_to_id a bijection
      if (c > best_count || (c == best_count && surf < best_surface)) {
        best = p;
        best_count = c;
        best_surface = surf;
      }
    }
    if (best.first < 0) break;

    int id = next_id++;
    v.merges.push_back(best);
    v.surfaces[id] = best_surface;
    v.token_to_id[best_surface] = id;
    for (auto& w : words) {
      auto& s = w.syms;
      for (size_t i = 0; i + 1 < s.size();) {
        if (s[i] == best.first && s[i + 1] == best.second) {
          s[i] = id;
          s.erase(s.begin() + i + 1);
        } else {
          ++i;
        }
      }
    }
  }
  return v;
}

Vocab train_bpe(const std::vector<std::string>& corpus, size_t vocab_size, size_t num_sentinels) {
  size_t i = 0;
  return train_bpe(
      [&](std::string& line) {
        if (i >= corpus.size()) return false;
        line = corpus[i++];
        return true;
      },
      vocab_size, num_sentinels);
}

TokenSeq encode(const Vocab& v, const std::string& text) {
  // merge pair -> (rank, product id)
  std::unordered_map<std::pair<int, int>, std::pair<int, int>, PairHash> rank;
  for (size_t i = 0; i < v.merges.size(); ++i)
    rank[v.merges[i]] = {static_cast<int>(i), v.first_merge_id() + static_cast<int>(i)};

  TokenSeq out;
  for (const auto& chunk : chunk_text(text)) {
    std::vector<int> syms;
    syms.reserve(chunk.size());
    for (unsigned char c : chunk) syms.push_back(Vocab::kFirstByte + c);
    while (syms.size() > 1) {
      int best_rank = -1;
      size_t best_pos = 0;
      for (size_t i = 0; i + 1 < syms.size(); ++i) {
        auto it = rank.find({syms[i], syms[i + 1]});
        if (it != rank.end() && (best_rank < 0 || it->second.first < best_rank)) {
          best_rank = it->second.first;
          best_pos = i;
        }
      }
      if (best_rank < 0) break;
      // apply this merge at every occurrence, left to right
      auto target = v.merges[best_rank];
      int prod = v.first_merge_id() + best_rank;
      for (size_t i = best_pos; i + 1 < syms.size();) {
        if (syms[i] == target.first && syms[i + 1] == target.second) {
          syms[i] = prod;
          syms.erase(syms.begin() + i + 1);
        } else {
          ++i;
        }
      }
    }
    out.ids.insert(out.ids.end(), syms.begin(), syms.end());
  }
  return out;
}

std::string special_marker(const Vocab& v, int id) {
  if (id == Vocab::kPad) return "<pad>";
  if (id == Vocab::kEos) return "</s>";
  if (id == Vocab::kUnk) return "<unk>";
  if (v.is_sentinel(id)) return "⟨X" + std::to_string(v.sentinel_index(id)) + "⟩";
  return "";
}

std::string decode(const Vocab& v, const TokenSeq& seq) {
  std::string out;
  for (int id : seq.ids) {
    if (id < 0 || static_cast<size_t>(id) >= v.vocab_size)
      throw data_error("decode: id " + std::to_string(id) + " out of range for vocab of size " +
                       std::to_string(v.vocab_size));
    if (id < Vocab::kFirstByte || v.is_sentinel(id)) {
      out += special_marker(v, id);
    } else if (!v.surfaces[id].empty()) {
      out += v.surfaces[id];
    } else {
      out += special_marker(v, Vocab::kUnk);  // unused merge slot
    }
  }
  return out;
}

void save_vocab(const Vocab& v, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("save_vocab: cannot open " + path);
  f << "qgvocab v1\n";
  f << "vocab_size " << v.vocab_size << "\n";
  f << "num_sentinels " << v.num_sentinels << "\n";
  f << "specials pad=0 eos=1 unk=2 bytes=3..258\n";
  f << "merges " << v.merges.size() << "\n";
  for (size_t i = 0; i < v.merges.size(); ++i) {
    const auto& m = v.merges[i];
    f << m.first << " " << m.second << " "
      << hex_encode(v.surfaces[v.first_merge_id() + static_cast<int>(i)]) << "\n";
  }
}

Vocab load_vocab(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("load_vocab: cannot open " + path);
  std::string line;
  std::getline(f, line);
  if (line != "qgvocab v1") throw data_error("load_vocab: bad header in " + path);
  Vocab v;
  std::string key;
  size_t n_merges = 0;
  f >> key >> v.vocab_size;
  if (key != "vocab_size") throw data_error("load_vocab: expected vocab_size");
  f >> key >> v.num_sentinels;
  if (key != "num_sentinels") throw data_error("load_vocab: expected num_sentinels");
  f >> key;  // "specials"
  if (key != "specials") throw data_error("load_vocab: expected specials");
  std::getline(f, line);  // the rest of the descriptor line
  f >> key >> n_merges;
  if (key != "merges") throw data_error("load_vocab: expected merges");
  v.surfaces.assign(v.vocab_size, std::string());
  for (int b = 0; b < 256; ++b) {
    std::string s(1, static_cast<char>(b));
    v.surfaces[Vocab::kFirstByte + b] = s;
    v.token_to_id[s] = Vocab::kFirstByte + b;
  }
  for (size_t i = 0; i < n_merges; ++i) {
    int l, r;
    std::string hex;
    if (!(f >> l >> r >> hex)) throw data_error("load_vocab: truncated merges list");
    v.merges.emplace_back(l, r);
    std::string surf = hex_decode(hex);
    int id = v.first_merge_id() + static_cast<int>(i);
    v.surfaces[id] = surf;
    v.token_to_id[surf] = id;
  }
  return v;
}

}  // namespace qg
