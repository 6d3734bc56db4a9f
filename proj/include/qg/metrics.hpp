#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "qg/common.hpp"

namespace qg {

// Lowercase, punctuation separated from words, whitespace split.
std::vector<std::string> tokenize_for_metrics(const std::string& text);

// Cumulative corpus BLEU-1..max_n on the 0-100 scale. Modified n-gram
// precisions with reference clipping, brevity penalty exp(1-r/c) when c < r,
// no smoothing: a zero precision zeroes that order and above.
struct BleuResult {
  std::vector<real> cumulative;   // BLEU-1..max_n
  std::vector<real> precisions;   // raw modified precisions, same orders
  real brevity_penalty = 1;
  size_t hyp_len = 0, ref_len = 0;
};
BleuResult corpus_bleu(const std::vector<std::vector<std::string>>& hyps,
                       const std::vector<std::vector<std::string>>& refs, size_t max_n = 4);

// Lowercase, strip punctuation, drop whole-token articles, whitespace split.
std::vector<std::string> squad_normalize(const std::string& text);

// Token-multiset overlap F1 in [0,1], max over gold references.
real squad_f1(const std::string& pred, const std::vector<std::string>& golds);

// Interpolated Kneser-Ney n-gram model with a single discount.
class NGramLM {
 public:
  // corpus: raw texts, tokenized with tokenize_for_metrics. Tokens seen
  // fewer than min_count times map to UNK.
  static NGramLM train(const std::vector<std::string>& corpus, size_t order, real discount,
                       size_t min_count = 1);
  // Exact uniform model over the given word types (plus UNK and the end
  // symbol); handy as an analytic reference.
  static NGramLM uniform(const std::vector<std::string>& words);

  // ln P(w | context), context = preceding tokens (start-padded internally).
  real log_prob(const std::vector<std::string>& context, const std::string& word) const;

  // exp of mean negative log-probability per token, end symbols included.
  real perplexity(const std::vector<std::string>& texts) const;

  size_t order() const { return order_; }
  size_t vocab_size() const { return vocab_.size(); }
  const std::vector<std::string>& vocab() const { return vocab_; }

  static constexpr const char* kUnk = "<unk>";
  static constexpr const char* kBos = "<s>";
  static constexpr const char* kEos = "</s>";

 private:
  NGramLM() = default;
  std::string map_token(const std::string& t) const;
  real prob(const std::vector<std::string>& ngram, size_t n) const;  // P(w|ctx) at order n

  size_t order_ = 3;
  real discount_ = 0.75;
  bool uniform_ = false;
  std::vector<std::string> vocab_;  // predicted symbols: words + UNK + </s>
  // counts[n] maps space-joined n-gram -> count. Highest order holds raw
  // counts; lower orders hold continuation counts.
  std::vector<std::map<std::string, long long>> counts_;
  // context totals and distinct-continuation counts per order
  std::vector<std::map<std::string, long long>> ctx_total_;
  std::vector<std::map<std::string, long long>> ctx_types_;
  long long unigram_total_ = 0;  // distinct bigram types
  long long unigram_types_ = 0;
};

// |unique n-grams| / |total n-grams| pooled over texts.
real distinct_n(const std::vector<std::string>& texts, size_t n);

// Headline diversity = mean of distinct-1 and distinct-2.
real diversity(const std::vector<std::string>& texts);

struct GrammarRuleSet {
  bool r1_terminal_question_mark = true;
  bool r2_initial_capitalization = true;
  bool r3_duplicate_word = true;
  bool r4_unbalanced_pairs = true;
  bool r5_empty_output = true;

  uint64_t version_hash() const;
};

// Errors flagged by the built-in rules for one text.
int grammar_errors(const std::string& text, const GrammarRuleSet& rules);

// Mean error count per text. When `endpoint` is non-empty, the external
// LanguageTool-style service is queried instead and failures are fatal.
struct GrammarResult {
  real rate = 0;
  std::string backend;  // "rules-v1" or the endpoint URL
};
GrammarResult grammar_error_rate(const std::vector<std::string>& texts, const GrammarRuleSet& rules,
                                 const std::string& endpoint = "");

struct EvalReport {
  std::array<real, 4> bleu{};  // cumulative BLEU-1..4, 0-100
  real f1 = 0;                 // 0-100
  real perplexity = 1;
  real diversity = 0;
  real grammar_error_rate = 0;
  size_t n_examples = 0;
  std::string eval_split_hash;
  std::string decode_config_hash;
  std::string metric_config_hash;
  std::string grammar_backend;
  std::string plan_hash;                 // provenance stamp, optional
  std::vector<real> bleu_precisions;     // per-n modified precisions (logged)
  std::map<std::string, std::string> notes;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
  std::string render_table() const;  // aligned single-report rendering
};

struct MetricConfig {
  size_t bleu_max_n = 4;
  size_t lm_order = 3;
  real lm_discount = 0.75;
  size_t lm_min_count = 1;
  std::string grammar_endpoint;  // empty = built-in rules

  uint64_t config_hash() const;
};

// Full evaluation protocol. BLEU and F1 score hypotheses against gold
// references; perplexity, diversity, and grammar use hypotheses only.
EvalReport evaluate(const std::vector<std::string>& hyps,
                    const std::vector<std::vector<std::string>>& golds, const NGramLM& lm,
                    const GrammarRuleSet& rules, const MetricConfig& mc = {});

}  // namespace qg
