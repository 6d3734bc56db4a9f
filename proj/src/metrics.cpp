#include "qg/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace qg {

using json = nlohmann::json;

std::vector<std::string> tokenize_for_metrics(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&]() {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      out.push_back(std::string(1, static_cast<char>(c)));
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

namespace {

const char kSep = '\x1f';

std::string join_key(const std::vector<std::string>& toks, size_t from, size_t n) {
  std::string k;
  for (size_t i = 0; i < n; ++i) {
    if (i) k.push_back(kSep);
    k += toks[from + i];
  }
  return k;
}

std::unordered_map<std::string, long long> ngram_counts(const std::vector<std::string>& toks,
                                                        size_t n) {
  std::unordered_map<std::string, long long> m;
  if (toks.size() < n) return m;
  for (size_t i = 0; i + n <= toks.size(); ++i) ++m[join_key(toks, i, n)];
  return m;
}

}  // namespace

BleuResult corpus_bleu(const std::vector<std::vector<std::string>>& hyps,
                       const std::vector<std::vector<std::string>>& refs, size_t max_n) {
  if (hyps.empty() || hyps.size() != refs.size())
    throw data_error("corpus_bleu: need equal, nonzero hypothesis and reference counts");
  BleuResult r;
  std::vector<long long> num(max_n, 0), den(max_n, 0);
  for (size_t i = 0; i < hyps.size(); ++i) {
    r.hyp_len += hyps[i].size();
    r.ref_len += refs[i].size();
    for (size_t n = 1; n <= max_n; ++n) {
      auto hc = ngram_counts(hyps[i], n);
      auto rc = ngram_counts(refs[i], n);
      for (const auto& [g, c] : hc) {
        auto it = rc.find(g);
        num[n - 1] += std::min(c, it == rc.end() ? 0LL : it->second);
        den[n - 1] += c;
      }
    }
  }
  r.brevity_penalty =
      (r.hyp_len < r.ref_len && r.hyp_len > 0) ? std::exp(1.0 - real(r.ref_len) / real(r.hyp_len)) : 1.0;
  r.precisions.resize(max_n);
  r.cumulative.resize(max_n);
  for (size_t n = 0; n < max_n; ++n)
    r.precisions[n] = den[n] > 0 ? real(num[n]) / real(den[n]) : 0.0;
  for (size_t n = 0; n < max_n; ++n) {
    bool zero = false;
    real logsum = 0;
    for (size_t i = 0; i <= n; ++i) {
      if (r.precisions[i] <= 0) {
        zero = true;
        break;
      }
      logsum += std::log(r.precisions[i]);
    }
    r.cumulative[n] = zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(logsum / real(n + 1));
  }
  return r;
}

std::vector<std::string> squad_normalize(const std::string& text) {
  std::string lowered;
  lowered.reserve(text.size());
  for (unsigned char c : text) {
    if (std::ispunct(c)) continue;  // punctuation stripped, not separated
    lowered.push_back(static_cast<char>(std::tolower(c)));
  }
  std::vector<std::string> out;
  std::istringstream is(lowered);
  std::string tok;
  while (is >> tok)
    if (tok != "a" && tok != "an" && tok != "the") out.push_back(tok);
  return out;
}

real squad_f1(const std::string& pred, const std::vector<std::string>& golds) {
  if (golds.empty()) throw data_error("squad_f1: no gold references");
  auto p = squad_normalize(pred);
  std::unordered_map<std::string, long long> pc;
  for (const auto& t : p) ++pc[t];
  real best = 0;
  for (const auto& gold : golds) {
    auto g = squad_normalize(gold);
    real f1;
    if (p.empty() && g.empty()) {
      f1 = 1;
    } else if (p.empty() || g.empty()) {
      f1 = 0;
    } else {
      std::unordered_map<std::string, long long> gc;
      for (const auto& t : g) ++gc[t];
      long long common = 0;
      for (const auto& [t, c] : pc) {
        auto it = gc.find(t);
        if (it != gc.end()) common += std::min(c, it->second);
      }
      if (common == 0) {
        f1 = 0;
      } else {
        real prec = real(common) / real(p.size());
        real rec = real(common) / real(g.size());
        f1 = 2 * prec * rec / (prec + rec);
      }
    }
    best = std::max(best, f1);
  }
  return best;
}

// ---- Kneser-Ney LM --------------------------------------------------------

std::string NGramLM::map_token(const std::string& t) const {
  if (std::binary_search(vocab_.begin(), vocab_.end(), t)) return t;
  return kUnk;
}

NGramLM NGramLM::train(const std::vector<std::string>& corpus, size_t order, real discount,
                       size_t min_count) {
  if (corpus.empty()) throw data_error("train_ngram_lm: empty corpus");
  if (order < 1) throw config_error("train_ngram_lm: order must be >= 1");
  if (discount <= 0 || discount >= 1) throw config_error("train_ngram_lm: discount in (0,1)");

  NGramLM lm;
  lm.order_ = order;
  lm.discount_ = discount;

  std::vector<std::vector<std::string>> sents;
  std::unordered_map<std::string, long long> freq;
  for (const auto& text : corpus) {
    auto toks = tokenize_for_metrics(text);
    for (const auto& t : toks) ++freq[t];
    sents.push_back(std::move(toks));
  }
  std::set<std::string> vocab_set{kUnk, kEos};
  for (const auto& [t, c] : freq)
    if (static_cast<size_t>(c) >= min_count) vocab_set.insert(t);
  lm.vocab_.assign(vocab_set.begin(), vocab_set.end());

  // padded, UNK-mapped sentences
  for (auto& s : sents) {
    for (auto& t : s)
      if (!std::binary_search(lm.vocab_.begin(), lm.vocab_.end(), t)) t = kUnk;
    s.push_back(kEos);
    s.insert(s.begin(), order - 1, kBos);
  }

  lm.counts_.assign(order + 1, {});
  lm.ctx_total_.assign(order + 1, {});
  lm.ctx_types_.assign(order + 1, {});

  // highest order: raw counts (order 1 uses continuation counts only)
  if (order > 1) {
    for (const auto& s : sents) {
      for (size_t i = 0; i + order <= s.size(); ++i) {
        std::string g = join_key(s, i, order);
        ++lm.counts_[order][g];
        ++lm.ctx_total_[order][join_key(s, i, order - 1)];
      }
    }
    for (const auto& [g, c] : lm.counts_[order]) {
      std::string ctx = g.substr(0, g.rfind(kSep));
      ++lm.ctx_types_[order][ctx];
    }
  }

  // lower orders: continuation counts from distinct (n+1)-gram types.
  // All-BOS windows produce suffixes ending in the start symbol, which is
  // never predicted; keeping them would leak probability mass, so they are
  // skipped. For order 1 the continuation statistics come from bigrams over
  // sentences padded with a single start symbol.
  auto ends_with_bos = [](const std::string& g) {
    size_t p = g.rfind(kSep);
    return (p == std::string::npos ? g : g.substr(p + 1)) == kBos;
  };
  std::vector<std::vector<std::string>> cont_sents = sents;
  if (order == 1)
    for (auto& s : cont_sents) s.insert(s.begin(), kBos);
  for (size_t n = std::max<size_t>(order, 2) - 1; n >= 1; --n) {
    std::set<std::string> types_np1;
    for (const auto& s : cont_sents)
      for (size_t i = 0; i + n + 1 <= s.size(); ++i) types_np1.insert(join_key(s, i, n + 1));
    for (const auto& g : types_np1) {
      std::string suffix = g.substr(g.find(kSep) + 1);  // drop the left word
      if (ends_with_bos(suffix)) continue;
      ++lm.counts_[n][suffix];
    }
    if (n == 1) {
      lm.unigram_total_ = 0;
      for (const auto& [g, c] : lm.counts_[1]) lm.unigram_total_ += c;
      lm.unigram_types_ = static_cast<long long>(lm.counts_[1].size());
    } else {
      for (const auto& [g, c] : lm.counts_[n]) {
        std::string ctx = g.substr(0, g.rfind(kSep));
        lm.ctx_total_[n][ctx] += c;
        ++lm.ctx_types_[n][ctx];
      }
    }
    if (n == 1) break;
  }
  return lm;
}

NGramLM NGramLM::uniform(const std::vector<std::string>& words) {
  NGramLM lm;
  lm.order_ = 1;
  lm.uniform_ = true;
  std::set<std::string> vs{kUnk, kEos};
  for (const auto& w : words) vs.insert(w);
  lm.vocab_.assign(vs.begin(), vs.end());
  return lm;
}

real NGramLM::prob(const std::vector<std::string>& ngram, size_t n) const {
  real V = real(vocab_.size());
  if (uniform_) return 1.0 / V;
  const std::string& w = ngram.back();
  if (n == 1) {
    auto it = counts_[1].find(w);
    long long cc = it == counts_[1].end() ? 0 : it->second;
    real num = std::max(real(cc) - discount_, real(0)) +
               discount_ * real(unigram_types_) / V;
    return num / real(unigram_total_);
  }
  std::string ctx = join_key(ngram, ngram.size() - n, n - 1);
  auto tot_it = ctx_total_[n].find(ctx);
  std::vector<std::string> shorter(ngram.end() - static_cast<long>(n) + 1, ngram.end());
  if (tot_it == ctx_total_[n].end() || tot_it->second == 0) return prob(shorter, n - 1);
  std::string g = join_key(ngram, ngram.size() - n, n);
  auto cit = counts_[n].find(g);
  long long cnt = cit == counts_[n].end() ? 0 : cit->second;
  long long types = ctx_types_[n].at(ctx);
  real lower = prob(shorter, n - 1);
  return (std::max(real(cnt) - discount_, real(0)) + discount_ * real(types) * lower) /
         real(tot_it->second);
}

real NGramLM::log_prob(const std::vector<std::string>& context, const std::string& word) const {
  std::vector<std::string> ngram;
  size_t need = order_ - 1;
  for (size_t i = context.size() >= need ? context.size() - need : 0; i < context.size(); ++i)
    ngram.push_back(map_token(context[i]));
  while (ngram.size() < need) ngram.insert(ngram.begin(), kBos);
  ngram.push_back(word == kEos ? word : map_token(word));
  return std::log(prob(ngram, order_));
}

real NGramLM::perplexity(const std::vector<std::string>& texts) const {
  if (texts.empty()) throw data_error("perplexity: no texts");
  real nll = 0;
  size_t n_tok = 0;
  for (const auto& text : texts) {
    auto toks = tokenize_for_metrics(text);
    std::vector<std::string> ctx;
    for (const auto& t : toks) {
      nll -= log_prob(ctx, t);
      ctx.push_back(t);
      ++n_tok;
    }
    nll -= log_prob(ctx, kEos);
    ++n_tok;
  }
  return std::exp(nll / real(n_tok));
}

// ---- diversity ------------------------------------------------------------

real distinct_n(const std::vector<std::string>& texts, size_t n) {
  std::set<std::string> uniq;
  long long total = 0;
  for (const auto& text : texts) {
    auto toks = tokenize_for_metrics(text);
    if (toks.size() < n) continue;
    for (size_t i = 0; i + n <= toks.size(); ++i) {
      uniq.insert(join_key(toks, i, n));
      ++total;
    }
  }
  if (total == 0) throw data_error("distinct_n: no n-grams in input");
  return real(uniq.size()) / real(total);
}

real diversity(const std::vector<std::string>& texts) {
  return 0.5 * (distinct_n(texts, 1) + distinct_n(texts, 2));
}

// ---- grammar --------------------------------------------------------------

uint64_t GrammarRuleSet::version_hash() const {
  std::string s = "rules-v1|";
  for (bool b : {r1_terminal_question_mark, r2_initial_capitalization, r3_duplicate_word,
                 r4_unbalanced_pairs, r5_empty_output})
    s += b ? '1' : '0';
  return fnv1a(s);
}

int grammar_errors(const std::string& text, const GrammarRuleSet& rules) {
  std::string trimmed;
  {
    size_t a = 0, b = text.size();
    while (a < b && std::isspace(static_cast<unsigned char>(text[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(text[b - 1]))) --b;
    trimmed = text.substr(a, b - a);
  }
  if (trimmed.empty()) return rules.r5_empty_output ? 1 : 0;

  int errors = 0;
  if (rules.r1_terminal_question_mark && trimmed.back() != '?') ++errors;
  if (rules.r2_initial_capitalization) {
    for (unsigned char c : trimmed) {
      if (std::isalpha(c)) {
        if (!std::isupper(c)) ++errors;
        break;
      }
    }
  }
  if (rules.r3_duplicate_word) {
    auto toks = tokenize_for_metrics(trimmed);
    for (size_t i = 0; i + 1 < toks.size(); ++i) {
      if (toks[i] == toks[i + 1] && std::isalnum(static_cast<unsigned char>(toks[i][0]))) {
        ++errors;
        break;
      }
    }
  }
  if (rules.r4_unbalanced_pairs) {
    int paren = 0, bracket = 0, brace = 0, quotes = 0;
    bool neg = false;
    for (char c : trimmed) {
      if (c == '(') ++paren;
      if (c == ')') --paren;
      if (c == '[') ++bracket;
      if (c == ']') --bracket;
      if (c == '{') ++brace;
      if (c == '}') --brace;
      if (c == '"') ++quotes;
      if (paren < 0 || bracket < 0 || brace < 0) neg = true;
    }
    if (paren != 0 || bracket != 0 || brace != 0 || quotes % 2 != 0 || neg) ++errors;
  }
  return errors;
}

// defined in grammar_client.cpp
int external_grammar_matches(const std::string& endpoint, const std::string& text);

GrammarResult grammar_error_rate(const std::vector<std::string>& texts, const GrammarRuleSet& rules,
                                 const std::string& endpoint) {
  if (texts.empty()) throw data_error("grammar_error_rate: no texts");
  GrammarResult r;
  long long total = 0;
  if (endpoint.empty()) {
    for (const auto& t : texts) total += grammar_errors(t, rules);
    r.backend = "rules-v1";
  } else {
    for (const auto& t : texts) total += external_grammar_matches(endpoint, t);
    r.backend = endpoint;
  }
  r.rate = real(total) / real(texts.size());
  return r;
}

// ---- report ---------------------------------------------------------------

uint64_t MetricConfig::config_hash() const {
  std::string s = "metrics-v1|" + std::to_string(bleu_max_n) + "|" + std::to_string(lm_order) +
                  "|" + std::to_string(lm_discount) + "|" + std::to_string(lm_min_count) + "|" +
                  grammar_endpoint;
  return fnv1a(s);
}

std::string EvalReport::to_json() const {
  json j;
  j["bleu1"] = bleu[0];
  j["bleu2"] = bleu[1];
  j["bleu3"] = bleu[2];
  j["bleu4"] = bleu[3];
  j["f1"] = f1;
  j["perplexity"] = perplexity;
  j["diversity"] = diversity;
  j["grammar_error_rate"] = grammar_error_rate;
  j["n_examples"] = n_examples;
  j["eval_split_hash"] = eval_split_hash;
  j["decode_config_hash"] = decode_config_hash;
  j["metric_config_hash"] = metric_config_hash;
  j["grammar_backend"] = grammar_backend;
  j["plan_hash"] = plan_hash;
  j["bleu_precisions"] = bleu_precisions;
  j["notes"] = notes;
  return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw data_error(std::string("EvalReport: malformed json: ") + e.what());
  }
  EvalReport r;
  r.bleu[0] = j.at("bleu1");
  r.bleu[1] = j.at("bleu2");
  r.bleu[2] = j.at("bleu3");
  r.bleu[3] = j.at("bleu4");
  r.f1 = j.at("f1");
  r.perplexity = j.at("perplexity");
  r.diversity = j.at("diversity");
  r.grammar_error_rate = j.at("grammar_error_rate");
  r.n_examples = j.at("n_examples");
  r.eval_split_hash = j.at("eval_split_hash");
  r.decode_config_hash = j.value("decode_config_hash", "");
  r.metric_config_hash = j.value("metric_config_hash", "");
  r.grammar_backend = j.value("grammar_backend", "");
  r.plan_hash = j.value("plan_hash", "");
  if (j.contains("bleu_precisions"))
    r.bleu_precisions = j.at("bleu_precisions").get<std::vector<real>>();
  if (j.contains("notes"))
    r.notes = j.at("notes").get<std::map<std::string, std::string>>();
  return r;
}

std::string EvalReport::render_table() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << "BLEU-1 \xE2\x86\x91  BLEU-2 \xE2\x86\x91  BLEU-3 \xE2\x86\x91  BLEU-4 \xE2\x86\x91  "
     << "F1-Score \xE2\x86\x91  Perplexity \xE2\x86\x93  Diversity \xE2\x86\x91  Grammar Errors \xE2\x86\x93\n";
  os << bleu[0] << "    " << bleu[1] << "    " << bleu[2] << "    " << bleu[3] << "    " << f1
     << "      " << perplexity << "       " << diversity << "       " << grammar_error_rate << "\n";
  return os.str();
}

EvalReport evaluate(const std::vector<std::string>& hyps,
                    const std::vector<std::vector<std::string>>& golds, const NGramLM& lm,
                    const GrammarRuleSet& rules, const MetricConfig& mc) {
  if (hyps.empty() || hyps.size() != golds.size())
    throw data_error("evaluate: need equal, nonzero hypothesis and gold counts");
  EvalReport r;
  r.n_examples = hyps.size();

  std::vector<std::vector<std::string>> htoks, rtoks;
  for (size_t i = 0; i < hyps.size(); ++i) {
    if (golds[i].empty()) throw data_error("evaluate: empty gold list at index " + std::to_string(i));
    htoks.push_back(tokenize_for_metrics(hyps[i]));
    rtoks.push_back(tokenize_for_metrics(golds[i][0]));  // single-reference BLEU
  }
  BleuResult b = corpus_bleu(htoks, rtoks, mc.bleu_max_n);
  for (size_t n = 0; n < 4 && n < b.cumulative.size(); ++n) r.bleu[n] = b.cumulative[n];
  r.bleu_precisions = b.precisions;

  real f1sum = 0;
  for (size_t i = 0; i < hyps.size(); ++i) f1sum += squad_f1(hyps[i], golds[i]);
  r.f1 = 100.0 * f1sum / real(hyps.size());

  r.perplexity = lm.perplexity(hyps);
  r.diversity = diversity(hyps);
  GrammarResult g = grammar_error_rate(hyps, rules, mc.grammar_endpoint);
  r.grammar_error_rate = g.rate;
  r.grammar_backend = g.backend;
  r.metric_config_hash = hash_hex(mc.config_hash());
  r.notes["f1_interpretation"] = "token-overlap f1 on (generated question, gold question) pairs";
  r.notes["diversity_definition"] = "mean of distinct-1 and distinct-2";
  r.notes["perplexity_model"] = "interpolated kneser-ney, order " + std::to_string(lm.order());
  r.notes["grammar_rules_version"] = hash_hex(rules.version_hash());
  return r;
}

}  // namespace qg
