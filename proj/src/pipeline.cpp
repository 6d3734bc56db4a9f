#include "qg/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace qg {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json train_to_json(const TrainConfig& t) {
  return json{{"learning_rate", t.learning_rate}, {"warmup_steps", t.warmup_steps},
              {"total_steps", t.total_steps},     {"batch_size", t.batch_size},
              {"clip_norm", t.clip_norm},         {"weight_decay", t.weight_decay},
              {"mask_ratio", t.mask_ratio},       {"mean_span_len", t.mean_span_len},
              {"checkpoint_interval", t.checkpoint_interval}};
}

TrainConfig train_from_json(const json& j, Objective obj) {
  TrainConfig t;
  t.objective = obj;
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.warmup_steps = j.value("warmup_steps", t.warmup_steps);
  t.total_steps = j.value("total_steps", t.total_steps);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.clip_norm = j.value("clip_norm", t.clip_norm);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.mask_ratio = j.value("mask_ratio", t.mask_ratio);
  t.mean_span_len = j.value("mean_span_len", t.mean_span_len);
  t.checkpoint_interval = j.value("checkpoint_interval", t.checkpoint_interval);
  return t;
}

json model_to_json(const ModelConfig& m) {
  return json{{"d_model", m.d_model},           {"n_heads", m.n_heads},
              {"n_enc_layers", m.n_enc_layers}, {"n_dec_layers", m.n_dec_layers},
              {"d_ff", m.d_ff},                 {"vocab_size", m.vocab_size},
              {"max_seq_len", m.max_seq_len},   {"dropout_rate", m.dropout_rate}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.d_model = j.value("d_model", m.d_model);
  m.n_heads = j.value("n_heads", m.n_heads);
  m.n_enc_layers = j.value("n_enc_layers", m.n_enc_layers);
  m.n_dec_layers = j.value("n_dec_layers", m.n_dec_layers);
  m.d_ff = j.value("d_ff", m.d_ff);
  m.vocab_size = j.value("vocab_size", m.vocab_size);
  m.max_seq_len = j.value("max_seq_len", m.max_seq_len);
  m.dropout_rate = j.value("dropout_rate", m.dropout_rate);
  return m;
}

DecodeStrategy strategy_from_string(const std::string& s) {
  if (s == "greedy") return DecodeStrategy::Greedy;
  if (s == "beam") return DecodeStrategy::Beam;
  if (s == "sample") return DecodeStrategy::Sample;
  throw config_error("unknown decode strategy: " + s);
}

std::string strategy_to_string(DecodeStrategy s) {
  switch (s) {
    case DecodeStrategy::Greedy: return "greedy";
    case DecodeStrategy::Beam: return "beam";
    case DecodeStrategy::Sample: return "sample";
  }
  return "beam";
}

}  // namespace

void ExperimentPlan::validate() const {
  if (variant != "baseline" && variant != "eduqg")
    throw config_error("plan: variant must be 'baseline' or 'eduqg'");
  if (variant == "eduqg" && !pretrain)
    throw config_error("plan: variant 'eduqg' requires a pretrain stage");
  if (variant == "baseline" && pretrain)
    throw config_error("plan: variant 'baseline' must not carry a pretrain stage");
  if (finetune_format != "squad" && finetune_format != "sciq")
    throw config_error("plan: finetune_format must be 'squad' or 'sciq'");
  if (eval_format != "squad" && eval_format != "sciq")
    throw config_error("plan: eval_format must be 'squad' or 'sciq'");
  if (output_dir.empty()) throw config_error("plan: output_dir is required");
  model.validate();
}

std::string ExperimentPlan::to_json() const {
  json j;
  j["variant"] = variant;
  if (pretrain) {
    json p;
    p["corpus"] = pretrain->corpus_path;
    p["fields"] = std::vector<std::string>(pretrain->fields.begin(), pretrain->fields.end());
    p["downsample_n"] = pretrain->downsample_n;
    p["train"] = train_to_json(pretrain->train);
    j["pretrain"] = std::move(p);
  }
  j["finetune"] = {{"split", finetune_path},
                   {"format", finetune_format},
                   {"strict_span", finetune_strict_span},
                   {"train", train_to_json(finetune_train)}};
  j["eval"] = {{"split", eval_path}, {"format", eval_format}, {"limit", eval_limit}};
  j["model"] = model_to_json(model);
  j["tokenizer"] = {{"train_on", tokenizer.train_on},
                    {"vocab_size", tokenizer.vocab_size},
                    {"num_sentinels", tokenizer.num_sentinels},
                    {"vocab_file", tokenizer.vocab_file}};
  j["decode"] = {{"strategy", strategy_to_string(decode.strategy)},
                 {"beam_width", decode.beam_width},
                 {"max_len", decode.max_len},
                 {"temperature", decode.temperature},
                 {"top_k", decode.top_k},
                 {"top_p", decode.top_p},
                 {"length_penalty", decode.length_penalty},
                 {"seed", decode.seed}};
  j["metrics"] = {{"bleu_max_n", metrics.bleu_max_n},
                  {"lm_order", metrics.lm_order},
                  {"lm_discount", metrics.lm_discount},
                  {"lm_min_count", metrics.lm_min_count},
                  {"grammar_endpoint", metrics.grammar_endpoint}};
  j["output_dir"] = output_dir;
  j["seed"] = seed;
  j["shared_finetune_order"] = shared_finetune_order;
  j["template"] = template_name;
  return j.dump(2) + "\n";
}

ExperimentPlan ExperimentPlan::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw config_error(std::string("plan: malformed json: ") + e.what());
  }
  ExperimentPlan p;
  p.variant = j.at("variant");
  if (j.contains("pretrain") && !j["pretrain"].is_null()) {
    PretrainSpec ps;
    ps.corpus_path = j["pretrain"].at("corpus");
    for (const auto& f : j["pretrain"].value("fields", json::array()))
      ps.fields.insert(f.get<std::string>());
    ps.downsample_n = j["pretrain"].value("downsample_n", size_t(0));
    ps.train = train_from_json(j["pretrain"].value("train", json::object()), Objective::Denoise);
    p.pretrain = std::move(ps);
  }
  const auto& ft = j.at("finetune");
  p.finetune_path = ft.at("split");
  p.finetune_format = ft.value("format", "squad");
  p.finetune_strict_span = ft.value("strict_span", false);
  p.finetune_train = train_from_json(ft.value("train", json::object()), Objective::QGFinetune);
  const auto& ev = j.at("eval");
  p.eval_path = ev.at("split");
  p.eval_format = ev.value("format", "sciq");
  p.eval_limit = ev.value("limit", size_t(0));
  p.model = model_from_json(j.value("model", json::object()));
  if (j.contains("tokenizer")) {
    const auto& tk = j["tokenizer"];
    p.tokenizer.train_on = tk.value("train_on", std::vector<std::string>{});
    p.tokenizer.vocab_size = tk.value("vocab_size", p.tokenizer.vocab_size);
    p.tokenizer.num_sentinels = tk.value("num_sentinels", p.tokenizer.num_sentinels);
    p.tokenizer.vocab_file = tk.value("vocab_file", "");
  }
  if (j.contains("decode")) {
    const auto& d = j["decode"];
    p.decode.strategy = strategy_from_string(d.value("strategy", "beam"));
    p.decode.beam_width = d.value("beam_width", p.decode.beam_width);
    p.decode.max_len = d.value("max_len", p.decode.max_len);
    p.decode.temperature = d.value("temperature", p.decode.temperature);
    p.decode.top_k = d.value("top_k", p.decode.top_k);
    p.decode.top_p = d.value("top_p", p.decode.top_p);
    p.decode.length_penalty = d.value("length_penalty", p.decode.length_penalty);
    p.decode.seed = d.value("seed", p.decode.seed);
  }
  if (j.contains("metrics")) {
    const auto& m = j["metrics"];
    p.metrics.bleu_max_n = m.value("bleu_max_n", p.metrics.bleu_max_n);
    p.metrics.lm_order = m.value("lm_order", p.metrics.lm_order);
    p.metrics.lm_discount = m.value("lm_discount", p.metrics.lm_discount);
    p.metrics.lm_min_count = m.value("lm_min_count", p.metrics.lm_min_count);
    p.metrics.grammar_endpoint = m.value("grammar_endpoint", "");
  }
  p.output_dir = j.at("output_dir");
  p.seed = j.value("seed", uint64_t(0));
  p.shared_finetune_order = j.value("shared_finetune_order", true);
  p.template_name = j.value("template", "qg-v1");
  p.validate();
  return p;
}

ExperimentPlan ExperimentPlan::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw config_error("plan: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_json(ss.str());
}

uint64_t ExperimentPlan::plan_hash() const { return fnv1a(to_json()); }

namespace {

std::vector<std::string> tokenizer_corpus_lines(const std::string& path) {
  std::vector<std::string> lines;
  if (path.size() > 6 && path.substr(path.size() - 6) == ".jsonl") {
    AbstractReader reader(path);
    while (auto doc = reader.next()) lines.push_back(doc->text);
    return lines;
  }
  // squad- or sciq-shaped: pull contexts, answers and questions
  std::ifstream f(path);
  if (!f) throw data_error("tokenizer corpus: cannot open " + path);
  json j;
  f >> j;
  if (j.is_object() && j.contains("data")) {
    DatasetSplit s = load_squad_format(path, false);
    for (const auto& ex : s.examples) {
      lines.push_back(ex.context);
      lines.push_back(ex.answer);
      lines.push_back(ex.question);
    }
  } else {
    DatasetSplit s = load_sciq_format(path);
    for (const auto& ex : s.examples) {
      lines.push_back(ex.context);
      lines.push_back(ex.answer);
      lines.push_back(ex.question);
    }
  }
  return lines;
}

DatasetSplit load_split(const std::string& path, const std::string& format, bool strict_span) {
  return format == "squad" ? load_squad_format(path, strict_span) : load_sciq_format(path);
}

// Held while an arm writes into its output directory.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    std::ofstream probe(path_, std::ios::out | std::ios::app);
    if (fs::exists(path_) && fs::file_size(path_) > 0)
      throw runtime_error("output directory " + dir.string() + " is locked by another writer");
    std::ofstream f(path_);
    f << "locked\n";
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
};

}  // namespace

RunArtifacts run_experiment(const ExperimentPlan& plan,
                            const std::function<void(const std::string&)>& log) {
  plan.validate();
  auto say = [&](const std::string& m) {
    if (log) log(m);
  };
  std::string stage = "setup";
  try {
    fs::path out(plan.output_dir);
    DirLock lock(out);
    RunArtifacts art;
    std::string plan_hex = hash_hex(plan.plan_hash());
    {
      std::ofstream pf(out / "plan.json");
      pf << plan.to_json();
    }

    stage = "tokenizer";
    Vocab vocab;
    std::string vocab_path = plan.tokenizer.vocab_file.empty()
                                 ? (out / "vocab.txt").string()
                                 : plan.tokenizer.vocab_file;
    if (fs::exists(vocab_path)) {
      vocab = load_vocab(vocab_path);
      say("tokenizer: loaded " + vocab_path);
    } else {
      std::vector<std::string> lines;
      std::vector<std::string> sources =
          plan.tokenizer.train_on.empty() ? std::vector<std::string>{plan.finetune_path}
                                          : plan.tokenizer.train_on;
      for (const auto& p : sources) {
        auto l = tokenizer_corpus_lines(p);
        lines.insert(lines.end(), l.begin(), l.end());
      }
      vocab = train_bpe(lines, plan.tokenizer.vocab_size, plan.tokenizer.num_sentinels);
      save_vocab(vocab, vocab_path);
      say("tokenizer: trained " + std::to_string(vocab.vocab_size) + "-token vocab -> " + vocab_path);
    }
    art.vocab_path = vocab_path;
    ModelConfig mcfg = plan.model;
    mcfg.vocab_size = vocab.vocab_size;

    FormatTemplate tmpl = make_template(plan.template_name);
    uint64_t init_seed = derive_seed(plan.seed, "init");
    Checkpoint ck = fresh_checkpoint(mcfg, init_seed, vocab.content_hash(), tmpl);

    if (plan.variant == "eduqg") {
      stage = "pretrain";
      const PretrainSpec& ps = *plan.pretrain;
      AbstractReader reader(ps.corpus_path);
      auto next_filtered = [&]() -> std::optional<AbstractDoc> {
        while (auto d = reader.next()) {
          if (ps.fields.empty() || field_match(*d, ps.fields)) return d;
        }
        return std::nullopt;
      };
      std::vector<AbstractDoc> docs;
      uint64_t sample_seed = derive_seed(plan.seed, "downsample");
      if (ps.downsample_n > 0) {
        docs = downsample(next_filtered, ps.downsample_n, sample_seed);
      } else {
        while (auto d = next_filtered()) docs.push_back(std::move(*d));
      }
      if (docs.empty()) throw data_error("pretrain corpus is empty after filtering");
      say("pretrain: " + std::to_string(docs.size()) + " abstracts");
      auto items = make_denoise_items(docs, vocab, mcfg.max_seq_len);
      TrainConfig tc = ps.train;
      tc.objective = Objective::Denoise;
      tc.seed = derive_seed(plan.seed, "pretrain");
      art.pretrain_ckpt = (out / "post_pretrain.ckpt").string();
      ck = train_loop(std::move(ck), items, tc, vocab, art.pretrain_ckpt);
      say("pretrain: done, " + std::to_string(tc.total_steps) + " steps");
      // fine-tuning starts a fresh optimizer over the pretrained parameters
      Checkpoint next = fresh_checkpoint(mcfg, init_seed, vocab.content_hash(), tmpl);
      next.params = std::move(ck.params);
      ck = std::move(next);
    }

    stage = "finetune";
    DatasetSplit ft = load_split(plan.finetune_path, plan.finetune_format, plan.finetune_strict_span);
    if (ft.examples.empty()) throw data_error("fine-tune split is empty");
    auto ft_items = make_qg_items(ft, vocab, tmpl, mcfg.max_seq_len);
    TrainConfig tc = plan.finetune_train;
    tc.objective = Objective::QGFinetune;
    tc.seed = plan.shared_finetune_order ? derive_seed(plan.seed, "finetune")
                                         : derive_seed(plan.seed, "finetune:" + plan.variant);
    art.finetune_ckpt = (out / "post_finetune.ckpt").string();
    ck = train_loop(std::move(ck), ft_items, tc, vocab, art.finetune_ckpt);
    say("finetune: done, " + std::to_string(tc.total_steps) + " steps on " +
        std::to_string(ft_items.size()) + " examples");

    stage = "generate";
    DatasetSplit ev = load_split(plan.eval_path, plan.eval_format, false);
    if (plan.eval_limit > 0 && ev.examples.size() > plan.eval_limit)
      ev.examples.resize(plan.eval_limit);
    if (ev.examples.empty()) throw data_error("eval split is empty");
    std::vector<std::string> sources;
    for (const auto& ex : ev.examples) sources.push_back(format_example(ex, tmpl, false).first);
    auto results = generate(ck, vocab, sources, plan.decode);
    art.generated_path = (out / "generated.jsonl").string();
    {
      std::ofstream gf(art.generated_path);
      gf << json{{"plan_hash", plan_hex},
                 {"decode_config_hash", hash_hex(plan.decode.config_hash())}}
                .dump()
         << "\n";
      for (size_t i = 0; i < results.size(); ++i) {
        gf << json{{"id", ev.examples[i].id},
                   {"source_hash", hash_hex(fnv1a(sources[i]))},
                   {"question", results[i].text}}
                  .dump()
           << "\n";
      }
    }
    say("generate: " + std::to_string(results.size()) + " questions");

    stage = "evaluate";
    std::vector<std::string> hyps;
    std::vector<std::vector<std::string>> golds;
    std::vector<std::string> gold_texts;
    for (size_t i = 0; i < results.size(); ++i) {
      hyps.push_back(results[i].text);
      golds.push_back({ev.examples[i].question});
      gold_texts.push_back(ev.examples[i].question);
    }
    // reference model fixed across arms: trained on the eval split's golds
    NGramLM lm = NGramLM::train(gold_texts, plan.metrics.lm_order, plan.metrics.lm_discount,
                                plan.metrics.lm_min_count);
    GrammarRuleSet rules;
    EvalReport rep = evaluate(hyps, golds, lm, rules, plan.metrics);
    rep.eval_split_hash = hash_hex(ev.content_hash());
    rep.decode_config_hash = hash_hex(plan.decode.config_hash());
    rep.plan_hash = plan_hex;
    art.report = rep;
    art.report_path = (out / "report.json").string();
    {
      std::ofstream rf(art.report_path);
      rf << rep.to_json();
      std::ofstream tf(out / "report.txt");
      tf << "plan " << plan_hex << " variant " << plan.variant << "\n" << rep.render_table();
    }
    say("evaluate: report -> " + art.report_path);
    return art;
  } catch (const Error& e) {
    throw Error(e.kind(), "stage '" + stage + "' failed: " + e.what());
  } catch (const std::exception& e) {
    throw runtime_error("stage '" + stage + "' failed: " + e.what());
  }
}

Comparison compare(const EvalReport& a, const EvalReport& b, const std::string& name_a,
                   const std::string& name_b) {
  if (a.eval_split_hash != b.eval_split_hash)
    throw data_error("compare: reports come from different eval splits (" + a.eval_split_hash +
                     " vs " + b.eval_split_hash + ")");
  if (a.plan_hash.empty() || b.plan_hash.empty())
    throw data_error("compare: report missing plan hash provenance");
  Comparison c;
  c.name_a = name_a;
  c.name_b = name_b;
  auto col = [&](const std::string& n, bool hi, real va, real vb) {
    ComparisonColumn cc{n, hi, va, vb, 0};
    if (va != vb) {
      bool a_wins = hi ? va > vb : va < vb;
      cc.better = a_wins ? -1 : 1;
    }
    c.columns.push_back(cc);
  };
  col("BLEU-1", true, a.bleu[0], b.bleu[0]);
  col("BLEU-2", true, a.bleu[1], b.bleu[1]);
  col("BLEU-3", true, a.bleu[2], b.bleu[2]);
  col("BLEU-4", true, a.bleu[3], b.bleu[3]);
  col("F1-Score", true, a.f1, b.f1);
  col("Perplexity", false, a.perplexity, b.perplexity);
  col("Diversity", true, a.diversity, b.diversity);
  col("Grammar Errors", false, a.grammar_error_rate, b.grammar_error_rate);
  return c;
}

std::string Comparison::render_text() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  auto cell = [&](real v, bool mark) {
    std::ostringstream c;
    c.setf(std::ios::fixed);
    c.precision(3);
    c << v;
    std::string s = c.str();
    if (mark) s = "*" + s + "*";
    return s;
  };
  size_t name_w = std::max(name_a.size(), std::max(name_b.size(), size_t(5)));
  os << std::left << std::setw(static_cast<int>(name_w) + 2) << "Model";
  for (const auto& col : columns)
    os << std::setw(16) << (col.name + std::string(" ") + (col.higher_better ? "\xE2\x86\x91" : "\xE2\x86\x93"));
  os << "\n";
  os << std::setw(static_cast<int>(name_w) + 2) << name_a;
  for (const auto& col : columns) os << std::setw(16) << cell(col.a, col.better == -1);
  os << "\n";
  os << std::setw(static_cast<int>(name_w) + 2) << name_b;
  for (const auto& col : columns) os << std::setw(16) << cell(col.b, col.better == 1);
  os << "\n";
  return os.str();
}

std::string Comparison::render_tsv() const {
  std::ostringstream os;
  os << "model";
  for (const auto& col : columns)
    os << "\t" << col.name << (col.higher_better ? " up" : " down");
  os << "\n" << name_a;
  for (const auto& col : columns) os << "\t" << col.a << (col.better == -1 ? "\t*" : "\t");
  os << "\n" << name_b;
  for (const auto& col : columns) os << "\t" << col.b << (col.better == 1 ? "\t*" : "\t");
  os << "\n";
  return os.str();
}

}  // namespace qg
