#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "qg/pipeline.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace qg;

// exit codes: 0 ok, 2 configuration, 3 data, 4 runtime
namespace {

int code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Data: return 3;
    case ErrorKind::Runtime: return 4;
  }
  return 4;
}

json parse_override_value(const std::string& raw) {
  try {
    return json::parse(raw);
  } catch (const json::exception&) {
    return json(raw);  // bare string
  }
}

// Load a plan file and apply --set key=value overrides (dot-separated keys).
ExperimentPlan load_plan(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream f(path);
  if (!f) throw config_error("cannot open plan file " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw config_error("plan " + path + ": " + e.what());
  }
  for (const auto& ov : overrides) {
    auto eq = ov.find('=');
    if (eq == std::string::npos) throw config_error("override must be key=value: " + ov);
    std::string key = "/" + ov.substr(0, eq);
    for (auto& c : key)
      if (c == '.') c = '/';
    j[json::json_pointer(key)] = parse_override_value(ov.substr(eq + 1));
  }
  ExperimentPlan p = [&] {
    try {
      return ExperimentPlan::from_json(j.dump());
    } catch (const json::exception& e) {
      throw config_error("plan " + path + ": " + e.what());
    }
  }();
  if (const char* url = std::getenv("QGLAB_GRAMMAR_URL"); url && p.metrics.grammar_endpoint.empty())
    p.metrics.grammar_endpoint = url;
  return p;
}

void write_meta(const std::string& artifact_path, const json& effective_config) {
  std::ofstream mf(artifact_path + ".meta.json");
  json m;
  m["artifact"] = artifact_path;
  m["effective_config"] = effective_config;
  m["config_hash"] = hash_hex(fnv1a(effective_config.dump()));
  mf << m.dump(2) << "\n";
}

std::vector<std::string> read_hypotheses(const std::string& path, size_t expected) {
  std::ifstream f(path);
  if (!f) throw data_error("cannot open hypothesis file " + path);
  std::vector<std::string> hyps;
  std::string line;
  bool jsonl = path.size() > 6 && path.substr(path.size() - 6) == ".jsonl";
  bool first = true;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (jsonl) {
      json j = json::parse(line);
      if (first && j.contains("plan_hash")) {  // header record
        first = false;
        continue;
      }
      first = false;
      hyps.push_back(j.at("question").get<std::string>());
    } else {
      hyps.push_back(line);
    }
  }
  if (expected && hyps.size() != expected)
    throw data_error("hypothesis count " + std::to_string(hyps.size()) +
                     " does not match eval split size " + std::to_string(expected));
  return hyps;
}

DatasetSplit load_eval_split(const ExperimentPlan& plan) {
  DatasetSplit ev = plan.eval_format == "squad" ? load_squad_format(plan.eval_path, false)
                                                : load_sciq_format(plan.eval_path);
  if (plan.eval_limit > 0 && ev.examples.size() > plan.eval_limit)
    ev.examples.resize(plan.eval_limit);
  return ev;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qglab: two-arm question-generation lab (pretrain + finetune vs finetune-only)"};
  app.require_subcommand(1);

  std::string plan_path, input, output, vocab_path, ckpt_path, init_path, resume_path;
  std::string hyp_path, report_a, report_b, name_a = "A", name_b = "B";
  std::vector<std::string> overrides, corpus_files, fields;
  size_t vocab_size = 2000, num_sentinels = 100, downsample_n = 0;
  uint64_t seed = 0;
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "suppress progress output");

  auto* prep = app.add_subcommand("prepare-data", "filter/down-sample an abstracts corpus");
  prep->add_option("--input", input, "line-delimited abstracts file")->required();
  prep->add_option("--output", output, "output .jsonl path")->required();
  prep->add_option("--fields", fields, "keep docs matching any of these field labels");
  prep->add_option("--downsample", downsample_n, "reservoir-sample this many docs (0 = all)");
  prep->add_option("--seed", seed, "sampling seed");

  auto* ttok = app.add_subcommand("train-tokenizer", "train a BPE vocabulary");
  ttok->add_option("--corpus", corpus_files, "corpus files (.jsonl abstracts or squad/sciq json)")
      ->required();
  ttok->add_option("--output", output, "vocab file path")->required();
  ttok->add_option("--vocab-size", vocab_size, "total vocabulary size");
  ttok->add_option("--num-sentinels", num_sentinels, "sentinel token count");

  auto add_plan = [&](CLI::App* sc) {
    sc->add_option("--plan", plan_path, "experiment plan json")->required();
    sc->add_option("--set", overrides, "override plan keys, e.g. --set seed=7");
  };

  auto* pre = app.add_subcommand("pretrain", "denoising pre-training stage of a plan");
  add_plan(pre);
  pre->add_option("--resume", resume_path, "resume from an intermediate checkpoint");

  auto* fin = app.add_subcommand("finetune", "QG fine-tuning stage of a plan");
  add_plan(fin);
  fin->add_option("--init", init_path, "initialize parameters from this checkpoint");
  fin->add_option("--resume", resume_path, "resume from an intermediate checkpoint");

  auto* gen = app.add_subcommand("generate", "generate questions for the plan's eval split");
  add_plan(gen);
  gen->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
  gen->add_option("--output", output, "generated questions .jsonl");

  auto* ev = app.add_subcommand("evaluate", "score a hypothesis file against the eval split");
  add_plan(ev);
  ev->add_option("--hyp", hyp_path, "generated .jsonl or plain text, one question per line")
      ->required();
  ev->add_option("--output", output, "report json path");

  auto* run = app.add_subcommand("run", "full arm: (pretrain) -> finetune -> generate -> evaluate");
  add_plan(run);

  auto* cmp = app.add_subcommand("compare", "Table-style comparison of two eval reports");
  cmp->add_option("--report-a", report_a)->required();
  cmp->add_option("--report-b", report_b)->required();
  cmp->add_option("--name-a", name_a);
  cmp->add_option("--name-b", name_b);
  cmp->add_option("--output", output, "write text + tsv tables with this path prefix");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  auto log = [&](const std::string& m) {
    if (!quiet) std::cerr << "[qglab] " << m << "\n";
  };

  try {
    if (prep->parsed()) {
      std::set<std::string> wanted;
      for (const auto& f : fields) {
        size_t start = 0;
        while (start <= f.size()) {
          size_t comma = f.find(',', start);
          std::string piece = f.substr(start, comma == std::string::npos ? std::string::npos
                                                                         : comma - start);
          if (!piece.empty()) wanted.insert(piece);
          if (comma == std::string::npos) break;
          start = comma + 1;
        }
      }
      AbstractReader reader(input);
      auto next_filtered = [&]() -> std::optional<AbstractDoc> {
        while (auto d = reader.next())
          if (wanted.empty() || field_match(*d, wanted)) return d;
        return std::nullopt;
      };
      std::vector<AbstractDoc> docs;
      if (downsample_n > 0) {
        docs = downsample(next_filtered, downsample_n, seed);
      } else {
        while (auto d = next_filtered()) docs.push_back(std::move(*d));
      }
      std::ofstream out_f(output);
      if (!out_f) throw data_error("cannot open " + output);
      for (const auto& d : docs) {
        json rec{{"id", d.id},
                 {"abstract", d.text},
                 {"fields_of_study", std::vector<std::string>(d.fields_of_study.begin(),
                                                              d.fields_of_study.end())},
                 {"source", d.source}};
        out_f << rec.dump() << "\n";
      }
      write_meta(output, json{{"command", "prepare-data"},
                              {"input", input},
                              {"fields", fields},
                              {"downsample", downsample_n},
                              {"seed", seed},
                              {"kept", docs.size()},
                              {"skipped_empty", reader.skipped()}});
      log("prepare-data: kept " + std::to_string(docs.size()) + " docs -> " + output);
    } else if (ttok->parsed()) {
      std::vector<std::string> lines;
      for (const auto& p : corpus_files) {
        if (p.size() > 6 && p.substr(p.size() - 6) == ".jsonl") {
          AbstractReader r(p);
          while (auto d = r.next()) lines.push_back(d->text);
        } else {
          std::ifstream cf(p);
          if (!cf) throw data_error("cannot open " + p);
          json j;
          cf >> j;
          DatasetSplit s =
              (j.is_object() && j.contains("data")) ? load_squad_format(p) : load_sciq_format(p);
          for (const auto& ex : s.examples) {
            lines.push_back(ex.context);
            lines.push_back(ex.answer);
            lines.push_back(ex.question);
          }
        }
      }
      Vocab v = train_bpe(lines, vocab_size, num_sentinels);
      save_vocab(v, output);
      write_meta(output, json{{"command", "train-tokenizer"},
                              {"corpus", corpus_files},
                              {"vocab_size", vocab_size},
                              {"num_sentinels", num_sentinels},
                              {"merges", v.merges.size()},
                              {"content_hash", hash_hex(v.content_hash())}});
      log("train-tokenizer: " + std::to_string(v.merges.size()) + " merges -> " + output);
    } else if (run->parsed()) {
      ExperimentPlan plan = load_plan(plan_path, overrides);
      RunArtifacts art = run_experiment(plan, log);
      std::cout << art.report.render_table();
    } else if (pre->parsed()) {
      ExperimentPlan plan = load_plan(plan_path, overrides);
      if (!plan.pretrain) throw config_error("plan has no pretrain stage");
      fs::create_directories(plan.output_dir);
      Vocab vocab = load_vocab(plan.tokenizer.vocab_file.empty()
                                   ? (fs::path(plan.output_dir) / "vocab.txt").string()
                                   : plan.tokenizer.vocab_file);
      ModelConfig mcfg = plan.model;
      mcfg.vocab_size = vocab.vocab_size;
      FormatTemplate tmpl = make_template(plan.template_name);
      Checkpoint ck =
          resume_path.empty()
              ? fresh_checkpoint(mcfg, derive_seed(plan.seed, "init"), vocab.content_hash(), tmpl)
              : load_checkpoint(resume_path, vocab.content_hash());
      AbstractReader reader(plan.pretrain->corpus_path);
      auto next_filtered = [&]() -> std::optional<AbstractDoc> {
        while (auto d = reader.next())
          if (plan.pretrain->fields.empty() || field_match(*d, plan.pretrain->fields)) return d;
        return std::nullopt;
      };
      std::vector<AbstractDoc> docs;
      if (plan.pretrain->downsample_n > 0)
        docs = downsample(next_filtered, plan.pretrain->downsample_n,
                          derive_seed(plan.seed, "downsample"));
      else
        while (auto d = next_filtered()) docs.push_back(std::move(*d));
      auto items = make_denoise_items(docs, vocab, mcfg.max_seq_len);
      TrainConfig tc = plan.pretrain->train;
      tc.objective = Objective::Denoise;
      tc.seed = derive_seed(plan.seed, "pretrain");
      std::string out_ck = (fs::path(plan.output_dir) / "post_pretrain.ckpt").string();
      train_loop(std::move(ck), items, tc, vocab, out_ck);
      log("pretrain: checkpoint -> " + out_ck);
    } else if (fin->parsed()) {
      ExperimentPlan plan = load_plan(plan_path, overrides);
      fs::create_directories(plan.output_dir);
      Vocab vocab = load_vocab(plan.tokenizer.vocab_file.empty()
                                   ? (fs::path(plan.output_dir) / "vocab.txt").string()
                                   : plan.tokenizer.vocab_file);
      ModelConfig mcfg = plan.model;
      mcfg.vocab_size = vocab.vocab_size;
      FormatTemplate tmpl = make_template(plan.template_name);
      Checkpoint ck;
      if (!resume_path.empty()) {
        ck = load_checkpoint(resume_path, vocab.content_hash());
      } else {
        ck = fresh_checkpoint(mcfg, derive_seed(plan.seed, "init"), vocab.content_hash(), tmpl);
        if (!init_path.empty()) {
          Checkpoint init = load_checkpoint(init_path, vocab.content_hash());
          ck.params = std::move(init.params);
        }
      }
      DatasetSplit ft = plan.finetune_format == "squad"
                            ? load_squad_format(plan.finetune_path, plan.finetune_strict_span)
                            : load_sciq_format(plan.finetune_path);
      auto items = make_qg_items(ft, vocab, tmpl, mcfg.max_seq_len);
      TrainConfig tc = plan.finetune_train;
      tc.objective = Objective::QGFinetune;
      tc.seed = plan.shared_finetune_order ? derive_seed(plan.seed, "finetune")
                                           : derive_seed(plan.seed, "finetune:" + plan.variant);
      std::string out_ck = (fs::path(plan.output_dir) / "post_finetune.ckpt").string();
      train_loop(std::move(ck), items, tc, vocab, out_ck);
      log("finetune: checkpoint -> " + out_ck);
    } else if (gen->parsed()) {
      ExperimentPlan plan = load_plan(plan_path, overrides);
      Vocab vocab = load_vocab(plan.tokenizer.vocab_file.empty()
                                   ? (fs::path(plan.output_dir) / "vocab.txt").string()
                                   : plan.tokenizer.vocab_file);
      Checkpoint ck = load_checkpoint(ckpt_path, vocab.content_hash());
      DatasetSplit evs = load_eval_split(plan);
      std::vector<std::string> sources;
      for (const auto& ex : evs.examples) sources.push_back(format_example(ex, ck.tmpl, false).first);
      auto results = generate(ck, vocab, sources, plan.decode);
      std::string out_path =
          output.empty() ? (fs::path(plan.output_dir) / "generated.jsonl").string() : output;
      std::ofstream gf(out_path);
      gf << json{{"plan_hash", hash_hex(plan.plan_hash())},
                 {"decode_config_hash", hash_hex(plan.decode.config_hash())}}
                .dump()
         << "\n";
      for (size_t i = 0; i < results.size(); ++i)
        gf << json{{"id", evs.examples[i].id},
                   {"source_hash", hash_hex(fnv1a(sources[i]))},
                   {"question", results[i].text}}
                  .dump()
           << "\n";
      log("generate: " + std::to_string(results.size()) + " questions -> " + out_path);
    } else if (ev->parsed()) {
      ExperimentPlan plan = load_plan(plan_path, overrides);
      DatasetSplit evs = load_eval_split(plan);
      auto hyps = read_hypotheses(hyp_path, evs.examples.size());
      std::vector<std::vector<std::string>> golds;
      std::vector<std::string> gold_texts;
      for (const auto& e : evs.examples) {
        golds.push_back({e.question});
        gold_texts.push_back(e.question);
      }
      NGramLM lm = NGramLM::train(gold_texts, plan.metrics.lm_order, plan.metrics.lm_discount,
                                  plan.metrics.lm_min_count);
      GrammarRuleSet rules;
      EvalReport rep = evaluate(hyps, golds, lm, rules, plan.metrics);
      rep.eval_split_hash = hash_hex(evs.content_hash());
      rep.decode_config_hash = hash_hex(plan.decode.config_hash());
      rep.plan_hash = hash_hex(plan.plan_hash());
      std::string out_path =
          output.empty() ? (fs::path(plan.output_dir) / "report.json").string() : output;
      fs::create_directories(fs::path(out_path).parent_path());
      std::ofstream rf(out_path);
      rf << rep.to_json();
      std::cout << rep.render_table();
      log("evaluate: report -> " + out_path);
    } else if (cmp->parsed()) {
      auto read_report = [](const std::string& p) {
        std::ifstream f(p);
        if (!f) throw data_error("cannot open report " + p);
        std::stringstream ss;
        ss << f.rdbuf();
        return EvalReport::from_json(ss.str());
      };
      Comparison c = compare(read_report(report_a), read_report(report_b), name_a, name_b);
      std::cout << c.render_text();
      if (!output.empty()) {
        std::ofstream tf(output + ".txt");
        tf << c.render_text();
        std::ofstream vf(output + ".tsv");
        vf << c.render_tsv();
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
