#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "qg/corpus.hpp"
#include "qg/decode.hpp"
#include "qg/metrics.hpp"
#include "qg/model.hpp"
#include "qg/pipeline.hpp"
#include "qg/tokenizer.hpp"
#include "qg/training.hpp"

namespace py = pybind11;
using namespace qg;

PYBIND11_MODULE(_qglab, m) {
  m.doc() = "question-generation lab core";

  py::class_<Vocab>(m, "Vocab")
      .def_property_readonly("size", [](const Vocab& v) { return v.vocab_size; })
      .def("encode", [](const Vocab& v, const std::string& s) { return encode(v, s).ids; })
      .def("decode",
           [](const Vocab& v, const std::vector<int>& ids) { return decode(v, TokenSeq{ids}); })
      .def("content_hash", &Vocab::content_hash)
      .def("sentinel_id", &Vocab::sentinel_id)
      .def("save", [](const Vocab& v, const std::string& path) { save_vocab(v, path); })
      .def_static("load", [](const std::string& path) { return load_vocab(path); })
      .def_static("train",
                  [](const std::vector<std::string>& corpus, int vocab_size, int num_sentinels) {
                    return train_bpe(corpus, vocab_size, num_sentinels);
                  },
                  py::arg("corpus"), py::arg("vocab_size"), py::arg("num_sentinels") = 100);

  py::class_<BleuResult>(m, "BleuResult")
      .def_readonly("cumulative", &BleuResult::cumulative)
      .def_readonly("precisions", &BleuResult::precisions)
      .def_readonly("brevity_penalty", &BleuResult::brevity_penalty)
      .def_readonly("hyp_len", &BleuResult::hyp_len)
      .def_readonly("ref_len", &BleuResult::ref_len);

  m.def("tokenize_for_metrics", &tokenize_for_metrics);
  m.def(
      "corpus_bleu",
      [](const std::vector<std::string>& hyps, const std::vector<std::string>& refs,
         size_t max_n) {
        std::vector<std::vector<std::string>> h, r;
        for (const auto& s : hyps) h.push_back(tokenize_for_metrics(s));
        for (const auto& s : refs) r.push_back(tokenize_for_metrics(s));
        return corpus_bleu(h, r, max_n);
      },
      py::arg("hypotheses"), py::arg("references"), py::arg("max_n") = 4);
  m.def("squad_normalize", &squad_normalize);
  m.def("squad_f1", &squad_f1, py::arg("prediction"), py::arg("golds"));
  m.def("distinct_n", &distinct_n, py::arg("texts"), py::arg("n"));
  m.def("diversity", &diversity);
  m.def("grammar_errors",
        [](const std::string& text) { return grammar_errors(text, GrammarRuleSet{}); });

  py::class_<NGramLM>(m, "NGramLM")
      .def_static("train", &NGramLM::train, py::arg("corpus"), py::arg("order") = 3,
                  py::arg("discount") = 0.75, py::arg("min_count") = 1)
      .def_static("uniform", &NGramLM::uniform)
      .def("log_prob", &NGramLM::log_prob)
      .def("perplexity", &NGramLM::perplexity);

  m.def(
      "span_corrupt",
      [](const std::vector<int>& ids, double mask_ratio, double mean_span_len, int vocab_size,
         int num_sentinels, std::uint64_t seed) {
        TokenSeq seq{ids};
        SentinelRange sent{vocab_size, num_sentinels, Vocab::kEos};
        std::mt19937_64 rng(seed);
        auto pr = span_corrupt(seq, mask_ratio, mean_span_len, rng, sent);
        return py::make_tuple(pr.first.ids, pr.second.ids);
      },
      py::arg("ids"), py::arg("mask_ratio"), py::arg("mean_span_len"), py::arg("vocab_size"),
      py::arg("num_sentinels"), py::arg("seed"));

  m.def("format_example", [](const std::string& context, const std::string& answer,
                             const std::string& question, const std::string& tmpl_name) {
    QGExample ex;
    ex.context = context;
    ex.answer = answer;
    ex.question = question;
    ex.has_question = !question.empty();
    auto pr = format_example(ex, make_template(tmpl_name), ex.has_question);
    return py::make_tuple(pr.first, pr.second);
  });

  m.def("run_experiment_file", [](const std::string& plan_path) {
    auto plan = ExperimentPlan::from_file(plan_path);
    return run_experiment(plan).report.to_json();
  });
  m.def("compare_reports",
        [](const std::string& a_json, const std::string& b_json, const std::string& name_a,
           const std::string& name_b) {
          auto a = EvalReport::from_json(a_json);
          auto b = EvalReport::from_json(b_json);
          return compare(a, b, name_a, name_b).render_text();
        },
        py::arg("report_a"), py::arg("report_b"), py::arg("name_a") = "A", py::arg("name_b") = "B");
}
