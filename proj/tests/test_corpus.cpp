#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <string>

#include "qg/corpus.hpp"

using namespace qg;

namespace {

std::string data_dir() {
  const char* d = std::getenv("QG_DATA_DIR");
  return d ? d : "data";
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name, const std::string& content) : path(name) {
    std::ofstream f(path);
    f << content;
  }
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("squad loader takes the first answer of each question") {
  TempFile f("t_squad.json", R"({"data":[{"title":"t","paragraphs":[{
    "context":"Rome is the capital of Italy.",
    "qas":[{"id":"q1","question":"What is the capital of Italy?",
            "answers":[{"text":"Rome","answer_start":0},
                       {"text":"capital","answer_start":12}]}]}]}]})");
  DatasetSplit s = load_squad_format(f.path);
  REQUIRE(s.examples.size() == 1);
  CHECK(s.examples[0].id == "q1");
  CHECK(s.examples[0].answer == "Rome");
  CHECK(s.examples[0].context == "Rome is the capital of Italy.");
  CHECK(s.examples[0].has_question);
  CHECK(s.skipped == 0);
}

TEST_CASE("strict span checking skips and tallies mismatched answers") {
  TempFile f("t_span.json", R"({"data":[{"title":"t","paragraphs":[{
    "context":"The sky is blue.",
    "qas":[{"id":"ok","question":"What color?","answers":[{"text":"blue","answer_start":11}]},
           {"id":"bad","question":"Wrong?","answers":[{"text":"green","answer_start":0}]}]}]}]})");
  DatasetSplit lax = load_squad_format(f.path, false);
  CHECK(lax.examples.size() == 2);
  DatasetSplit strict = load_squad_format(f.path, true);
  CHECK(strict.examples.size() == 1);
  CHECK(strict.examples[0].id == "ok");
  CHECK(strict.skipped == 1);
}

TEST_CASE("shipped squad fixture loads with strict spans intact") {
  DatasetSplit s = load_squad_format(data_dir() + "/fixtures/squad_tiny.json", true);
  CHECK(s.examples.size() == 6);
  CHECK(s.skipped == 0);
}

TEST_CASE("sciq loader skips records with empty support") {
  TempFile f("t_sciq.json", R"([
    {"question":"Q1?","correct_answer":"a1","support":"Context one."},
    {"question":"Q2?","correct_answer":"a2","support":""},
    {"question":"Q3?","correct_answer":"a3","support":"Context three."}])");
  DatasetSplit s = load_sciq_format(f.path);
  CHECK(s.examples.size() == 2);
  CHECK(s.skipped == 1);
  CHECK(s.examples[0].question == "Q1?");
  CHECK(s.examples[0].answer == "a1");
}

TEST_CASE("abstract reader streams records and tallies empty abstracts") {
  TempFile f("t_abs.jsonl",
             "{\"id\":\"a\",\"abstract\":\"text one\",\"fields_of_study\":[\"Biology\"]}\n"
             "{\"id\":\"b\",\"abstract\":\"\",\"fields_of_study\":[\"Physics\"]}\n"
             "{\"id\":\"c\",\"abstract\":\"text three\",\"fields_of_study\":[]}\n");
  AbstractReader r(f.path);
  auto d1 = r.next();
  REQUIRE(d1.has_value());
  CHECK(d1->id == "a");
  CHECK(d1->fields_of_study.count("Biology") == 1);
  auto d2 = r.next();
  REQUIRE(d2.has_value());
  CHECK(d2->id == "c");
  CHECK(!r.next().has_value());
  CHECK(r.skipped() == 1);
}

TEST_CASE("abstract reader reports malformed lines with line numbers") {
  TempFile f("t_bad.jsonl", "{\"id\":\"a\",\"abstract\":\"x\",\"fields_of_study\":[]}\nnot json\n");
  AbstractReader r(f.path);
  CHECK(r.next().has_value());
  CHECK_THROWS_AS(r.next(), Error);
}

TEST_CASE("field matching is case-insensitive and exact") {
  AbstractDoc d;
  d.fields_of_study = {"Biology", "Computer Science"};
  CHECK(field_match(d, {"biology"}));
  CHECK(field_match(d, {"BIOLOGY", "chemistry"}));
  CHECK(field_match(d, {"computer science"}));
  CHECK(!field_match(d, {"bio"}));          // no substring matching
  CHECK(!field_match(d, {"chemistry"}));
  CHECK(!field_match(d, {}));
}

TEST_CASE("reservoir downsample is uniform within binomial bounds") {
  // 5 docs, keep 2: inclusion probability 0.4 each. 2000 independent seeds.
  std::vector<AbstractDoc> docs(5);
  for (int i = 0; i < 5; ++i) docs[i].id = std::to_string(i);
  std::map<std::string, int> hits;
  const int trials = 2000;
  for (int t = 0; t < trials; ++t) {
    auto kept = downsample(docs, 2, 1000 + t);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].id != kept[1].id);
    for (const auto& d : kept) hits[d.id]++;
  }
  // sd = sqrt(n p (1-p)) ~= 21.9; allow 4 sd around 800
  for (const auto& [id, n] : hits) {
    CHECK(n > 800 - 4 * 22);
    CHECK(n < 800 + 4 * 22);
  }
}

TEST_CASE("downsample keeps everything when n >= total and is deterministic") {
  std::vector<AbstractDoc> docs(3);
  for (int i = 0; i < 3; ++i) docs[i].id = std::to_string(i);
  auto all = downsample(docs, 10, 5);
  CHECK(all.size() == 3);
  auto a = downsample(docs, 2, 5);
  auto b = downsample(docs, 2, 5);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].id == b[i].id);
  CHECK(downsample(docs, 0, 5).empty());
}

TEST_CASE("formatting template renders source and target exactly") {
  QGExample ex;
  ex.context = "Water boils at 100 degrees.";
  ex.answer = "100 degrees";
  ex.question = "At what temperature does water boil?";
  ex.has_question = true;
  auto [src, tgt] = format_example(ex, make_template("qg-v1"));
  CHECK(src == "generate question: answer: 100 degrees context: Water boils at 100 degrees.");
  CHECK(tgt == "At what temperature does water boil?");
  auto [src2, tgt2] = format_example(ex, make_template("qg-v1"), false);
  CHECK(src2 == src);
  CHECK(tgt2.empty());
}

TEST_CASE("formatting without a target errors when one is required") {
  QGExample ex;
  ex.context = "c";
  ex.answer = "a";
  CHECK_THROWS_AS(format_example(ex, make_template("qg-v1"), true), Error);
  CHECK_THROWS_AS(make_template("nope"), Error);
}

TEST_CASE("split content hash tracks ids and texts") {
  DatasetSplit a, b;
  QGExample e;
  e.id = "1";
  e.context = "c";
  e.answer = "a";
  e.question = "q";
  a.examples = {e};
  b.examples = {e};
  CHECK(a.content_hash() == b.content_hash());
  b.examples[0].question = "q2";
  CHECK(a.content_hash() != b.content_hash());
}
