// Generates the synthetic desk-scale fixture corpora shipped under
// data/fixtures: a mixed abstracts file with science vs general vocabulary
// skews, sciq-shaped QG splits built from science templates, and a small
// squad-shaped file. Deterministic for a given seed.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kSciNouns = {
    "enzyme",  "molecule", "electron", "membrane", "catalyst", "neuron",  "photon",
    "protein", "nucleus",  "isotope",  "cell",     "acid",     "polymer", "ion",
    "atom",    "tissue",   "organism", "solvent",  "crystal",  "gene"};
const std::vector<std::string> kSciVerbs = {"binds",      "accelerates", "absorbs", "releases",
                                            "transports", "regulates",   "stores",  "emits",
                                            "converts",   "stabilizes"};
const std::vector<std::string> kSciPlaces = {"cytoplasm", "reactor", "solution", "lattice",
                                             "organelle", "plasma",  "sample",   "chamber"};
const std::vector<std::string> kSciFields = {"Chemistry", "Biology", "Physics"};

const std::vector<std::string> kGenNouns = {"kingdom", "empire",  "painting", "market", "treaty",
                                            "poem",    "village", "currency", "ballad", "harbor"};
const std::vector<std::string> kGenVerbs = {"describes", "governs", "inspires", "funds", "records"};
const std::vector<std::string> kGenFields = {"History", "Art", "Economics"};

template <typename Rng>
const std::string& pick(const std::vector<std::string>& v, Rng& rng) {
  std::uniform_int_distribution<size_t> d(0, v.size() - 1);
  return v[d(rng)];
}

template <typename Rng>
std::string sci_sentence(Rng& rng) {
  return "the " + pick(kSciNouns, rng) + " " + pick(kSciVerbs, rng) + " the " +
         pick(kSciNouns, rng) + " in the " + pick(kSciPlaces, rng) + " .";
}

template <typename Rng>
std::string gen_sentence(Rng& rng) {
  return "the " + pick(kGenNouns, rng) + " " + pick(kGenVerbs, rng) + " the " +
         pick(kGenNouns, rng) + " .";
}

struct QGRecord {
  std::string context, answer, question;
};

template <typename Rng>
QGRecord qg_record(Rng& rng) {
  std::string a = pick(kSciNouns, rng), v = pick(kSciVerbs, rng);
  std::string b = pick(kSciNouns, rng), c = pick(kSciPlaces, rng);
  QGRecord r;
  r.context = "The " + a + " " + v + " the " + b + " in the " + c + " .";
  r.answer = "the " + b;
  r.question = "What does the " + a + " " + v + " in the " + c + " ?";
  return r;
}

void write_sciq(const fs::path& path, std::mt19937_64& rng, size_t n, const std::string& tag) {
  json arr = json::array();
  for (size_t i = 0; i < n; ++i) {
    QGRecord r = qg_record(rng);
    arr.push_back(json{{"id", tag + "-" + std::to_string(i)},
                       {"question", r.question},
                       {"correct_answer", r.answer},
                       {"support", r.context}});
  }
  std::ofstream f(path);
  f << arr.dump(1) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  fs::path out = argc > 1 ? argv[1] : "data/fixtures";
  fs::create_directories(out);
  std::mt19937_64 rng(20240613);

  // mixed abstracts: science docs and general docs, interleaved
  {
    std::ofstream f(out / "abstracts_mixed.jsonl");
    std::uniform_int_distribution<int> n_sent(2, 4);
    for (size_t i = 0; i < 450; ++i) {
      bool science = i % 3 != 2;  // 2/3 science, 1/3 general
      std::string text;
      int k = n_sent(rng);
      for (int s = 0; s < k; ++s) {
        if (s) text += " ";
        text += science ? sci_sentence(rng) : gen_sentence(rng);
      }
      std::vector<std::string> fields;
      if (science) {
        fields.push_back(kSciFields[i % kSciFields.size()]);
        if (i % 5 == 0) fields.push_back(kSciFields[(i + 1) % kSciFields.size()]);
      } else {
        fields.push_back(kGenFields[i % kGenFields.size()]);
      }
      json rec{{"id", "abs-" + std::to_string(i)},
               {"abstract", text},
               {"fields_of_study", fields},
               {"source", "synthetic-v1"}};
      f << rec.dump() << "\n";
    }
  }

  write_sciq(out / "qg_overfit_32.json", rng, 32, "ov");
  write_sciq(out / "qg_finetune_64.json", rng, 64, "ft");
  write_sciq(out / "qg_eval_24.json", rng, 24, "ev");
  write_sciq(out / "qg_heldout_16.json", rng, 16, "ho");

  // small squad-shaped file
  {
    json paras = json::array();
    for (int p = 0; p < 3; ++p) {
      QGRecord r1 = qg_record(rng), r2 = qg_record(rng);
      std::string context = r1.context + " " + r2.context;
      json qas = json::array();
      auto qa = [&](const QGRecord& r, int k) {
        size_t pos = context.find(r.answer);
        return json{{"id", "sq-" + std::to_string(p) + "-" + std::to_string(k)},
                    {"question", r.question},
                    {"answers", json::array({json{{"text", r.answer},
                                                  {"answer_start", (int)pos}}})}};
      };
      qas.push_back(qa(r1, 0));
      qas.push_back(qa(r2, 1));
      paras.push_back(json{{"context", context}, {"qas", qas}});
    }
    json doc{{"version", "1.1"},
             {"data", json::array({json{{"title", "synthetic"}, {"paragraphs", paras}}})}};
    std::ofstream f(out / "squad_tiny.json");
    f << doc.dump(1) << "\n";
  }

  std::cout << "fixtures written to " << out << "\n";
  return 0;
}
