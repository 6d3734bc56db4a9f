#include "qg/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <random>

#include <json.hpp>

namespace qg {

namespace {

using json = nlohmann::json;

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

json load_json_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot open " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw data_error("malformed document " + path + ": " + e.what());
  }
  return j;
}

}  // namespace

uint64_t DatasetSplit::content_hash() const {
  uint64_t h = fnv1a("qgsplit1");
  for (const auto& ex : examples) {
    h = fnv1a(ex.id, h);
    h = fnv1a(ex.context, h);
    h = fnv1a(ex.answer, h);
    h = fnv1a(ex.question, h);
  }
  return h;
}

DatasetSplit load_squad_format(const std::string& path, bool strict_span) {
  json j = load_json_file(path);
  if (!j.contains("data") || !j["data"].is_array())
    throw data_error("malformed document " + path + ": missing top-level 'data' array");
  DatasetSplit split;
  split.name = path;
  split.provenance = "squad-v1.1 loader v1; strict_span=" + std::string(strict_span ? "1" : "0") +
                     "; source=" + path;
  size_t ai = 0;
  for (const auto& article : j["data"]) {
    if (!article.contains("paragraphs"))
      throw data_error("malformed document " + path + ": data[" + std::to_string(ai) +
                       "] has no 'paragraphs'");
    size_t pi = 0;
    for (const auto& para : article["paragraphs"]) {
      if (!para.contains("context") || !para.contains("qas"))
        throw data_error("malformed document " + path + ": data[" + std::to_string(ai) +
                         "].paragraphs[" + std::to_string(pi) + "] missing context/qas");
      std::string context = para["context"].get<std::string>();
      for (const auto& qa : para["qas"]) {
        if (!qa.contains("question") || !qa.contains("answers") || !qa.contains("id"))
          throw data_error("malformed document " + path + ": qa in data[" + std::to_string(ai) +
                           "].paragraphs[" + std::to_string(pi) + "] missing fields");
        if (qa["answers"].empty()) {
          ++split.skipped;
          continue;
        }
        // first listed answer, the deterministic convention
        std::string ans = qa["answers"][0]["text"].get<std::string>();
        if (trim(context).empty() || trim(ans).empty()) {
          ++split.skipped;
          continue;
        }
        if (strict_span && lower(context).find(lower(ans)) == std::string::npos) {
          ++split.skipped;
          continue;
        }
        QGExample ex;
        ex.id = qa["id"].get<std::string>();
        ex.context = context;
        ex.answer = ans;
        ex.question = qa["question"].get<std::string>();
        ex.has_question = true;
        split.examples.push_back(std::move(ex));
      }
      ++pi;
    }
    ++ai;
  }
  return split;
}

DatasetSplit load_sciq_format(const std::string& path) {
  json j = load_json_file(path);
  if (!j.is_array()) throw data_error("malformed document " + path + ": expected a top-level array");
  DatasetSplit split;
  split.name = path;
  split.provenance = "sciq loader v1; source=" + path;
  for (size_t i = 0; i < j.size(); ++i) {
    const auto& rec = j[i];
    if (!rec.contains("question") || !rec.contains("correct_answer") || !rec.contains("support"))
      throw data_error("record " + std::to_string(i) + " in " + path +
                       " missing question/correct_answer/support");
    std::string support = rec["support"].get<std::string>();
    std::string answer = rec["correct_answer"].get<std::string>();
    if (trim(support).empty() || trim(answer).empty()) {
      ++split.skipped;
      continue;
    }
    QGExample ex;
    ex.id = rec.contains("id") ? rec["id"].get<std::string>() : path + "#" + std::to_string(i);
    ex.context = support;
    ex.answer = answer;
    ex.question = rec["question"].get<std::string>();
    ex.has_question = true;
    split.examples.push_back(std::move(ex));
  }
  return split;
}

AbstractReader::AbstractReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
  if (!in_) throw data_error("cannot open " + path);
}

std::optional<AbstractDoc> AbstractReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    ++line_no_;
    if (trim(line).empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw data_error(path_ + ":" + std::to_string(line_no_) + ": unreadable record: " + e.what());
    }
    if (!rec.contains("id") || !rec.contains("abstract") || !rec.contains("fields_of_study"))
      throw data_error(path_ + ":" + std::to_string(line_no_) +
                       ": record missing id/abstract/fields_of_study");
    AbstractDoc doc;
    doc.id = rec["id"].is_string() ? rec["id"].get<std::string>() : rec["id"].dump();
    doc.text = rec["abstract"].get<std::string>();
    if (trim(doc.text).empty()) {
      ++skipped_;
      continue;
    }
    for (const auto& f : rec["fields_of_study"]) doc.fields_of_study.insert(f.get<std::string>());
    doc.source = rec.contains("source") ? rec["source"].get<std::string>() : path_;
    return doc;
  }
  return std::nullopt;
}

bool field_match(const AbstractDoc& doc, const std::set<std::string>& wanted) {
  for (const auto& w : wanted) {
    std::string lw = lower(w);
    for (const auto& f : doc.fields_of_study)
      if (lower(f) == lw) return true;
  }
  return false;
}

std::vector<AbstractDoc> filter_by_field(const std::vector<AbstractDoc>& docs,
                                         const std::set<std::string>& wanted) {
  if (wanted.empty()) throw config_error("filter_by_field: wanted label set is empty");
  std::vector<AbstractDoc> out;
  for (const auto& d : docs)
    if (field_match(d, wanted)) out.push_back(d);
  return out;
}

std::vector<AbstractDoc> downsample(const std::function<std::optional<AbstractDoc>()>& next,
                                    size_t n, uint64_t seed) {
  std::vector<AbstractDoc> reservoir;
  if (n == 0) {
    while (next()) {  // drain so callers can read tallies
    }
    return reservoir;
  }
  reservoir.reserve(n);
  std::mt19937_64 rng(seed);
  size_t seen = 0;
  while (auto doc = next()) {
    ++seen;
    if (reservoir.size() < n) {
      reservoir.push_back(std::move(*doc));
    } else {
      std::uniform_int_distribution<size_t> d(0, seen - 1);
      size_t j = d(rng);
      if (j < n) reservoir[j] = std::move(*doc);
    }
  }
  return reservoir;
}

std::vector<AbstractDoc> downsample(const std::vector<AbstractDoc>& docs, size_t n, uint64_t seed) {
  size_t i = 0;
  return downsample(
      [&]() -> std::optional<AbstractDoc> {
        if (i >= docs.size()) return std::nullopt;
        return docs[i++];
      },
      n, seed);
}

FormatTemplate make_template(const std::string& name) {
  if (name != "qg-v1") throw config_error("unknown format template: " + name);
  return FormatTemplate{name};
}

std::pair<std::string, std::string> format_example(const QGExample& ex, const FormatTemplate& tmpl,
                                                   bool need_target) {
  if (tmpl.name != "qg-v1") throw config_error("unknown format template: " + tmpl.name);
  if (trim(ex.context).empty() || trim(ex.answer).empty())
    throw data_error("format_example: example " + ex.id + " has empty context or answer");
  std::string source = "generate question: answer: " + ex.answer + " context: " + ex.context;
  std::string target;
  if (need_target) {
    if (!ex.has_question)
      throw data_error("format_example: example " + ex.id + " is generation-only (no question)");
    target = ex.question;
  }
  return {source, target};
}

}  // namespace qg
