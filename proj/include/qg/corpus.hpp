#pragma once

#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qg/common.hpp"

namespace qg {

struct AbstractDoc {
  std::string id;
  std::string text;
  std::set<std::string> fields_of_study;
  std::string source;
};

struct QGExample {
  std::string id;
  std::string context;
  std::string answer;
  std::string question;  // may be empty for generation-only inputs
  bool has_question = false;
};

struct DatasetSplit {
  std::string name;
  std::vector<QGExample> examples;
  std::string provenance;  // source path + loader + filter description
  size_t skipped = 0;

  // stable content hash over example ids and texts, used to key reports
  uint64_t content_hash() const;
};

// SQuAD 1.1 shaped hierarchical document: data -> paragraphs -> qas.
// One example per (question, first answer). With strict_span, examples whose
// answer is not a case-folded substring of the context are skipped + tallied.
DatasetSplit load_squad_format(const std::string& path, bool strict_span = false);

// Flat record list with question / correct_answer / support fields.
// Records with empty support are skipped and tallied.
DatasetSplit load_sciq_format(const std::string& path);

// Streaming reader over line-delimited abstract records
// {"id":..., "abstract":..., "fields_of_study":[...]}.
class AbstractReader {
 public:
  explicit AbstractReader(const std::string& path);
  // Returns docs in file order; empty-abstract records are skipped + tallied.
  std::optional<AbstractDoc> next();
  size_t skipped() const { return skipped_; }
  size_t line_no() const { return line_no_; }

 private:
  std::ifstream in_;
  std::string path_;
  size_t line_no_ = 0;
  size_t skipped_ = 0;
};

// Case-insensitive exact label match against `wanted`; order preserved.
bool field_match(const AbstractDoc& doc, const std::set<std::string>& wanted);

std::vector<AbstractDoc> filter_by_field(const std::vector<AbstractDoc>& docs,
                                         const std::set<std::string>& wanted);

// Single-pass uniform reservoir sample of min(n, total) docs. Deterministic
// given (seed, input order).
std::vector<AbstractDoc> downsample(const std::function<std::optional<AbstractDoc>()>& next,
                                    size_t n, uint64_t seed);
std::vector<AbstractDoc> downsample(const std::vector<AbstractDoc>& docs, size_t n, uint64_t seed);

struct FormatTemplate {
  std::string name = "qg-v1";
};

// Renders (source_text, target_text) for seq2seq training. The template
// descriptor is persisted with every checkpoint.
std::pair<std::string, std::string> format_example(const QGExample& ex,
                                                   const FormatTemplate& tmpl,
                                                   bool need_target = true);

FormatTemplate make_template(const std::string& name);

}  // namespace qg
