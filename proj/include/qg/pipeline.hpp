#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qg/decode.hpp"
#include "qg/metrics.hpp"
#include "qg/training.hpp"

namespace qg {

struct PretrainSpec {
  std::string corpus_path;
  std::set<std::string> fields;   // empty = no field filter
  size_t downsample_n = 0;        // 0 = keep all
  TrainConfig train;
};

struct TokenizerSpec {
  std::vector<std::string> train_on;  // corpus files, used when vocab_file absent
  size_t vocab_size = 2000;
  size_t num_sentinels = 100;
  std::string vocab_file;  // loaded if present, trained and saved otherwise
};

struct ExperimentPlan {
  std::string variant;  // "baseline" | "eduqg"
  std::optional<PretrainSpec> pretrain;
  std::string finetune_path;
  std::string finetune_format = "squad";  // "squad" | "sciq"
  bool finetune_strict_span = false;
  TrainConfig finetune_train;
  std::string eval_path;
  std::string eval_format = "sciq";
  size_t eval_limit = 0;  // 0 = whole split
  ModelConfig model;
  TokenizerSpec tokenizer;
  DecodeConfig decode;
  MetricConfig metrics;
  std::string output_dir;
  uint64_t seed = 0;
  bool shared_finetune_order = true;
  std::string template_name = "qg-v1";

  void validate() const;
  uint64_t plan_hash() const;
  std::string to_json() const;
  static ExperimentPlan from_json(const std::string& text);
  static ExperimentPlan from_file(const std::string& path);
};

struct RunArtifacts {
  std::string vocab_path;
  std::string pretrain_ckpt;  // empty for baseline
  std::string finetune_ckpt;
  std::string generated_path;
  std::string report_path;
  EvalReport report;
};

// One experimental arm end-to-end: (pretrain) -> finetune -> generate ->
// evaluate. Artifacts land under plan.output_dir, each stamped with the plan
// hash. A stage failure leaves earlier artifacts in place and names the stage.
RunArtifacts run_experiment(const ExperimentPlan& plan,
                            const std::function<void(const std::string&)>& log = {});

struct ComparisonColumn {
  std::string name;
  bool higher_better;
  real a = 0, b = 0;
  int better = 0;  // -1 = a, +1 = b, 0 = tie
};

struct Comparison {
  std::string name_a, name_b;
  std::vector<ComparisonColumn> columns;  // the eight report quantities

  std::string render_text() const;  // aligned table, * marks the better value
  std::string render_tsv() const;
};

// Refuses to compare reports computed on different eval splits.
Comparison compare(const EvalReport& a, const EvalReport& b, const std::string& name_a = "A",
                   const std::string& name_b = "B");

}  // namespace qg
