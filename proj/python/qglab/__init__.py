"""Question-generation lab: tokenizer, metrics, and pipeline bindings."""

from ._qglab import (  # noqa: F401
    BleuResult,
    NGramLM,
    Vocab,
    compare_reports,
    corpus_bleu,
    distinct_n,
    diversity,
    format_example,
    grammar_errors,
    run_experiment_file,
    span_corrupt,
    squad_f1,
    squad_normalize,
    tokenize_for_metrics,
)

__all__ = [
    "BleuResult",
    "NGramLM",
    "Vocab",
    "compare_reports",
    "corpus_bleu",
    "distinct_n",
    "diversity",
    "format_example",
    "grammar_errors",
    "run_experiment_file",
    "span_corrupt",
    "squad_f1",
    "squad_normalize",
    "tokenize_for_metrics",
]
