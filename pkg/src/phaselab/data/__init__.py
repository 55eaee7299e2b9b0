"""Corpus ingestion, tokenization, alignment and synthetic data."""

from phaselab.data.conllu import ConlluError, DepAnnotatedText, Sentence, load_conllu, parse_conllu
from phaselab.data.reading import (
    AlignmentError,
    FeatureTable,
    ReadingRow,
    ReadingTable,
    align_word_features,
    load_frequencies,
    load_reading_table,
)
from phaselab.data.synthetic import (
    SyntheticSpec,
    generate_repeated_sequences,
    pm_mask,
    prefix_matching_targets,
    repeated_probe,
)
from phaselab.data.tokenizer import TokenizedCorpus, TokenizerError, Vocab, detokenize, tokenize

__all__ = [
    "AlignmentError", "ConlluError", "DepAnnotatedText", "FeatureTable", "ReadingRow", "ReadingTable",
    "Sentence", "SyntheticSpec", "TokenizedCorpus", "TokenizerError", "Vocab", "align_word_features",
    "detokenize", "generate_repeated_sequences", "load_conllu", "load_frequencies", "load_reading_table",
    "parse_conllu", "pm_mask", "prefix_matching_targets", "repeated_probe", "tokenize",
]
