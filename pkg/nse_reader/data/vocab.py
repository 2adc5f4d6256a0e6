"""
    Vocabulary - token <-> id bijection with reserved symbols first.
"""
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from nse_reader.util import ParseError, RejectedInput
from .cbt import PLACEHOLDER

logger = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
RESERVED = (PAD, UNK, PLACEHOLDER)


@dataclass
class EncodedExample:
    document: np.ndarray
    query: np.ndarray
    candidates: np.ndarray
    candidate_positions: np.ndarray  # (C, |D|) bool, matched on token strings
    answer_index: int
    source: str = ""
    index: Optional[int] = None

    @property
    def doc_length(self):
        return int(self.document.shape[0])


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise RejectedInput("vocabulary must start with {}".format(", ".join(RESERVED)))
        if len(set(tokens)) != len(tokens):
            raise RejectedInput("vocabulary tokens must be unique")
        self.tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    pad_id = 0
    unk_id = 1
    placeholder_id = 2

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._ids

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __repr__(self):
        return "Vocabulary({} tokens)".format(len(self))

    def id(self, token):
        return self._ids.get(token, self.unk_id)

    def token(self, idx):
        return self.tokens[int(idx)]

    def encode_tokens(self, tokens):
        return np.array([self.id(t) for t in tokens], dtype=np.int64)

    def decode(self, ids):
        return [self.token(i) for i in ids]

    def encode(self, example, index=None):
        if not example.document:
            raise RejectedInput("example {} has an empty document".format(example.source or index))
        candidates = self.encode_tokens(example.candidates)
        if np.any(candidates == self.pad_id):
            raise RejectedInput("padding token used as a candidate in {}".format(example.source))
        return EncodedExample(document=self.encode_tokens(example.document),
                              query=self.encode_tokens(example.query),
                              candidates=candidates,
                              candidate_positions=candidate_positions(example),
                              answer_index=example.candidates.index(example.answer),
                              source=example.source,
                              index=index)

    def unknown_candidates(self, examples):
        return sorted({c for ex in examples for c in ex.candidates if c not in self})

    def encode_all(self, examples):
        unknown = self.unknown_candidates(examples)
        if unknown:
            logger.warning("%d candidate token(s) are not in the vocabulary and share the %s embedding, "
                           "e.g. %s", len(unknown), UNK, " ".join(unknown[:5]))
        return [self.encode(ex, i) for i, ex in enumerate(examples)]

    def save(self, path):
        with open(path, 'w', encoding='utf-8', newline='\n') as fp:
            for i, tok in enumerate(self.tokens):
                fp.write("{}\t{}\n".format(tok, i))
        return path

    @classmethod
    def load(cls, path):
        tokens = []
        with open(path, encoding='utf-8') as fp:
            for lineno, line in enumerate(fp, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, _, idx = line.rpartition("\t")
                if not tok or not idx.isdigit() or int(idx) != len(tokens):
                    raise ParseError("{}:{}: expected 'token<TAB>{}'".format(path, lineno, len(tokens)))
                tokens.append(tok)
        return cls(tokens)


def candidate_positions(example):
    """Occurrences of every candidate in the document, compared as strings.

    Candidates outside the vocabulary all encode to the unknown id, so their
    positions cannot be recovered from ids.
    """
    document = example.document
    return np.array([[tok == c for tok in document] for c in example.candidates],
                    dtype=bool).reshape(len(example.candidates), len(document))


def build_vocab(examples, min_count=1):
    """Reserved symbols, then tokens by descending frequency, ties lexicographic.

    Candidates and answers are always kept so every candidate has its own id.
    """
    if not examples:
        raise RejectedInput("cannot build a vocabulary from an empty corpus")
    if min_count < 1:
        raise RejectedInput("min_count must be >= 1")
    counts = Counter()
    protected = set()
    for ex in examples:
        counts.update(ex.document)
        counts.update(ex.query)
        protected.update(ex.candidates)
        protected.add(ex.answer)
    kept = [tok for tok in set(counts) | protected
            if tok not in RESERVED and (counts[tok] >= min_count or tok in protected)]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    dropped = len(set(counts) - set(kept) - set(RESERVED))
    if dropped:
        logger.info("%d token type(s) under min_count=%d map to %s", dropped, min_count, UNK)
    return Vocabulary(list(RESERVED) + kept)
