"""
    Reads and writes cloze examples in the Children's Book Test layout:

        1 first context sentence
        ...
        20 last context sentence
        21 query with XXXXX inside<TAB>answer<TAB><TAB>cand1|cand2|...|cand10
        <blank line>

    Tokens are whitespace separated and case preserved.
"""
import os
import logging
from dataclasses import dataclass, field
from typing import List

from nse_reader.util import ParseError

logger = logging.getLogger(__name__)

PLACEHOLDER = "XXXXX"
PLACEHOLDER_ALIASES = ("@placeholder", "XXXXX")
CBT_CONTEXT_LINES = 20
CBT_CANDIDATES = 10


@dataclass
class Example:
    sentences: List[List[str]]
    query: List[str]
    candidates: List[str]
    answer: str
    source: str = field(default="", compare=False)

    @property
    def document(self):
        return [tok for sentence in self.sentences for tok in sentence]

    def problems(self):
        """Invariant violations that are kept but worth a warning."""
        found = []
        if self.answer not in self.candidates:
            found.append("answer {!r} is not a candidate".format(self.answer))
        if self.query.count(PLACEHOLDER) != 1:
            found.append("query has {} placeholders".format(self.query.count(PLACEHOLDER)))
        doc = set(self.document)
        missing = [c for c in self.candidates if c not in doc]
        if missing:
            found.append("candidates absent from document: {}".format(" ".join(missing)))
        return found


def format_example(example):
    lines = ["{} {}".format(i, " ".join(tokens)) for i, tokens in enumerate(example.sentences, 1)]
    lines.append("{} {}\t{}\t\t{}".format(len(example.sentences) + 1, " ".join(example.query),
                                          example.answer, "|".join(example.candidates)))
    return "\n".join(lines) + "\n"


def write_cbt_file(path, examples):
    with open(path, 'w', encoding='utf-8', newline='\n') as fp:
        for example in examples:
            fp.write(format_example(example))
            fp.write("\n")
    logger.info("wrote %d examples to %s", len(examples), path)
    return path


def _numbered(path, lineno, line):
    head, _, text = line.partition(" ")
    try:
        return int(head), text
    except ValueError:
        raise ParseError("{}:{}: line does not start with a line number: {!r}".format(
            path, lineno, line[:40]))


def _parse_record(path, start, lines, context_lines):
    name = os.path.basename(path)
    *context, (q_lineno, q_line) = lines
    if "\t" not in q_line:
        raise ParseError("{}:{}: record starting at line {} has no query line (expected line {})".format(
            path, q_lineno, start, len(lines) + 1))
    if context_lines is not None and len(context) != context_lines:
        raise ParseError("{}:{}: record starting at line {} has {} context lines, expected {}".format(
            path, q_lineno, start, len(context), context_lines))

    sentences = []
    for expected, (lineno, line) in enumerate(context, 1):
        number, text = _numbered(path, lineno, line)
        if number != expected:
            raise ParseError("{}:{}: expected line number {}, found {}".format(path, lineno, expected, number))
        sentences.append(text.split())

    number, text = _numbered(path, q_lineno, q_line)
    if number != len(context) + 1:
        raise ParseError("{}:{}: query line numbered {}, expected {}".format(
            path, q_lineno, number, len(context) + 1))
    fields = text.split("\t")
    if len(fields) < 3:
        raise ParseError("{}:{}: query line needs query, answer and candidates".format(path, q_lineno))
    query = [PLACEHOLDER if tok in PLACEHOLDER_ALIASES else tok for tok in fields[0].split()]
    answer = fields[1].strip()
    candidates = [c for c in fields[-1].strip().split("|") if c]
    if query.count(PLACEHOLDER) != 1:
        raise ParseError("{}:{}: query must hold exactly one {}".format(path, q_lineno, PLACEHOLDER))
    if answer not in candidates:
        raise ParseError("{}:{}: answer {!r} is not among the candidates".format(path, q_lineno, answer))
    return Example(sentences=sentences, query=query, candidates=candidates, answer=answer,
                   source="{}:{}".format(name, start))


def parse_cbt_file(path, context_lines=CBT_CONTEXT_LINES, expected_candidates=CBT_CANDIDATES):
    """Parses every blank-line separated record of a CBT-layout file.

    ``context_lines=None`` accepts any number of numbered context lines.
    Records whose candidate count differs from ``expected_candidates`` are
    kept; so are records whose candidates do not all occur in the document.
    """
    with open(path, encoding='utf-8') as fp:
        text = fp.read()

    records = []
    current = []
    start = None
    for lineno, raw in enumerate(text.split("\n"), 1):
        line = raw.rstrip("\r")
        if not line.strip():
            if current:
                records.append((start, current))
            current = []
            continue
        if not current:
            start = lineno
        current.append((lineno, line))
    if current:
        records.append((start, current))

    examples = [_parse_record(path, start, lines, context_lines) for start, lines in records]

    odd = [ex for ex in examples if expected_candidates and len(ex.candidates) != expected_candidates]
    if odd:
        logger.warning("%s: %d record(s) do not have %d candidates", path, len(odd), expected_candidates)
    absent = [ex for ex in examples if any(c not in set(ex.document) for c in ex.candidates)]
    if absent:
        logger.warning("%s: %d record(s) have candidates missing from the document", path, len(absent))
    logger.info("parsed %d examples from %s", len(examples), path)
    return examples
