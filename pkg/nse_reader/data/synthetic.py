"""
    Synthetic entity-slot cloze task.

    Documents are "subject relation object ." sentences over a handful of
    entities. The query copies one sentence whose (subject, relation) or
    (relation, object) pair is unique in its document and blanks the other
    entity, so the answer is recoverable from the document alone. With at
    least as many relations as sentences every relation appears once per
    document, so the relation token alone locates the answer. Candidates
    are the entities of the document, each used roughly equally often, and
    the answer is drawn uniformly among them, which keeps a
    most-frequent-candidate guess near chance.
"""
import logging
from collections import Counter
from dataclasses import dataclass, asdict

from nse_reader.util import RejectedInput, cached, make_rng
from .cbt import PLACEHOLDER, Example

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class SyntheticSpec:
    entities: int = 20
    relations: int = 40
    sentences: int = 20
    candidates: int = 10
    train: int = 2000
    dev: int = 500
    test: int = 500
    seed: int = 0

    def validate(self):
        if self.entities < 2 or self.relations < 1 or self.sentences < 1:
            raise RejectedInput("need at least 2 entities, 1 relation and 1 sentence")
        if self.candidates < 2:
            raise RejectedInput("need at least 2 candidates, got {}".format(self.candidates))
        if self.candidates > self.entities:
            raise RejectedInput("infeasible spec: {} candidates but only {} entities".format(
                self.candidates, self.entities))
        if self.sentences < self.candidates:
            raise RejectedInput("infeasible spec: {} sentences cannot hold {} candidates".format(
                self.sentences, self.candidates))
        if min(self.train, self.dev, self.test) < 0 or self.seed < 0:
            raise RejectedInput("split sizes and seed must be non-negative")
        return self

    @property
    def vocabulary_size(self):
        # entities, relations, "." and the reserved symbols
        return self.entities + self.relations + 1 + 3

    def to_dict(self):
        return asdict(self)


def entity_names(count):
    return ["ent{:03d}".format(i) for i in range(count)]


def relation_names(count):
    return ["rel{:02d}".format(j) for j in range(count)]


def generate_example(rng, spec, source=""):
    entities = entity_names(spec.entities)
    relations = relation_names(spec.relations)
    slots = 2 * spec.sentences
    for _ in range(MAX_ATTEMPTS):
        picked = [int(i) for i in rng.choice(spec.entities, size=spec.candidates, replace=False)]
        filler = [picked[int(i)] for i in rng.integers(spec.candidates, size=slots - spec.candidates)]
        order = rng.permutation(slots)
        fill = picked + filler
        slot_entities = [entities[fill[int(i)]] for i in order]
        if spec.relations >= spec.sentences:
            rels = rng.permutation(spec.relations)[:spec.sentences]
        else:
            rels = rng.integers(spec.relations, size=spec.sentences)
        sentences = [[slot_entities[2 * i], relations[int(rels[i])], slot_entities[2 * i + 1], "."]
                     for i in range(spec.sentences)]

        blank_object = bool(rng.random() < 0.5)
        target = entities[picked[int(rng.integers(spec.candidates))]]
        keys = [(s[0], s[1]) if blank_object else (s[1], s[2]) for s in sentences]
        counts = Counter(keys)
        slot = 2 if blank_object else 0
        unique = [i for i, key in enumerate(keys)
                  if counts[key] == 1 and sentences[i][slot] == target]
        if not unique:
            continue
        key = sentences[unique[int(rng.integers(len(unique)))]]
        if blank_object:
            query, answer = [key[0], key[1], PLACEHOLDER, "."], key[2]
        else:
            query, answer = [PLACEHOLDER, key[1], key[2], "."], key[0]
        return Example(sentences=sentences, query=query,
                       candidates=[entities[i] for i in picked],
                       answer=answer, source=source)
    raise RejectedInput("could not place a uniquely answerable query after {} attempts; "
                        "add relations or sentences".format(MAX_ATTEMPTS))


def generate_synthetic(spec):
    """(train, dev, test) Example lists; a pure function of spec."""
    spec.validate()
    splits = []
    for split_id, (name, size) in enumerate((("train", spec.train), ("dev", spec.dev), ("test", spec.test))):
        rng = make_rng(spec.seed, split_id)
        splits.append([generate_example(rng, spec, "synthetic-{}:{}".format(name, i))
                       for i in range(size)])
    logger.info("generated synthetic splits %s", [len(s) for s in splits])
    return tuple(splits)


synthetic_splits = cached("synthetic")(generate_synthetic)


def most_frequent_candidate(example):
    counts = Counter(example.document)
    best = max(counts[c] for c in example.candidates)
    return next(i for i, c in enumerate(example.candidates) if counts[c] == best)


def frequency_baseline(examples):
    """Accuracy of always answering with the most frequent candidate."""
    if not examples:
        raise RejectedInput("frequency baseline needs at least one example")
    hits = sum(ex.candidates[most_frequent_candidate(ex)] == ex.answer for ex in examples)
    return hits / len(examples)
