"""
    Batches of padded examples.

    Training batches follow the pool-sort heuristic: sample a pool from the
    examples not yet used this epoch, sort it by document length and take the
    first n as a batch. Evaluation batches are simply length sorted.
"""
import logging
from dataclasses import dataclass

import numpy as np

from nse_reader.util import RejectedInput, make_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Batch:
    doc_ids: np.ndarray          # (n, Ld) int64
    query_ids: np.ndarray        # (n, Lq) int64
    doc_mask: np.ndarray         # (n, Ld) 1.0 on tokens
    query_mask: np.ndarray       # (n, Lq)
    candidate_ids: np.ndarray    # (n, C) int64, pad id in unused slots
    candidate_valid: np.ndarray  # (n, C) bool
    candidate_masks: np.ndarray  # (n, C, Ld) from candidate strings, not ids
    gold: np.ndarray             # (n,) index into the candidates
    indices: np.ndarray          # (n,) positions in the source example list

    @property
    def size(self):
        return int(self.doc_ids.shape[0])

    def shard(self, start, stop):
        return Batch(*(getattr(self, f)[start:stop] for f in self.__dataclass_fields__))


def pad_batch(examples, indices, pad_id=0, dtype=np.float64):
    """Pads the selected EncodedExamples to shared document/query/candidate lengths."""
    chosen = [examples[int(i)] for i in indices]
    if not chosen:
        raise RejectedInput("cannot build an empty batch")
    n = len(chosen)
    ld = max(len(ex.document) for ex in chosen)
    lq = max(len(ex.query) for ex in chosen)
    nc = max(len(ex.candidates) for ex in chosen)

    doc_ids = np.full((n, ld), pad_id, dtype=np.int64)
    query_ids = np.full((n, lq), pad_id, dtype=np.int64)
    cand_ids = np.full((n, nc), pad_id, dtype=np.int64)
    doc_mask = np.zeros((n, ld), dtype=dtype)
    query_mask = np.zeros((n, lq), dtype=dtype)
    valid = np.zeros((n, nc), dtype=bool)
    cand_masks = np.zeros((n, nc, ld), dtype=dtype)
    for row, ex in enumerate(chosen):
        doc_ids[row, :len(ex.document)] = ex.document
        doc_mask[row, :len(ex.document)] = 1.0
        query_ids[row, :len(ex.query)] = ex.query
        query_mask[row, :len(ex.query)] = 1.0
        cand_ids[row, :len(ex.candidates)] = ex.candidates
        valid[row, :len(ex.candidates)] = True
        positions = ex.candidate_positions
        cand_masks[row, :positions.shape[0], :positions.shape[1]] = positions

    gold = np.array([ex.answer_index for ex in chosen], dtype=np.int64)
    return Batch(doc_ids, query_ids, doc_mask, query_mask, cand_ids, valid, cand_masks, gold,
                 np.asarray(indices, dtype=np.int64))


def _doc_lengths(examples, idx):
    return np.array([len(examples[int(i)].document) for i in idx], dtype=np.int64)


def make_epoch_batches(examples, n, pool_size=None, seed=0, epoch=0, pad_id=0, dtype=np.float64,
                       keep_tail=True):
    """Pool-sorted training batches for one epoch.

    Pools are drawn without replacement from the examples not yet batched.
    Once fewer than pool_size remain, ``keep_tail`` shrinks the pool to what
    is left until fewer than n examples remain; otherwise the rest of the
    epoch is dropped.
    """
    if n < 1:
        raise RejectedInput("batch size must be >= 1, got {}".format(n))
    if n > len(examples):
        raise RejectedInput("batch size {} exceeds the {} training examples".format(n, len(examples)))
    pool_size = 32 * n if pool_size is None else int(pool_size)
    if pool_size < n:
        raise RejectedInput("pool size {} is smaller than the batch size {}".format(pool_size, n))
    if pool_size > len(examples):
        logger.warning("pool size %d clamped to the %d training examples", pool_size, len(examples))
        pool_size = len(examples)

    rng = make_rng(seed, epoch)
    remaining = np.arange(len(examples))
    batches = []
    floor = n if keep_tail else pool_size
    while remaining.size >= floor:
        size = min(pool_size, remaining.size)
        pool = remaining[rng.choice(remaining.size, size=size, replace=False)]
        order = np.argsort(_doc_lengths(examples, pool), kind="stable")
        chosen = pool[order[:n]]
        batches.append(pad_batch(examples, chosen, pad_id, dtype))
        remaining = np.setdiff1d(remaining, chosen, assume_unique=True)
    logger.debug("epoch %d: %d batches, %d examples left over", epoch, len(batches), remaining.size)
    return batches


def make_eval_batches(examples, n, pad_id=0, dtype=np.float64):
    """Deterministic length-sorted batches covering every example once."""
    if not examples:
        raise RejectedInput("cannot evaluate an empty split")
    if n < 1:
        raise RejectedInput("batch size must be >= 1, got {}".format(n))
    order = np.argsort(_doc_lengths(examples, range(len(examples))), kind="stable")
    return [pad_batch(examples, order[i:i + n], pad_id, dtype) for i in range(0, len(order), n)]
