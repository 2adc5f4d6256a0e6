"""
    Answer prediction: pointer-sum attention over candidate occurrences,
    halting-weighted mixtures and the cross-entropy objective.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from nse_reader import numerics as nx
from nse_reader.util import RejectedInput

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass
class PredictionDistribution:
    probabilities: np.ndarray
    candidates: Optional[Sequence] = None

    @property
    def chosen(self):
        return select_answer(self)


def _warn_absent(masks, valid):
    masks = np.asarray(masks)
    if masks.ndim < 2:
        masks = masks[None, :]
    empty = ~np.any(masks != 0, axis=-1)
    if valid is not None:
        empty &= np.asarray(valid, dtype=bool).reshape(empty.shape)
    if np.any(empty):
        logger.warning("%d candidate(s) never occur in their document; probability is 0",
                       int(np.count_nonzero(empty)))


def pointer_sum_from_attention(attention, masks, valid=None):
    """Sums attention mass over every position of each candidate.

    ``masks`` is (n, |D|) for one candidate per row or (n, C, |D|).
    """
    v = np.asarray(masks, dtype=attention.dtype)
    if v.shape[-1] != attention.shape[-1]:
        raise RejectedInput("answer mask length {} != document length {}".format(
            v.shape[-1], attention.shape[-1]))
    _warn_absent(v, valid)
    if v.ndim == attention.ndim:
        return nx.reduce_sum(attention * nx.constant(v), axis=-1)
    if attention.ndim == 1:
        return nx.reduce_sum(nx.reshape(attention, (1, -1)) * nx.constant(v), axis=-1)
    return nx.einsum("bd,bcd->bc", attention, nx.constant(v))


def pointer_sum(l_d, masks, pad_mask=None, valid=None):
    """P_t(a) = v^T softmax(l_d) with padding excluded from the softmax."""
    return pointer_sum_from_attention(nx.softmax(l_d, pad_mask), masks, valid)


def mixture_prediction(per_step, p):
    """P(a) = sum_t p_t * P_t(a)."""
    per_step, p = list(per_step), list(p)
    if len(per_step) != len(p) or not per_step:
        raise RejectedInput("need one halting weight per step: {} probs vs {} weights".format(
            len(per_step), len(p)))
    total = None
    for P_t, p_t in zip(per_step, p):
        P_t = P_t if isinstance(P_t, nx.Tensor) else nx.constant(P_t)
        p_t = p_t if isinstance(p_t, nx.Tensor) else nx.constant(p_t)
        extra = P_t.ndim - p_t.ndim
        if extra > 0:
            p_t = nx.reshape(p_t, p_t.shape + (1,) * extra)
        term = p_t * P_t
        total = term if total is None else total + term
    return total


def select_answer(dist):
    """Index of the most probable candidate; ties go to the lowest index."""
    probs = np.asarray(dist.probabilities, dtype=float).reshape(-1)
    if probs.size == 0:
        raise RejectedInput("cannot select from an empty candidate set")
    return int(np.argmax(probs))


def cross_entropy_loss(p_true):
    """-log(P(gold) + 1e-12), elementwise."""
    p_true = p_true if isinstance(p_true, nx.Tensor) else nx.constant(p_true)
    return -nx.log(p_true, floor=LOG_FLOOR)


def candidate_probabilities(result, candidate_masks, candidate_valid=None):
    """(n, C) answer probabilities and the per-step (n, C) list they derive from.

    The gating model answers from the last step; the adaptive model mixes all
    steps with its halting distribution.
    """
    per_step = [pointer_sum_from_attention(a, candidate_masks, candidate_valid if t == 0 else None)
                for t, a in enumerate(result.attention)]
    if result.p is None:
        final = per_step[-1]
    else:
        final = mixture_prediction(per_step, result.p)
    return final, per_step


def gold_probability(probs, gold_index):
    gold = np.asarray(gold_index, dtype=np.int64).reshape(-1)
    return probs[np.arange(gold.size), gold]


def batch_loss(probs, gold_index):
    """Mean cross-entropy of the gold candidates over the batch."""
    return nx.mean(cross_entropy_loss(gold_probability(probs, gold_index)))


def choose(probs, candidate_valid=None):
    """Argmax per row, ignoring padded candidate slots."""
    p = np.array(probs.data if isinstance(probs, nx.Tensor) else probs, dtype=float, copy=True)
    if candidate_valid is not None:
        p = np.where(np.asarray(candidate_valid, dtype=bool), p, -np.inf)
    return np.array([select_answer(PredictionDistribution(row)) for row in p], dtype=np.int64)
