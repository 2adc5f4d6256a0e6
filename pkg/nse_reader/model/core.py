"""
    The hypothesis-test loop.

    Each step reads (query/document alignment and states), composes a feature
    vector, writes the retrieved document state into the query memory and
    then either gates the update (query gating) or emits a termination score
    (adaptive computation). The document memory is a fixed fact store and is
    never written.

    Shapes carry a leading batch axis n: memories are (n, k, L) with column j
    holding token j, states are (n, k), alignments are (n, L).
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np

from nse_reader import numerics as nx
from nse_reader.util import RejectedInput
from .layers import EVAL, bilstm_encode, lstm_step, mlp_forward

logger = logging.getLogger(__name__)


class HaltingVariant(Enum):
    QUERY_GATING = "gating"
    ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class HaltingMode:
    variant: HaltingVariant
    steps: int

    def __post_init__(self):
        if int(self.steps) < 1:
            raise RejectedInput("the loop needs at least one step, got T={}".format(self.steps))

    @classmethod
    def parse(cls, mode, steps):
        try:
            variant = HaltingVariant(mode)
        except ValueError:
            raise RejectedInput("unknown halting mode {!r}, use 'gating' or 'adaptive'".format(mode))
        return cls(variant, int(steps))

    @property
    def gating(self):
        return self.variant is HaltingVariant.QUERY_GATING

    def __str__(self):
        return "{}(T={})".format(self.variant.value, self.steps)


@dataclass
class MemoryPair:
    query_memory: nx.Tensor
    doc_memory: nx.Tensor


@dataclass
class PadMasks:
    """1.0 on real tokens, 0.0 on <pad>; shapes (n, |Q|) and (n, |D|)."""
    query: np.ndarray
    doc: np.ndarray

    @classmethod
    def full(cls, mem):
        n, _, lq = mem.query_memory.shape
        ld = mem.doc_memory.shape[-1]
        dt = mem.query_memory.dtype
        return cls(np.ones((n, lq), dtype=dt), np.ones((n, ld), dtype=dt))


@dataclass
class ControllerState:
    s_q: nx.Tensor
    s_d: nx.Tensor
    read_h: nx.Tensor
    read_c: nx.Tensor
    write_h: nx.Tensor
    write_c: nx.Tensor


@dataclass
class ReadResult:
    r: nx.Tensor
    l_q: nx.Tensor
    s_q: nx.Tensor
    z_q: nx.Tensor
    l_d: nx.Tensor
    attention: nx.Tensor
    s_d: nx.Tensor
    read_h: nx.Tensor
    read_c: nx.Tensor


@dataclass
class StepTrace:
    l_q: nx.Tensor
    l_d: nx.Tensor
    z_q: nx.Tensor
    c: nx.Tensor
    attention: nx.Tensor
    g_q: Optional[nx.Tensor] = None
    e: Optional[nx.Tensor] = None
    p: Optional[nx.Tensor] = None


@dataclass
class ForwardResult:
    mode: HaltingMode
    traces: List[StepTrace]
    memory: MemoryPair
    masks: PadMasks
    p: Optional[List[nx.Tensor]] = None
    l_d: List[nx.Tensor] = field(default_factory=list)

    @property
    def attention(self):
        return [t.attention for t in self.traces]

    def expected_steps(self):
        """Sum over t of t * p_t per example; T for the gating model."""
        if self.p is None:
            n = self.memory.doc_memory.shape[0]
            return np.full(n, float(self.mode.steps))
        return np.sum([(t + 1) * np.broadcast_to(p.data, self.p[-1].shape)
                       for t, p in enumerate(self.p)], axis=0)


def _row(v):
    """(n, L) -> (n, 1, L) so it scales memory columns."""
    return nx.reshape(v, v.shape[:-1] + (1, v.shape[-1]))


def _col(v):
    """(n, k) -> (n, k, 1) so it broadcasts over memory columns."""
    return nx.reshape(v, v.shape + (1,))


def _preserve_padding(weights, mask):
    """Forces weight 1 (keep the column) at padded query slots."""
    if mask is None or np.all(mask):
        return weights
    m = nx.constant(mask, dtype=weights.dtype)
    return weights * m + (1.0 - m)


def init_states(query_last, doc_last, cross=False):
    """Controller states before step 1.

    s_q starts from the query encoder's last state and s_d from the document
    encoder's; ``cross`` swaps them. Read and write LSTM states start at zero.
    """
    if query_last.shape != doc_last.shape:
        raise RejectedInput("query and document states differ in shape: {} vs {}".format(
            query_last.shape, doc_last.shape))
    zeros = nx.constant(np.zeros(query_last.shape, dtype=query_last.dtype))
    s_q, s_d = (doc_last, query_last) if cross else (query_last, doc_last)
    return ControllerState(s_q=s_q, s_d=s_d, read_h=zeros, read_c=zeros,
                           write_h=zeros, write_c=zeros)


def read_step(state, mem, masks, read_params):
    M_q, M_d = mem.query_memory, mem.doc_memory
    k = M_q.shape[-2]
    if M_d.shape[-2] != k or state.s_q.shape[-1] != k or state.s_d.shape[-1] != k:
        raise RejectedInput("memories and states disagree on k: {} / {} / {}".format(
            M_q.shape, M_d.shape, state.s_q.shape))
    r, read_c = lstm_step(nx.concat([state.s_q, state.s_d], axis=-1),
                          state.read_h, state.read_c, read_params)
    l_q = nx.einsum("bk,bkl->bl", r, M_q)
    s_q = nx.einsum("bl,bkl->bk", nx.softmax(l_q, masks.query), M_q)
    z_q = nx.sigmoid(l_q)
    l_d = nx.einsum("bk,bkl->bl", s_q, M_d)
    attention = nx.softmax(l_d, masks.doc)
    s_d = nx.einsum("bl,bkl->bk", attention, M_d)
    return ReadResult(r=r, l_q=l_q, s_q=s_q, z_q=z_q, l_d=l_d, attention=attention,
                      s_d=s_d, read_h=r, read_c=read_c)


def compose_step(s_q, s_d, r, params):
    return mlp_forward(s_q, s_d, r, params)


def write_memory(M_prev, z_q, s_d, query_mask=None):
    """Column j becomes M_prev[:, j] * z_j + s_d * (1 - z_j)."""
    if np.any(z_q.data < 0.0) or np.any(z_q.data > 1.0):
        raise RejectedInput("memory key values must lie in [0, 1]")
    if M_prev.shape[-1] != z_q.shape[-1] or M_prev.shape[-2] != s_d.shape[-1]:
        raise RejectedInput("write shapes disagree: M {} z {} s_d {}".format(
            M_prev.shape, z_q.shape, s_d.shape))
    z = _row(_preserve_padding(z_q, query_mask))
    return M_prev * z + _col(s_d) * (1.0 - z)


def gate_memory(M_new, M_prev, c, write_h, write_c, write_params, query_mask=None):
    """Word-level query gating; gate 1 keeps the old column, 0 takes the update.

    Returns the gated memory, the raw gate and the new write-LSTM state.
    """
    if M_new.shape != M_prev.shape:
        raise RejectedInput("gate shapes disagree: {} vs {}".format(M_new.shape, M_prev.shape))
    w, write_c = lstm_step(c, write_h, write_c, write_params)
    if w.shape[-1] != M_prev.shape[-2]:
        raise RejectedInput("write state width {} != memory width {}".format(w.shape[-1], M_prev.shape[-2]))
    g_q = nx.sigmoid(nx.einsum("bk,bkl->bl", w, M_prev))
    g = _row(_preserve_padding(g_q, query_mask))
    # M_new * (1 - g) + M_prev * g, arranged so that M_new == M_prev is exact
    gated = M_prev + (1.0 - g) * (M_new - M_prev)
    return gated, g_q, w, write_c


def termination_score(c, o, write_h, write_c, write_params):
    if o.shape[-1] != write_params.hidden_width:
        raise RejectedInput("termination projection has width {}, expected {}".format(
            o.shape[-1], write_params.hidden_width))
    w, write_c = lstm_step(c, write_h, write_c, write_params)
    e = nx.sigmoid(nx.einsum("bk,k->b", w, o))
    return e, w, write_c


def halting_distribution(e, steps, shape=()):
    """Stick-breaking halting probabilities with the remainder forced onto step T.

    ``e`` holds the termination scores of steps 1..T-1 (a T-th score, if
    given, is ignored). Returns T tensors.
    """
    steps = int(steps)
    if steps < 1:
        raise RejectedInput("T must be at least 1")
    e = list(e)
    if len(e) not in (steps - 1, steps):
        raise RejectedInput("expected {} termination scores for T={}, got {}".format(
            steps - 1, steps, len(e)))
    e = [s if isinstance(s, nx.Tensor) else nx.constant(s) for s in e[:steps - 1]]
    for s in e:
        if np.any(s.data < 0.0) or np.any(s.data > 1.0):
            raise RejectedInput("termination scores must lie in [0, 1]")
    if e:
        shape = e[0].shape
    ps = []
    remain = None
    for s in e:
        p = s if remain is None else s * remain
        remain = (1.0 - s) if remain is None else remain * (1.0 - s)
        ps.append(p)
    # what is left of the stick, 1 - sum of the earlier p, stays >= 0
    ps.append(nx.constant(np.ones(shape)) if remain is None else remain)
    return ps


def encode(params, doc_ids, query_ids, doc_mask=None, query_mask=None, drop=EVAL, rng=None):
    """Initial memories (M^q_0, M^d) and encoder last states."""
    M_d, d_last = bilstm_encode(doc_ids, params.doc_encoder, params.embeddings, drop, rng, doc_mask)
    M_q, q_last = bilstm_encode(query_ids, params.query_encoder, params.embeddings, drop, rng, query_mask)
    return MemoryPair(query_memory=M_q, doc_memory=M_d), q_last, d_last


def hypothesis_loop(params, mem, state, masks, mode):
    traces = []
    scores = []
    for t in range(1, mode.steps + 1):
        rd = read_step(state, mem, masks, params.read_lstm)
        c = compose_step(rd.s_q, rd.s_d, rd.r, params.compose)
        M_new = write_memory(mem.query_memory, rd.z_q, rd.s_d, masks.query)
        trace = StepTrace(l_q=rd.l_q, l_d=rd.l_d, z_q=rd.z_q, c=c, attention=rd.attention)
        write_h, write_c = state.write_h, state.write_c
        if mode.gating:
            M_next, g_q, write_h, write_c = gate_memory(M_new, mem.query_memory, c, write_h, write_c,
                                                        params.write_lstm, masks.query)
            trace.g_q = g_q
        else:
            M_next = M_new
            if t < mode.steps:
                e, write_h, write_c = termination_score(c, params.termination, write_h, write_c,
                                                        params.write_lstm)
                trace.e = e
                scores.append(e)
        traces.append(trace)
        mem = MemoryPair(query_memory=M_next, doc_memory=mem.doc_memory)
        state = ControllerState(s_q=rd.s_q, s_d=rd.s_d, read_h=rd.read_h, read_c=rd.read_c,
                                write_h=write_h, write_c=write_c)

    result = ForwardResult(mode=mode, traces=traces, memory=mem, masks=masks,
                           l_d=[t.l_d for t in traces])
    if not mode.gating:
        n = mem.doc_memory.shape[0]
        result.p = halting_distribution(scores, mode.steps, shape=(n,))
        for trace, p in zip(traces, result.p):
            trace.p = p
    return result


def forward_pass(params, doc_ids, query_ids, mode, doc_mask=None, query_mask=None,
                 drop=EVAL, rng=None, cross_initial_states=False):
    """Encodes a (batch of) document/query pair(s) and runs T loop steps."""
    doc_ids = np.atleast_2d(doc_ids)
    query_ids = np.atleast_2d(query_ids)
    mem, q_last, d_last = encode(params, doc_ids, query_ids, doc_mask, query_mask, drop, rng)
    masks = PadMasks.full(mem)
    if query_mask is not None:
        masks.query = np.asarray(query_mask, dtype=params.dtype).reshape(masks.query.shape)
    if doc_mask is not None:
        masks.doc = np.asarray(doc_mask, dtype=params.dtype).reshape(masks.doc.shape)
    state = init_states(q_last, d_last, cross=cross_initial_states)
    return hypothesis_loop(params, mem, state, masks, mode)
