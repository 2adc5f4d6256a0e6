"""
    Trainable building blocks: embedding table, LSTM cell, bidirectional LSTM
    encoder, single-layer compose MLP and inverted dropout.

    All weights are drawn from uniform[-0.1, 0.1). Every function takes an
    optional leading batch axis; sequences are laid out column-wise, i.e. a
    sequence of length L encodes to an array whose last axis has extent L.
"""
from dataclasses import dataclass

import numpy as np

from nse_reader import numerics as nx
from nse_reader.util import RejectedInput

INIT_SCALE = 0.1


def uniform_init(rng, shape, dtype=np.float64, name=None):
    data = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape).astype(dtype)
    return nx.Tensor(data, requires_grad=True, name=name)


@dataclass
class DropoutSpec:
    rate: float = 0.2
    training: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise RejectedInput("dropout rate must be in [0, 1), got {}".format(self.rate))

    @property
    def active(self):
        return self.training and self.rate > 0.0


EVAL = DropoutSpec(rate=0.0, training=False)


@dataclass
class EmbeddingTable:
    weights: nx.Tensor

    @property
    def rows(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.weights.shape[1]


@dataclass
class LSTMParams:
    """Gates are packed column-wise in the order input, forget, output, candidate."""
    w_x: nx.Tensor
    w_h: nx.Tensor
    b: nx.Tensor

    @property
    def input_width(self):
        return self.w_x.shape[0]

    @property
    def hidden_width(self):
        return self.w_h.shape[0]

    def named(self, prefix):
        return [(prefix + ".w_x", self.w_x), (prefix + ".w_h", self.w_h), (prefix + ".b", self.b)]

    @staticmethod
    def shapes(prefix, input_width, hidden_width):
        return [(prefix + ".w_x", (input_width, 4 * hidden_width)),
                (prefix + ".w_h", (hidden_width, 4 * hidden_width)),
                (prefix + ".b", (4 * hidden_width,))]

    @classmethod
    def from_named(cls, arrays, prefix):
        return cls(arrays[prefix + ".w_x"], arrays[prefix + ".w_h"], arrays[prefix + ".b"])


@dataclass
class BiLSTMEncoder:
    forward: LSTMParams
    backward: LSTMParams

    def __post_init__(self):
        if self.forward.hidden_width != self.backward.hidden_width:
            raise RejectedInput("both directions must share a hidden width")

    @property
    def k(self):
        return 2 * self.forward.hidden_width

    def named(self, prefix):
        return self.forward.named(prefix + ".forward") + self.backward.named(prefix + ".backward")

    @staticmethod
    def shapes(prefix, input_width, k):
        if k % 2:
            raise RejectedInput("BiLSTM width k must be even, got {}".format(k))
        return (LSTMParams.shapes(prefix + ".forward", input_width, k // 2)
                + LSTMParams.shapes(prefix + ".backward", input_width, k // 2))

    @classmethod
    def from_named(cls, arrays, prefix):
        return cls(LSTMParams.from_named(arrays, prefix + ".forward"),
                   LSTMParams.from_named(arrays, prefix + ".backward"))


@dataclass
class MLPParams:
    w: nx.Tensor
    b: nx.Tensor

    @property
    def k(self):
        return self.w.shape[1]

    def named(self, prefix):
        return [(prefix + ".w", self.w), (prefix + ".b", self.b)]

    @staticmethod
    def shapes(prefix, k):
        return [(prefix + ".w", (3 * k, k)), (prefix + ".b", (k,))]

    @classmethod
    def from_named(cls, arrays, prefix):
        return cls(arrays[prefix + ".w"], arrays[prefix + ".b"])


def affine(x, w, b=None):
    """x @ w (+ b) for x of shape (in,) or (n, in)."""
    if x.shape[-1] != w.shape[0]:
        raise RejectedInput("input width {} does not match weights {}".format(x.shape[-1], w.shape))
    if x.ndim == 1:
        y = nx.reshape(nx.matmul(nx.reshape(x, (1, -1)), w), (-1,))
    else:
        y = nx.matmul(x, w)
    return y if b is None else y + b


def dropout(x, drop, rng):
    """Inverted dropout: survivors are scaled by 1 / (1 - rate)."""
    if not drop.active:
        return x
    if rng is None:
        raise RejectedInput("dropout in training mode needs a random stream")
    keep = (rng.random(x.shape) >= drop.rate).astype(x.dtype) / (1.0 - drop.rate)
    return x * nx.constant(keep)


def embed_sequence(tokens, table, drop=EVAL, rng=None):
    """Embeds ids of shape (L,) or (n, L) into (dim, L) or (n, dim, L)."""
    ids = np.asarray(tokens)
    if ids.size == 0 or ids.shape[-1] == 0:
        raise RejectedInput("cannot embed an empty sequence")
    if ids.dtype.kind not in "iu":
        ids = ids.astype(np.int64)
    e = nx.take(table.weights, ids)
    e = dropout(e, drop, rng)
    return nx.swapaxes(e, -1, -2)


def lstm_step(x, h_prev, c_prev, p):
    hid = p.hidden_width
    if x.shape[-1] != p.input_width:
        raise RejectedInput("lstm input width {} != {}".format(x.shape[-1], p.input_width))
    if h_prev.shape[-1] != hid or c_prev.shape[-1] != hid:
        raise RejectedInput("lstm state width must be {}".format(hid))
    z = affine(x, p.w_x) + affine(h_prev, p.w_h, p.b)
    i = nx.sigmoid(z[..., 0:hid])
    f = nx.sigmoid(z[..., hid:2 * hid])
    o = nx.sigmoid(z[..., 2 * hid:3 * hid])
    g = nx.tanh(z[..., 3 * hid:4 * hid])
    c = f * c_prev + i * g
    h = o * nx.tanh(c)
    return h, c


def _run_direction(emb, mask, p, positions):
    n = emb.shape[0]
    h = nx.constant(np.zeros((n, p.hidden_width), dtype=emb.dtype))
    c = h
    outs = {}
    for j in positions:
        h_new, c_new = lstm_step(emb[:, :, j], h, c, p)
        m = mask[:, j:j + 1]
        if m.all():
            h, c = h_new, c_new
        else:
            # padded rows keep their previous state
            keep = nx.constant(m)
            h = keep * h_new + (1.0 - keep) * h
            c = keep * c_new + (1.0 - keep) * c
        outs[j] = h
    return outs, h


def bilstm_encode(tokens, enc, table, drop=EVAL, rng=None, mask=None):
    """Context-embeds a sequence.

    Returns the memory, (k, L) or (n, k, L), whose column j concatenates the
    forward and backward hidden states at j, and the last state: forward
    hidden at the final real token next to backward hidden at position 0.
    """
    ids = np.asarray(tokens)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.shape[-1] == 0:
        raise RejectedInput("cannot encode an empty sequence")
    if enc.forward.input_width != table.dim:
        raise RejectedInput("encoder expects width {}, embeddings are {}".format(
            enc.forward.input_width, table.dim))
    n, length = ids.shape
    emb = embed_sequence(ids, table, drop, rng)
    if mask is None:
        mask = np.ones((n, length), dtype=emb.dtype)
    else:
        mask = np.asarray(mask, dtype=emb.dtype).reshape(n, length)

    fwd, fwd_last = _run_direction(emb, mask, enc.forward, range(length))
    bwd, _ = _run_direction(emb, mask, enc.backward, reversed(range(length)))
    columns = [nx.concat([fwd[j], bwd[j]], axis=-1) for j in range(length)]
    memory = nx.stack(columns, axis=-1)
    if not mask.all():
        memory = memory * nx.constant(mask[:, None, :])
    last = nx.concat([fwd_last, bwd[0]], axis=-1)
    if single:
        return memory[0], last[0]
    return memory, last


def mlp_forward(s_q, s_d, r, p):
    k = p.k
    for v in (s_q, s_d, r):
        if v.shape[-1] != k:
            raise RejectedInput("compose inputs must have width {}, got {}".format(k, v.shape))
    return nx.tanh(affine(nx.concat([s_q, s_d, r], axis=-1), p.w, p.b))
