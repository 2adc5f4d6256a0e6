"""
    ModelParams - every trainable weight of the reader under a stable name.
"""
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from nse_reader import numerics as nx
from nse_reader.util import RejectedInput, make_rng
from .layers import (BiLSTMEncoder, EmbeddingTable, LSTMParams, MLPParams,
                     uniform_init)


def param_shapes(vocab_size, k, embed_dim):
    """Ordered (name, shape) pairs; initialization draws in this order."""
    if vocab_size < 1 or k < 2 or embed_dim < 1:
        raise RejectedInput("vocab_size, k and embed_dim must be positive")
    return ([("embeddings", (vocab_size, embed_dim))]
            + BiLSTMEncoder.shapes("query_encoder", embed_dim, k)
            + BiLSTMEncoder.shapes("doc_encoder", embed_dim, k)
            + LSTMParams.shapes("read_lstm", 2 * k, k)
            + MLPParams.shapes("compose", k)
            + LSTMParams.shapes("write_lstm", k, k)
            + [("termination", (k,))])


@dataclass
class ModelParams:
    embeddings: EmbeddingTable
    query_encoder: BiLSTMEncoder
    doc_encoder: BiLSTMEncoder
    read_lstm: LSTMParams
    compose: MLPParams
    write_lstm: LSTMParams
    termination: nx.Tensor

    @property
    def k(self):
        return self.query_encoder.k

    @property
    def dtype(self):
        return self.termination.dtype

    @classmethod
    def initialize(cls, vocab_size, k, embed_dim, seed, dtype=np.float64):
        rng = make_rng(seed)
        arrays = OrderedDict()
        for name, shape in param_shapes(vocab_size, k, embed_dim):
            arrays[name] = uniform_init(rng, shape, dtype, name=name)
        return cls.from_named(arrays)

    @classmethod
    def from_named(cls, tensors):
        t = tensors
        return cls(embeddings=EmbeddingTable(t["embeddings"]),
                   query_encoder=BiLSTMEncoder.from_named(t, "query_encoder"),
                   doc_encoder=BiLSTMEncoder.from_named(t, "doc_encoder"),
                   read_lstm=LSTMParams.from_named(t, "read_lstm"),
                   compose=MLPParams.from_named(t, "compose"),
                   write_lstm=LSTMParams.from_named(t, "write_lstm"),
                   termination=t["termination"])

    @classmethod
    def from_arrays(cls, arrays, copy=True):
        tensors = OrderedDict()
        for name, data in arrays.items():
            data = np.array(data, copy=True) if copy else data
            tensors[name] = nx.Tensor(data, requires_grad=True, name=name)
        return cls.from_named(tensors)

    def named(self):
        pairs = ([("embeddings", self.embeddings.weights)]
                 + self.query_encoder.named("query_encoder")
                 + self.doc_encoder.named("doc_encoder")
                 + self.read_lstm.named("read_lstm")
                 + self.compose.named("compose")
                 + self.write_lstm.named("write_lstm")
                 + [("termination", self.termination)])
        return OrderedDict(pairs)

    def arrays(self):
        return OrderedDict((name, t.data) for name, t in self.named().items())

    def grads(self):
        return OrderedDict((name, t.grad if t.grad is not None else np.zeros_like(t.data))
                           for name, t in self.named().items())

    def zero_grad(self):
        for t in self.named().values():
            t.zero_grad()

    def shard(self):
        """Leaf copies sharing weight storage but owning their own gradients."""
        return ModelParams.from_arrays(self.arrays(), copy=False)
