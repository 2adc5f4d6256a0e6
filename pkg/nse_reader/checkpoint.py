"""
    Versioned binary checkpoint container.

    Layout, all little-endian:

        magic    4s   b"NSEC"
        version  u16
        config   u32 length + JSON (sorted keys)
        epoch    u32
        dev_acc  f64
        vocab    u32 length + UTF-8 tokens joined by newlines
        adam     u64 step, f64 beta1, f64 beta2, f64 eps
        blobs    u32 count, then per blob:
                 u16 name length + name, u8 dtype code, u8 ndim, ndim x u32 shape, raw data

    Parameter blobs come first in ModelParams.named() order, followed by the
    Adam moments named "adam.m.<param>" and "adam.v.<param>". Nothing in the
    file depends on the clock, so equal states give equal bytes.
"""
import json
import struct
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from nse_reader.util import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"NSEC"
VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


@dataclass
class CheckpointRecord:
    params: Dict[str, np.ndarray]
    config: dict
    epoch: int
    dev_accuracy: float
    vocab: List[str]
    optimizer: Optional[dict] = None


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.pos = 0

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("{}: truncated checkpoint at byte {}".format(self.path, self.pos))
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values if len(values) > 1 else values[0]

    def take(self, size):
        if self.pos + size > len(self.data):
            raise CheckpointError("{}: truncated checkpoint at byte {}".format(self.path, self.pos))
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def block(self):
        return self.take(self.unpack("<I"))

    def text(self, chunk, what):
        try:
            return chunk.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("{}: {} is not valid UTF-8 ({})".format(self.path, what, e.reason))


def _block(payload):
    return struct.pack("<I", len(payload)) + payload


def _blob(name, array):
    array = np.asarray(array)
    code = DTYPE_CODES.get(array.dtype)
    if code is None:
        raise CheckpointError("cannot store {} with dtype {}".format(name, array.dtype))
    encoded = name.encode("utf-8")
    head = struct.pack("<H", len(encoded)) + encoded
    head += struct.pack("<BB", code, array.ndim) + struct.pack("<{}I".format(array.ndim), *array.shape)
    return head + np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes()


def to_bytes(record):
    config = json.dumps(record.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    opt = record.optimizer or {"step": 0, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "m": {}, "v": {}}
    blobs = list(record.params.items())
    blobs += [("adam.m." + name, arr) for name, arr in opt["m"].items()]
    blobs += [("adam.v." + name, arr) for name, arr in opt["v"].items()]

    out = [struct.pack("<4sH", MAGIC, VERSION),
           _block(config),
           struct.pack("<Id", int(record.epoch), float(record.dev_accuracy)),
           _block("\n".join(record.vocab).encode("utf-8")),
           struct.pack("<Qddd", int(opt["step"]), opt["beta1"], opt["beta2"], opt["eps"]),
           struct.pack("<I", len(blobs))]
    out += [_blob(name, arr) for name, arr in blobs]
    return b"".join(out)


def from_bytes(data, path="<bytes>"):
    r = _Reader(data, path)
    magic, version = r.unpack("<4sH")
    if magic != MAGIC:
        raise CheckpointError("{}: not a checkpoint (bad magic bytes {!r})".format(path, magic))
    if version != VERSION:
        raise CheckpointError("{}: checkpoint version {} is incompatible with this reader (version {})".format(
            path, version, VERSION))
    try:
        config = json.loads(r.block().decode("utf-8"))
    except ValueError as e:
        raise CheckpointError("{}: unreadable config block: {}".format(path, e))
    epoch, dev_accuracy = r.unpack("<Id")
    vocab_text = r.text(r.block(), "vocabulary block")
    vocab = vocab_text.split("\n") if vocab_text else []
    step, beta1, beta2, eps = r.unpack("<Qddd")

    params, m, v = OrderedDict(), OrderedDict(), OrderedDict()
    for _ in range(r.unpack("<I")):
        name = r.text(r.take(r.unpack("<H")), "blob name")
        code, ndim = r.unpack("<BB")
        if code not in DTYPES:
            raise CheckpointError("{}: unknown dtype code {} for {}".format(path, code, name))
        shape = tuple(int(s) for s in np.atleast_1d(r.unpack("<{}I".format(ndim)))) if ndim else ()
        dtype = DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        array = np.frombuffer(r.take(size), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        if name.startswith("adam.m."):
            m[name[len("adam.m."):]] = array
        elif name.startswith("adam.v."):
            v[name[len("adam.v."):]] = array
        else:
            params[name] = array
    if r.pos != len(data):
        raise CheckpointError("{}: {} trailing bytes after the last blob".format(path, len(data) - r.pos))
    optimizer = {"step": int(step), "beta1": beta1, "beta2": beta2, "eps": eps, "m": m, "v": v}
    return CheckpointRecord(params=params, config=config, epoch=int(epoch),
                            dev_accuracy=float(dev_accuracy), vocab=vocab, optimizer=optimizer)


def save_checkpoint(path, record):
    with open(path, 'wb') as fp:
        fp.write(to_bytes(record))
    logger.info("saved checkpoint epoch=%d dev_accuracy=%.4f to %s", record.epoch, record.dev_accuracy, path)
    return path


def load_checkpoint(path):
    try:
        with open(path, 'rb') as fp:
            data = fp.read()
    except OSError as e:
        raise CheckpointError("cannot read checkpoint {}: {}".format(path, e.strerror))
    return from_bytes(data, path)
