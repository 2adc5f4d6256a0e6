import struct
from collections import OrderedDict

import numpy as np
import pytest
from pyfakefs.fake_filesystem_unittest import TestCase

from nse_reader.checkpoint import (MAGIC, VERSION, CheckpointRecord, from_bytes, load_checkpoint,
                                   save_checkpoint, to_bytes)
from nse_reader.config import TrainConfig
from nse_reader.data import RESERVED
from nse_reader.model import ModelParams
from nse_reader.training import OptimizerState, restore
from nse_reader.util import CheckpointError

VOCAB = list(RESERVED) + ["ent000", "ent001", "rel00", "."]


def record(dtype=np.float64):
    config = TrainConfig(k=4, embed_dim=3, dtype=np.dtype(dtype).name)
    params = ModelParams.initialize(len(VOCAB), 4, 3, seed=11, dtype=dtype)
    state = OptimizerState.zeros(params.arrays())
    state.step = 5
    state.m["termination"] += 0.25
    return CheckpointRecord(params=OrderedDict((k, a.copy()) for k, a in params.arrays().items()),
                            config=config.to_dict(), epoch=3, dev_accuracy=0.625, vocab=VOCAB,
                            optimizer=state.to_record())


class TestCheckpoint(TestCase):
    def setUp(self):
        self.setUpPyfakefs()

    def test_save_load_save_is_byte_identical(self):
        self.fs.create_dir("/run")
        save_checkpoint("/run/best.ckpt", record())
        loaded = load_checkpoint("/run/best.ckpt")
        save_checkpoint("/run/again.ckpt", loaded)
        with open("/run/best.ckpt", "rb") as a, open("/run/again.ckpt", "rb") as b:
            assert a.read() == b.read()

    def test_fields_survive(self):
        original = record()
        save_checkpoint("/best.ckpt", original)
        loaded = load_checkpoint("/best.ckpt")
        assert loaded.epoch == 3
        assert loaded.dev_accuracy == 0.625
        assert loaded.vocab == VOCAB
        assert loaded.config == original.config
        assert list(loaded.params) == list(original.params)
        for name, array in original.params.items():
            assert loaded.params[name].tobytes() == array.tobytes()
        assert loaded.optimizer["step"] == 5
        assert np.all(loaded.optimizer["m"]["termination"] == 0.25)

        params, config, vocab = restore(loaded)
        assert config.k == 4 and config.embed_dim == 3
        assert vocab.tokens == VOCAB
        assert params.embeddings.weights.shape == (len(VOCAB), 3)

    def test_float32(self):
        save_checkpoint("/f32.ckpt", record(np.float32))
        loaded = load_checkpoint("/f32.ckpt")
        assert all(a.dtype == np.float32 for a in loaded.params.values())
        assert restore(loaded)[1].dtype == "float32"

    def test_missing_file(self):
        with pytest.raises(CheckpointError, match="cannot read checkpoint"):
            load_checkpoint("/nowhere.ckpt")

    def test_corrupt_magic(self):
        data = bytearray(to_bytes(record()))
        data[:4] = b"JUNK"
        self.fs.create_file("/bad.ckpt", contents=bytes(data))
        with pytest.raises(CheckpointError, match="bad magic"):
            load_checkpoint("/bad.ckpt")


def test_version_mismatch():
    data = bytearray(to_bytes(record()))
    data[4:6] = struct.pack("<H", VERSION + 1)
    with pytest.raises(CheckpointError, match="incompatible"):
        from_bytes(bytes(data))


def test_truncated():
    data = to_bytes(record())
    for cut in (3, 20, len(data) // 2, len(data) - 1):
        with pytest.raises(CheckpointError):
            from_bytes(data[:cut])


def test_trailing_bytes():
    with pytest.raises(CheckpointError, match="trailing"):
        from_bytes(to_bytes(record()) + b"\0")


def test_layout_starts_with_magic_and_version():
    data = to_bytes(record())
    assert data[:4] == MAGIC
    assert struct.unpack("<H", data[4:6])[0] == VERSION
    assert to_bytes(record()) == data


def test_rejects_unsupported_dtype():
    bad = record()
    bad.params["termination"] = bad.params["termination"].astype(np.int32)
    with pytest.raises(CheckpointError):
        to_bytes(bad)


def test_rejects_invalid_utf8_text():
    data = to_bytes(record())
    config_len = struct.unpack_from("<I", data, 6)[0]
    vocab_at = 6 + 4 + config_len + 12
    vocab_len = struct.unpack_from("<I", data, vocab_at)[0]
    corrupt = bytearray(data)
    corrupt[vocab_at + 4:vocab_at + 6] = b"\xff\xfe"
    with pytest.raises(CheckpointError, match="vocabulary block is not valid UTF-8"):
        from_bytes(bytes(corrupt))

    name_at = vocab_at + 4 + vocab_len + 32 + 4 + 2
    corrupt = bytearray(data)
    corrupt[name_at] = 0xff
    with pytest.raises(CheckpointError, match="blob name is not valid UTF-8"):
        from_bytes(bytes(corrupt))
