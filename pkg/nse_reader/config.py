"""
    TrainConfig and its layering: defaults < preset < config file < flags.

    The config file is a plain ini file with one ``[nse]`` section:

        [nse]
        k = 32
        mode = adaptive
        steps = 3
"""
import os
import logging
import configparser
from dataclasses import dataclass, asdict, fields, replace
from typing import Optional

import numpy as np
from appdirs import user_config_dir

from nse_reader.util import APP_NAME, ReaderError, RejectedInput
from nse_reader.model.core import HaltingMode

logger = logging.getLogger(__name__)

SECTION = "nse"
PRESETS = {
    "cbt-ne": {"lr": 0.001, "batch": 32},
    "cbt-cn": {"lr": 0.0005, "batch": 32},
    "wdw": {"lr": 0.001, "batch": 25},
    "synthetic": {"lr": 0.005, "batch": 32, "dropout": 0.0},
}
CLIP_MODES = ("global", "element")
DTYPES = ("float64", "float32")


@dataclass(frozen=True)
class TrainConfig:
    k: int = 436
    embed_dim: int = 300
    mode: str = "gating"
    steps: int = 2
    lr: float = 0.001
    batch: int = 32
    clip: float = 15.0
    clip_mode: str = "global"
    dropout: float = 0.2
    patience: int = 1
    max_epochs: int = 50
    seed: int = 0
    l2: float = 0.0
    pool_size: Optional[int] = None
    keep_pool_tail: bool = True
    workers: int = 1
    dtype: str = "float64"
    min_count: int = 1
    cross_initial_states: bool = False

    def validate(self):
        if self.k < 2 or self.k % 2:
            raise RejectedInput("k must be a positive even number, got {}".format(self.k))
        if self.embed_dim < 1 or self.batch < 1 or self.max_epochs < 1 or self.workers < 1:
            raise RejectedInput("embed_dim, batch, max_epochs and workers must be positive")
        if self.lr <= 0 or self.clip <= 0:
            raise RejectedInput("learning rate and clip threshold must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise RejectedInput("dropout must be in [0, 1), got {}".format(self.dropout))
        if self.patience < 0 or self.l2 < 0 or self.seed < 0:
            raise RejectedInput("patience, l2 and seed must be non-negative")
        if self.pool_size is not None and self.pool_size < self.batch:
            raise RejectedInput("pool_size {} is smaller than the batch {}".format(self.pool_size, self.batch))
        if self.clip_mode not in CLIP_MODES:
            raise RejectedInput("clip_mode must be one of {}".format(", ".join(CLIP_MODES)))
        if self.dtype not in DTYPES:
            raise RejectedInput("dtype must be one of {}".format(", ".join(DTYPES)))
        self.halting()
        return self

    def halting(self):
        return HaltingMode.parse(self.mode, self.steps)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        return asdict(self)

    def update(self, **values):
        """Copy with every non-None value applied."""
        values = {k: v for k, v in values.items() if v is not None}
        unknown = set(values) - {f.name for f in fields(self)}
        if unknown:
            raise RejectedInput("unknown config key(s): {}".format(", ".join(sorted(unknown))))
        return replace(self, **values)

    @classmethod
    def from_dict(cls, values):
        return cls().update(**{k: coerce(k, v) for k, v in values.items()})


def _field_type(name):
    for f in fields(TrainConfig):
        if f.name == name:
            return f.type
    raise RejectedInput("unknown config key {!r}".format(name))


def coerce(name, value):
    kind = _field_type(name)
    if not isinstance(value, str):
        return value
    text = value.strip()
    if kind == Optional[int]:
        return None if text.lower() in ("", "none") else int(text)
    if kind is bool:
        states = configparser.ConfigParser.BOOLEAN_STATES
        if text.lower() not in states:
            raise RejectedInput("{} must be a boolean, got {!r}".format(name, value))
        return states[text.lower()]
    try:
        return kind(text)
    except ValueError:
        raise RejectedInput("{} must be {}, got {!r}".format(name, kind.__name__, value))


def default_config_path():
    env_path = os.environ.get("NSE_READER_CONFIG")
    if env_path:
        return env_path
    return os.path.join(user_config_dir(APP_NAME), "config.ini")


def read_config_file(path, required=True):
    if not os.path.isfile(path):
        if required:
            raise ReaderError("config file not found: {}".format(path))
        return {}
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise RejectedInput("{}: {}".format(path, e))
    extra = [s for s in parser.sections() if s != SECTION]
    if extra:
        raise RejectedInput("{}: unknown section(s) {}; use [{}]".format(path, ", ".join(extra), SECTION))
    if not parser.has_section(SECTION):
        return {}
    values = {key: coerce(key, raw) for key, raw in parser.items(SECTION)}
    logger.debug("read %d setting(s) from %s", len(values), path)
    return values


def resolve_config(preset=None, path=None, **flags):
    """Defaults, then preset, then config file, then flags (None means unset)."""
    config = TrainConfig()
    if preset:
        if preset not in PRESETS:
            raise RejectedInput("unknown preset {!r}, choose from {}".format(preset, ", ".join(PRESETS)))
        config = config.update(**PRESETS[preset])
    if path:
        config = config.update(**read_config_file(path))
    else:
        config = config.update(**read_config_file(default_config_path(), required=False))
    return config.update(**flags).validate()
