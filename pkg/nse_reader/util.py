"""
    Shared plumbing: error types, seeded random streams, the worker pool and
    the on-disk cache for generated datasets.
"""
import os
import hashlib
import pickle
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from appdirs import user_cache_dir

APP_NAME = "nse-reader"
logger = logging.getLogger(__name__)


class ReaderError(Exception):
    """Root of every error raised on purpose by nse_reader"""


class RejectedInput(ReaderError, ValueError):
    """Input violates the documented precondition of an operation"""


class ParseError(ReaderError):
    pass


class CheckpointError(ReaderError):
    pass


class TrainingDiverged(ReaderError):
    pass


def make_rng(*seeds):
    """PCG64 stream derived from one or more non-negative integers.

    Every random draw in the package goes through here so that runs are
    reproducible across platforms, e.g. make_rng(seed, epoch, batch).
    """
    ss = np.random.SeedSequence([int(s) for s in seeds])
    return np.random.Generator(np.random.PCG64(ss))


def kw_to_fname(**kw):
    name = "-".join([str(kw[k]) for k in sorted(kw) if k != "self"])
    if len(name) > 64:
        name = hashlib.sha1(name.encode("utf-8")).hexdigest()
    return name


def cached(app_name):
    """
        Pickles the result of a pure function under the user cache dir.

        cached - wrapper around decorator to make 'app_name' dynamic
        _cached - actual decorator
        wrapper - actual caching mechanism
    """
    def _cached(function):
        def wrapper(*args, **kw):
            kw.update(zip(function.__code__.co_varnames, args))
            env_dir = os.environ.get("NSE_READER_CACHE_DIR")
            if not env_dir:
                cache_dir = user_cache_dir(app_name, APP_NAME)
            else:
                cache_dir = os.path.join(env_dir, app_name)

            file_name = kw_to_fname(**kw)
            path = os.path.join(cache_dir, file_name)
            if not os.path.isfile(path):
                if not os.path.exists(cache_dir):
                    os.makedirs(cache_dir)
                j = function(**kw)
                with open(path, 'wb') as fp:
                    pickle.dump(j, fp)
                logger.debug("cached %s -> %s", function.__name__, path)
            else:
                with open(path, 'rb') as fp:
                    j = pickle.load(fp)
            return j
        wrapper.__wrapped__ = function
        return wrapper
    return _cached


def pool(function, params, use_threads=True, max_workers=2):
    """Maps function over params, results in the order of params"""
    if use_threads and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as ex:
            results = list(ex.map(function, *zip(*params)))
    else:
        results = []
        for param in params:
            results.append(function(*param))
    return results


def sha256_file(path, chunk=1 << 16):
    h = hashlib.sha256()
    with open(path, 'rb') as fp:
        while True:
            block = fp.read(chunk)
            if not block:
                break
            h.update(block)
    return h.hexdigest()
