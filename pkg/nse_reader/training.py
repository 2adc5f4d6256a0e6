"""
    Training and evaluation.

    One optimizer step: pool-sorted batch -> forward/backward (optionally
    split into shards run on the thread pool) -> gradient clipping -> Adam.
    After every epoch the dev split is scored with dropout off and the best
    epoch is kept as a CheckpointRecord.
"""
import csv
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, asdict, field
from datetime import datetime, timezone
from typing import List, Optional

import click
import numpy as np
try:
    import pandas as pd
except ImportError:
    pd = None

from nse_reader import numerics as nx
from nse_reader.checkpoint import CheckpointRecord
from nse_reader.config import TrainConfig
from nse_reader.data import build_vocab, make_epoch_batches, make_eval_batches, Vocabulary
from nse_reader.model import (DropoutSpec, EVAL, ModelParams, batch_loss,
                              candidate_probabilities, choose, forward_pass)
from nse_reader.util import RejectedInput, TrainingDiverged, make_rng, pool, sha256_file

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class OptimizerState:
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS

    @classmethod
    def zeros(cls, arrays):
        return cls(m=OrderedDict((k, np.zeros_like(a)) for k, a in arrays.items()),
                   v=OrderedDict((k, np.zeros_like(a)) for k, a in arrays.items()))

    def to_record(self):
        return {"step": self.step, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "m": OrderedDict((k, a.copy()) for k, a in self.m.items()),
                "v": OrderedDict((k, a.copy()) for k, a in self.v.items())}

    @classmethod
    def from_record(cls, record):
        return cls(m=OrderedDict((k, np.array(a)) for k, a in record["m"].items()),
                   v=OrderedDict((k, np.array(a)) for k, a in record["v"].items()),
                   step=int(record["step"]), beta1=record["beta1"], beta2=record["beta2"],
                   eps=record["eps"])


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))


def clip_global_norm(grads, threshold=15.0):
    """Scales every gradient by threshold / norm when the global L2 norm exceeds threshold."""
    if threshold <= 0:
        raise RejectedInput("clip threshold must be positive, got {}".format(threshold))
    norm = global_norm(grads)
    if norm <= threshold:
        return OrderedDict(grads)
    scale = threshold / norm
    return OrderedDict((name, g * scale) for name, g in grads.items())


def clip_elementwise(grads, threshold=15.0):
    if threshold <= 0:
        raise RejectedInput("clip threshold must be positive, got {}".format(threshold))
    return OrderedDict((name, np.clip(g, -threshold, threshold)) for name, g in grads.items())


def adam_step(params, grads, state, lr, l2=0.0):
    """Bias-corrected Adam update applied in place to the ``params`` arrays."""
    if list(params) != list(grads) or list(params) != list(state.m):
        raise RejectedInput("parameters, gradients and moments must name the same tensors")
    for name, p in params.items():
        if grads[name].shape != p.shape or state.m[name].shape != p.shape:
            raise RejectedInput("shape mismatch for {}: param {} grad {}".format(
                name, p.shape, grads[name].shape))
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name] + l2 * p if l2 else grads[name]
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


class EarlyStopping:
    """Stops after ``patience`` consecutive epochs without a strictly better score.

    patience 0 never stops.
    """
    def __init__(self, patience=1):
        if patience < 0:
            raise RejectedInput("patience must be >= 0")
        self.patience = patience
        self.best = None
        self.best_epoch = None
        self.bad_epochs = 0

    def update(self, epoch, score):
        if self.best is None or score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self):
        return self.patience > 0 and self.bad_epochs >= self.patience


class TrainLog:
    """Append-only JSON-lines log; ``path=None`` logs nowhere."""
    def __init__(self, path=None):
        self.path = path

    def write(self, **record):
        if not self.path:
            return
        with open(self.path, 'a', encoding='utf-8') as fp:
            fp.write(json.dumps(record, sort_keys=True) + "\n")

    def step(self, epoch, step, loss):
        self.write(event="step", epoch=epoch, step=step, loss=loss)

    def epoch(self, epoch, dev_accuracy, mean_loss, best_epoch):
        self.write(event="epoch", epoch=epoch, dev_accuracy=dev_accuracy, mean_loss=mean_loss,
                   best_epoch=best_epoch)


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    config: dict
    seed: int
    datasets: List[dict]
    out_dir: str
    started: str = field(default_factory=_now)
    finished: Optional[str] = None

    @classmethod
    def create(cls, config, dataset_paths, out_dir):
        datasets = [{"path": str(p), "sha256": sha256_file(p)} for p in dataset_paths]
        return cls(config=config.to_dict(), seed=config.seed, datasets=datasets, out_dir=str(out_dir))

    def write(self, path):
        with open(path, 'w', encoding='utf-8') as fp:
            json.dump(asdict(self), fp, sort_keys=True, indent=2)
            fp.write("\n")
        return path

    def finish(self, path):
        self.finished = _now()
        return self.write(path)


def _shard_gradients(params, batch, mode, drop, rng, cross):
    local = params.shard()
    result = forward_pass(local, batch.doc_ids, batch.query_ids, mode, batch.doc_mask, batch.query_mask,
                          drop=drop, rng=rng, cross_initial_states=cross)
    probs, _ = candidate_probabilities(result, batch.candidate_masks, batch.candidate_valid)
    loss = batch_loss(probs, batch.gold)
    nx.backward(loss)
    return loss.item(), local.grads(), batch.size


def batch_gradients(params, batch, config, seeds=(0,)):
    """Mean loss and gradients of one batch.

    With ``config.workers`` > 1 the batch is cut into contiguous shards run on
    the thread pool; shard results are reduced in shard order.
    """
    mode = config.halting()
    drop = DropoutSpec(config.dropout, training=True)
    parts = [p for p in np.array_split(np.arange(batch.size), min(config.workers, batch.size)) if p.size]
    jobs = [(params, batch.shard(int(p[0]), int(p[-1]) + 1), mode, drop,
             make_rng(*seeds, i), config.cross_initial_states) for i, p in enumerate(parts)]
    results = pool(_shard_gradients, jobs, max_workers=config.workers)

    loss = 0.0
    grads = OrderedDict((name, np.zeros_like(a)) for name, a in params.arrays().items())
    for shard_loss, shard_grads, size in results:
        weight = size / batch.size
        loss += weight * shard_loss
        for name, g in shard_grads.items():
            grads[name] += weight * g
    return loss, grads


def evaluate(params, examples, mode, batch_size=32, cross_initial_states=False):
    """Accuracy and per-example records (ordered like ``examples``), dropout off."""
    if isinstance(mode, TrainConfig):
        mode = mode.halting()
    batches = make_eval_batches(examples, batch_size, dtype=params.dtype)
    records = [None] * len(examples)
    for batch in batches:
        result = forward_pass(params, batch.doc_ids, batch.query_ids, mode, batch.doc_mask,
                              batch.query_mask, drop=EVAL, cross_initial_states=cross_initial_states)
        probs, per_step = candidate_probabilities(result, batch.candidate_masks, batch.candidate_valid)
        predicted = choose(probs, batch.candidate_valid)
        step_predicted = [choose(p, batch.candidate_valid) for p in per_step]
        expected = result.expected_steps()
        for row, idx in enumerate(batch.indices):
            gold, guess = int(batch.gold[row]), int(predicted[row])
            record = OrderedDict([
                ("index", int(idx)),
                ("source", examples[idx].source),
                ("gold", gold),
                ("predicted", guess),
                ("p_gold", float(probs.data[row, gold])),
                ("p_predicted", float(probs.data[row, guess])),
                ("correct", int(gold == guess)),
                ("expected_steps", float(expected[row])),
            ])
            for t, step in enumerate(step_predicted, 1):
                record["step_{}_correct".format(t)] = int(step[row] == gold)
            records[int(idx)] = record
    accuracy = sum(r["correct"] for r in records) / len(records)
    return accuracy, records


def records_csv(records, path):
    if not records:
        raise RejectedInput("no records to write")
    with open(path, 'w', newline='', encoding='utf-8') as fp:
        writer = csv.DictWriter(fp, fieldnames=list(records[0]))
        writer.writeheader()
        writer.writerows(records)
    return path


def records_df(records):
    if not pd:
        raise ModuleNotFoundError("Please install pandas using \n pip install pandas")
    return pd.DataFrame.from_records(records)


def snapshot(params, state, config, epoch, dev_accuracy, vocab):
    return CheckpointRecord(params=OrderedDict((k, a.copy()) for k, a in params.arrays().items()),
                            config=config.to_dict(), epoch=epoch, dev_accuracy=float(dev_accuracy),
                            vocab=list(vocab.tokens), optimizer=state.to_record())


def restore(record):
    """(ModelParams, TrainConfig, Vocabulary) held by a checkpoint."""
    return (ModelParams.from_arrays(record.params),
            TrainConfig.from_dict(record.config),
            Vocabulary(record.vocab))


def _run_epoch(batches, params, state, clip, config, epoch, log):
    losses = []
    for b, batch in enumerate(batches):
        loss, grads = batch_gradients(params, batch, config, seeds=(config.seed, epoch, b))
        if not np.isfinite(loss):
            raise TrainingDiverged("non-finite loss {} at epoch {} batch {}".format(loss, epoch, b))
        adam_step(params.arrays(), clip(grads, config.clip), state, config.lr, config.l2)
        losses.append(loss)
        log.step(epoch, state.step, loss)
        logger.debug("epoch %d batch %d loss %.6f", epoch, b, loss)
    return losses


def train(config, train_examples, dev_examples, vocab=None, log=None, show_progress=False):
    """Trains from scratch and returns the best-dev-accuracy CheckpointRecord."""
    config.validate()
    if not train_examples or not dev_examples:
        raise RejectedInput("training needs non-empty train and dev splits")
    vocab = vocab or build_vocab(train_examples, config.min_count)
    train_enc = vocab.encode_all(train_examples)
    dev_enc = vocab.encode_all(dev_examples)
    mode = config.halting()
    log = log or TrainLog()

    params = ModelParams.initialize(len(vocab), config.k, config.embed_dim, config.seed, config.np_dtype)
    state = OptimizerState.zeros(params.arrays())
    clip = clip_global_norm if config.clip_mode == "global" else clip_elementwise
    stopper = EarlyStopping(config.patience)
    best = None
    logger.info("training %s k=%d on %d examples, %d dev", mode, config.k, len(train_enc), len(dev_enc))

    for epoch in range(1, config.max_epochs + 1):
        batches = make_epoch_batches(train_enc, config.batch, config.pool_size, config.seed, epoch,
                                     vocab.pad_id, config.np_dtype, config.keep_pool_tail)
        if show_progress:
            with click.progressbar(batches, label="epoch {}".format(epoch)) as bar:
                losses = _run_epoch(bar, params, state, clip, config, epoch, log)
        else:
            losses = _run_epoch(batches, params, state, clip, config, epoch, log)

        accuracy, _ = evaluate(params, dev_enc, mode, config.batch, config.cross_initial_states)
        if stopper.update(epoch, accuracy):
            best = snapshot(params, state, config, epoch, accuracy, vocab)
        mean_loss = float(np.mean(losses))
        log.epoch(epoch, accuracy, mean_loss, stopper.best_epoch)
        logger.info("epoch %d: loss %.4f dev accuracy %.4f (best %.4f at epoch %d)",
                    epoch, mean_loss, accuracy, stopper.best, stopper.best_epoch)
        if stopper.should_stop:
            logger.info("no dev improvement for %d epoch(s), stopping", stopper.bad_epochs)
            break
    return best
