"""
    Query regression traces for one example.

    For every loop step this records the memory key z over the query words,
    the query gate g (gating model) or the termination score e and halting
    probability p (adaptive model), and the three document words with the
    highest read attention. Grids go to CSV files with the query tokens as
    header, heatmaps to SVG files with a gray scale from 0 (dark) to 1 (light).
"""
import os
import csv
import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import matplotlib
matplotlib.use("Agg")
from matplotlib.figure import Figure

from nse_reader.data import PLACEHOLDER, pad_batch
from nse_reader.model import EVAL, candidate_probabilities, choose, forward_pass

logger = logging.getLogger(__name__)

TOP_WORDS = 3
matplotlib.rcParams["svg.hashsalt"] = "nse-reader"


@dataclass
class TopWord:
    position: int
    token: str
    weight: float


@dataclass
class QueryTrace:
    mode: str
    steps: int
    query: List[str]
    z: np.ndarray
    top_words: List[List[TopWord]]
    predicted: str
    gold: str
    source: str = ""
    g: Optional[np.ndarray] = None
    e: Optional[np.ndarray] = None
    p: Optional[np.ndarray] = None
    candidates: List[str] = field(default_factory=list)

    @property
    def placeholder_position(self):
        return self.query.index(PLACEHOLDER) if PLACEHOLDER in self.query else None

    def summary(self):
        pos = self.placeholder_position
        data = {
            "mode": self.mode,
            "steps": self.steps,
            "source": self.source,
            "query": self.query,
            "gold": self.gold,
            "predicted": self.predicted,
            "placeholder_position": pos,
            "placeholder_key": None if pos is None else [float(v) for v in self.z[:, pos]],
            "top_words": [[w.token for w in step] for step in self.top_words],
        }
        if self.p is not None:
            data["p"] = [float(v) for v in self.p]
            data["expected_steps"] = float(np.sum(np.arange(1, self.steps + 1) * self.p))
        return data


def top_words(attention, document, count=TOP_WORDS):
    """Highest-attention document positions, ties broken by position."""
    attention = np.asarray(attention, dtype=float)
    order = np.argsort(-attention, kind="stable")[:count]
    return [TopWord(int(j), document[j], float(attention[j])) for j in order]


def trace_example(params, vocab, example, mode, cross_initial_states=False):
    encoded = vocab.encode(example)
    batch = pad_batch([encoded], [0], vocab.pad_id, params.dtype)
    result = forward_pass(params, batch.doc_ids, batch.query_ids, mode, batch.doc_mask, batch.query_mask,
                          drop=EVAL, cross_initial_states=cross_initial_states)
    probs, _ = candidate_probabilities(result, batch.candidate_masks, batch.candidate_valid)
    chosen = int(choose(probs, batch.candidate_valid)[0])
    document = example.document

    trace = QueryTrace(
        mode=mode.variant.value, steps=mode.steps, query=list(example.query),
        z=np.stack([t.z_q.data[0] for t in result.traces]),
        top_words=[top_words(t.attention.data[0], document) for t in result.traces],
        predicted=example.candidates[chosen], gold=example.answer, source=example.source,
        candidates=list(example.candidates))
    if mode.gating:
        trace.g = np.stack([t.g_q.data[0] for t in result.traces])
    else:
        trace.e = np.array([float(t.e.data[0]) if t.e is not None else np.nan for t in result.traces])
        trace.p = np.array([float(np.reshape(p.data, -1)[0]) for p in result.p])
    return trace


def _fmt(v):
    return "" if np.isnan(v) else "{:.17g}".format(v)


def write_grid_csv(path, columns, grid):
    with open(path, 'w', newline='', encoding='utf-8') as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(["step"] + list(columns))
        for t, row in enumerate(np.atleast_2d(grid), 1):
            writer.writerow([t] + [_fmt(v) for v in row])
    return path


def render_heatmap(path, grid, columns, title):
    grid = np.ma.masked_invalid(np.atleast_2d(np.asarray(grid, dtype=float)))
    steps, width = grid.shape
    fig = Figure(figsize=(max(3.0, 0.6 * width + 1.5), max(2.0, 0.5 * steps + 1.2)))
    ax = fig.add_subplot(1, 1, 1)
    image = ax.imshow(grid, cmap="gray", vmin=0.0, vmax=1.0, aspect="auto", interpolation="nearest")
    ax.set_xticks(range(width))
    ax.set_xticklabels(columns, rotation=60, ha="right")
    ax.set_yticks(range(steps))
    ax.set_yticklabels([str(t) for t in range(1, steps + 1)])
    ax.set_ylabel("step")
    ax.set_title(title)
    fig.colorbar(image, ax=ax)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def write_top_words_csv(path, trace):
    with open(path, 'w', newline='', encoding='utf-8') as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(["step", "rank", "position", "token", "weight"])
        for t, words in enumerate(trace.top_words, 1):
            for rank, w in enumerate(words, 1):
                writer.writerow([t, rank, w.position, w.token, _fmt(w.weight)])
    return path


def export_trace(trace, out_dir):
    """Writes grids, heatmaps, top words and trace.json; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)

    def out(name):
        return os.path.join(out_dir, name)

    written = [write_grid_csv(out("z.csv"), trace.query, trace.z),
               render_heatmap(out("z.svg"), trace.z, trace.query, "memory key z")]
    if trace.g is not None:
        written += [write_grid_csv(out("g.csv"), trace.query, trace.g),
                    render_heatmap(out("g.svg"), trace.g, trace.query, "query gate g")]
    else:
        halting = np.stack([trace.e, trace.p], axis=1)
        written += [write_grid_csv(out("halting.csv"), ["e", "p"], halting),
                    render_heatmap(out("halting.svg"), halting, ["e", "p"], "termination e / halting p")]
    written.append(write_top_words_csv(out("attention.csv"), trace))
    with open(out("trace.json"), 'w', encoding='utf-8') as fp:
        json.dump(trace.summary(), fp, sort_keys=True, indent=2)
        fp.write("\n")
    written.append(out("trace.json"))
    logger.info("wrote %d trace files to %s", len(written), out_dir)
    return written
