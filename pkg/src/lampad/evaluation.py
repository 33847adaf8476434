"""Anomaly scoring and rank-based AUROC.

The anomaly score is always the plain mean squared reconstruction
error, regardless of which loss trained the model; amplified losses
change training dynamics only. AUROC is computed from midranks
(Mann-Whitney), which equals the probability that a random anomalous
score exceeds a random normal one, counting ties as one half.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import patchify
from .tensor import Tensor, no_grad

SCORE_AGGREGATES = ("mean", "max")


def reconstruction_scores(model, pixels, chunk_size=256, aggregate="mean"):
    """Per-sample mean squared error over a [N,C,H,W] array.

    Patch-wise models score each patch independently and combine the
    patch scores with ``aggregate`` (mean by default). Evaluation runs
    in eval mode and leaves the model untouched.
    """
    if aggregate not in SCORE_AGGREGATES:
        raise ValueError(f"aggregate must be one of {SCORE_AGGREGATES}, got {aggregate!r}")
    p = getattr(model.config, "patches", 1)
    scores = np.empty(pixels.shape[0], dtype=np.float64)
    with no_grad():
        for start in range(0, pixels.shape[0], chunk_size):
            chunk = pixels[start : start + chunk_size]
            n = chunk.shape[0]
            tiles = patchify(chunk, p) if p > 1 else chunk
            y_hat = model.forward(Tensor(tiles), mode="eval")
            err = np.square(tiles.astype(np.float64) - y_hat.data.astype(np.float64))
            per_tile = err.mean(axis=(1, 2, 3))
            if p > 1:
                per_tile = per_tile.reshape(n, p * p)
                per_tile = per_tile.mean(axis=1) if aggregate == "mean" else per_tile.max(axis=1)
            scores[start : start + n] = per_tile
    return scores


def anomaly_score(model, sample, aggregate="mean"):
    """Score a single [C,H,W] image (or [1,C,H,W] batch)."""
    arr = np.asarray(sample.data if isinstance(sample, Tensor) else sample)
    if arr.ndim == 3:
        arr = arr[None]
    return float(reconstruction_scores(model, arr, aggregate=aggregate)[0])


def _midranks(values):
    """1-based ranks with ties sharing their group's average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    boundaries = np.nonzero(np.diff(sorted_vals))[0]
    starts = np.concatenate(([0], boundaries + 1))
    ends = np.concatenate((boundaries, [len(values) - 1]))
    group_rank = (starts + ends) / 2.0 + 1.0
    ranks[order] = np.repeat(group_rank, ends - starts + 1)
    return ranks


def auroc(scores, labels):
    """Rank-based AUROC of anomaly scores against {0,1} labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError(f"scores {scores.shape} and labels {labels.shape} must be equal 1-d arrays")
    pos = labels == 1
    n1 = int(pos.sum())
    n0 = len(labels) - n1
    if n0 == 0 or n1 == 0:
        raise DataError(f"AUROC needs both classes; got {n0} normal and {n1} anomalous")
    ranks = _midranks(scores)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n0 * n1))


@dataclass
class EvalReport:
    """Scores, labels and the resulting AUROC for one task."""

    task: str
    ids: list
    scores: list
    labels: list
    auroc: float
    fingerprint: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "task": self.task,
            "auroc": self.auroc,
            "fingerprint": self.fingerprint,
            "samples": [
                {"id": i, "score": s, "label": l}
                for i, s, l in zip(self.ids, self.scores, self.labels)
            ],
        }

    @classmethod
    def from_json(cls, payload):
        samples = payload["samples"]
        return cls(
            task=payload["task"],
            ids=[s["id"] for s in samples],
            scores=[s["score"] for s in samples],
            labels=[s["label"] for s in samples],
            auroc=payload["auroc"],
            fingerprint=payload["fingerprint"],
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def evaluate_task(model, task, fingerprint=None, chunk_size=256, aggregate="mean"):
    """Score every test sample in eval mode and compute the AUROC."""
    scores = reconstruction_scores(model, task.test.pixels.data, chunk_size, aggregate)
    ids = task.test.ids or [str(i) for i in range(len(scores))]
    return EvalReport(
        task=task.name,
        ids=list(ids),
        scores=[float(s) for s in scores],
        labels=[int(l) for l in task.test.labels],
        auroc=auroc(scores, task.test.labels),
        fingerprint=fingerprint or {},
    )
