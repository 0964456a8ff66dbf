"""Accuracies, intra-class variance, the reweighted-risk oracle and embedding export."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import BiasedDataset
from .errors import DataError


def accuracy(model, dataset: BiasedDataset, split: str) -> float:
    """Fraction of ``split`` whose argmax logit equals the label (ties go to the lowest class)."""
    ids = dataset.indices(split)
    if len(ids) == 0:
        raise DataError(f"split {split!r} is empty")
    return accuracy_from_predictions(model.predict(dataset.inputs(ids)), dataset.labels[ids])


def accuracy_from_predictions(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if len(labels) == 0:
        raise DataError("no samples")
    return float(np.mean(pred == labels))


def intra_class_variance(features, labels) -> float:
    """Mean over classes of the mean squared distance to the class centroid, per feature dimension.

    Classes with a single sample carry no spread information and are dropped
    with a warning.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(labels):
        raise ValueError("features must be [N, D] with one label per row")
    per_class = []
    singles = []
    for k in np.unique(labels):
        rows = x[labels == k]
        if len(rows) < 2:
            singles.append(int(k))
            continue
        per_class.append(((rows - rows.mean(0)) ** 2).sum(1).mean())
    if singles:
        warnings.warn(f"classes {singles} have a single sample and were excluded", RuntimeWarning, stacklevel=2)
    if not per_class:
        raise DataError("no class has at least two samples")
    return float(np.mean(per_class) / x.shape[1])


@dataclass
class OracleResult:
    risk: float
    plain_risk: float
    positivity_violated: bool
    empty_cells: list[tuple[int, int]] = field(default_factory=list)


def interventional_risk(losses, y, z, num_classes: int | None = None, num_envs: int | None = None) -> OracleResult:
    """Reweight each loss by P(z) / P(z | y) estimated on the given samples, then normalise.

    Empty (y, z) cells whose marginals are both present violate positivity:
    they are skipped, the remaining weights are renormalised, and the flag is set.
    """
    losses = np.asarray(losses, dtype=np.float64)
    y, z = np.asarray(y), np.asarray(z)
    if len(losses) == 0:
        raise DataError("no samples")
    n = len(losses)
    c = int(y.max()) + 1 if num_classes is None else num_classes
    e = int(z.max()) + 1 if num_envs is None else num_envs
    counts = np.zeros((c, e))
    np.add.at(counts, (y, z), 1.0)
    p_z = counts.sum(0) / n
    p_z_given_y = counts / np.maximum(counts.sum(1, keepdims=True), 1.0)
    w = p_z[z] / p_z_given_y[y, z]
    empty = [(int(a), int(b)) for a, b in zip(*np.nonzero(counts == 0))
             if counts[a].sum() > 0 and counts[:, b].sum() > 0]
    if empty:
        warnings.warn(f"{len(empty)} empty (class, environment) cells skipped", RuntimeWarning, stacklevel=2)
    risk = float((w * losses).sum() / w.sum())
    return OracleResult(risk, float(losses.mean()), bool(empty), empty)


def per_sample_ce(model, x: np.ndarray, labels: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(x), batch_size):
            logits = model.logits(x[i:i + batch_size]).data
            m = logits.max(1, keepdims=True)
            lse = np.log(np.exp(logits - m).sum(1)) + m[:, 0]
            out.append(lse - logits[np.arange(len(logits)), labels[i:i + batch_size]])
    return np.concatenate(out) if out else np.zeros(0)


def interventional_risk_oracle(model, dataset: BiasedDataset, split: str = "train") -> OracleResult:
    """Known-environment reweighted cross-entropy of ``model`` on ``split`` (diagnostic only)."""
    ids = dataset.indices(split)
    if len(ids) == 0:
        raise DataError(f"split {split!r} is empty")
    y = dataset.labels[ids]
    losses = per_sample_ce(model, dataset.inputs(ids), y)
    return interventional_risk(losses, y, dataset.env_labels[ids], dataset.num_classes, dataset.num_classes)


def export_embeddings(model, dataset: BiasedDataset, path, split: str | None = None) -> int:
    """Write sample_id, y, z, raw feature columns and masked feature columns; returns the row count."""
    ids = np.arange(len(dataset.labels)) if split is None else dataset.indices(split)
    raw, masked = model.features(dataset.inputs(ids))
    z = dataset.env_labels[ids]
    d = raw.shape[1]
    header = ["sample_id", "y", "z"] + [f"phi_{i}" for i in range(d)] + [f"masked_{i}" for i in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for j, i in enumerate(ids):
            w.writerow([int(i), int(dataset.labels[i]), int(z[j])]
                       + ["%.17g" % v for v in raw[j]] + ["%.17g" % v for v in masked[j]])
    return len(ids)


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(sample_ids, y, z, raw, masked) from an embedding CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader]
    d = (len(header) - 3) // 2
    arr = np.array([[float(v) for v in r[3:]] for r in rows]).reshape(len(rows), 2 * d)
    ints = np.array([[int(v) for v in r[:3]] for r in rows], dtype=np.int64).reshape(len(rows), 3)
    return ints[:, 0], ints[:, 1], ints[:, 2], arr[:, :d], arr[:, d:]
