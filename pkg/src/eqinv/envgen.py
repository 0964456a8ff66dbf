"""Class-wise environment construction from a pretrained feature bank.

For every anchor class k the samples of all other classes are ranked by
their (class-adjusted) mean cosine similarity to the anchor samples; the
upper half joins the anchor samples in Env#1 and the lower half joins them
in Env#2.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import BiasedDataset
from .errors import ContractError, DataError, FormatError


@dataclass
class FeatureBank:
    rows: np.ndarray  # [N, D] unit rows, grouped contiguously by class
    labels: np.ndarray  # [N]
    sample_ids: np.ndarray  # [N] dataset index of each row
    class_ranges: list[tuple[int, int]]

    @property
    def num_classes(self) -> int:
        return len(self.class_ranges)

    def other_rows(self, k: int) -> np.ndarray:
        a, b = self.class_ranges[k]
        return np.concatenate([np.arange(0, a), np.arange(b, len(self.rows))])

    def other_ranges(self, k: int) -> list[tuple[int, int]]:
        """Class ranges inside the other-class pool of anchor ``k`` (anchor range removed)."""
        a, b = self.class_ranges[k]
        width = b - a
        out = []
        for i, (lo, hi) in enumerate(self.class_ranges):
            if i == k:
                continue
            shift = width if lo >= b else 0
            out.append((lo - shift, hi - shift))
        return out


def bank_from_features(features: np.ndarray, labels: np.ndarray, sample_ids: np.ndarray,
                       num_classes: int) -> FeatureBank:
    """Normalise rows and regroup them by class, keeping original order inside a class."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    sample_ids = np.asarray(sample_ids)
    # Sort by (class, sample id) so the bank does not depend on input order.
    order = np.lexsort((sample_ids, labels))
    feats = features[order]
    norms = np.sqrt((feats * feats).sum(1, keepdims=True))
    rows = feats / (norms + 1e-12)
    labels = labels[order]
    ranges = []
    for k in range(num_classes):
        idx = np.flatnonzero(labels == k)
        if len(idx) == 0:
            raise DataError(f"class {k} has no samples in the bank")
        ranges.append((int(idx[0]), int(idx[-1]) + 1))
    return FeatureBank(rows, labels, sample_ids[order], ranges)


def build_feature_bank(encoder, dataset: BiasedDataset, split: str = "train", batch_size: int = 512) -> FeatureBank:
    """phi(x) for every sample of ``split``, l2-normalised and grouped by class."""
    from .autodiff import no_grad

    ids = dataset.indices(split)
    feats = []
    with no_grad():
        for i in range(0, len(ids), batch_size):
            feats.append(encoder(dataset.inputs(ids[i:i + batch_size])).data)
    feats = np.concatenate(feats) if feats else np.zeros((0, 1))
    return bank_from_features(feats, dataset.labels[ids], ids, dataset.num_classes)


def similarity_stats(bank: FeatureBank, k: int) -> np.ndarray:
    """s+ : mean cosine similarity of each other-class row to the anchor-class rows."""
    if not 0 <= k < bank.num_classes:
        raise ContractError(f"anchor class {k} out of range")
    a, b = bank.class_ranges[k]
    anchor = bank.rows[a:b]
    other = bank.rows[bank.other_rows(k)]
    return (anchor @ other.T).mean(axis=0)


def adjust_similarity(s_plus: np.ndarray, class_ranges) -> np.ndarray:
    """Subtract each other-class's mean similarity from its samples' similarities."""
    s_plus = np.asarray(s_plus, dtype=np.float64)
    s = s_plus.copy()
    for lo, hi in class_ranges:
        if hi > lo:
            s[lo:hi] = s_plus[lo:hi] - s_plus[lo:hi].mean()
    return s


@dataclass
class EnvironmentSplit:
    anchor: int
    anchor_ids: np.ndarray
    env1: np.ndarray  # sorted ids: anchors + similar half of the other pool
    env2: np.ndarray  # sorted ids: anchors + dissimilar half

    def negatives(self, env: int) -> np.ndarray:
        ids = self.env1 if env == 1 else self.env2
        return np.setdiff1d(ids, self.anchor_ids, assume_unique=True)

    def check(self, universe=None) -> None:
        """Raise ContractError unless the split invariants hold."""
        common = np.intersect1d(self.env1, self.env2)
        if not np.array_equal(common, np.sort(self.anchor_ids)):
            raise ContractError("env1 and env2 must intersect exactly in the anchor samples")
        d = len(self.env1) - len(self.env2)
        if d not in (0, 1):
            raise ContractError(f"uneven split: |env1| - |env2| = {d}")
        if universe is not None and not np.array_equal(np.union1d(self.env1, self.env2), np.sort(universe)):
            raise ContractError("env1 and env2 must cover the full index set")


def even_split(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions of the top ceil(n/2) and remaining values; ties broken by lower position first."""
    s = np.asarray(s, dtype=np.float64)
    order = np.lexsort((np.arange(len(s)), -s))
    top = (len(s) + 1) // 2
    return np.sort(order[:top]), np.sort(order[top:])


def split_environments(s, anchor: int = 0, anchor_ids=(), other_ids=None) -> EnvironmentSplit:
    s = np.asarray(s, dtype=np.float64)
    if len(s) < 2:
        raise ContractError("need at least two other-class samples to split")
    other_ids = np.arange(len(s)) if other_ids is None else np.asarray(other_ids)
    anchor_ids = np.asarray(anchor_ids, dtype=np.int64)
    hi, lo = even_split(s)
    return EnvironmentSplit(
        anchor=anchor,
        anchor_ids=np.sort(anchor_ids),
        env1=np.sort(np.concatenate([anchor_ids, other_ids[hi]])).astype(np.int64),
        env2=np.sort(np.concatenate([anchor_ids, other_ids[lo]])).astype(np.int64),
    )


def construct_environments(bank: FeatureBank, adjust: bool = True) -> list[EnvironmentSplit]:
    """Two environments per anchor class from (adjusted) similarity ranking."""
    splits = []
    for k in range(bank.num_classes):
        s = similarity_stats(bank, k)
        if adjust:
            s = adjust_similarity(s, bank.other_ranges(k))
        a, b = bank.class_ranges[k]
        splits.append(split_environments(s, k, bank.sample_ids[a:b], bank.sample_ids[bank.other_rows(k)]))
    return splits


def random_environments(bank: FeatureBank, rng: np.random.Generator) -> list[EnvironmentSplit]:
    """Index-random even splits of every other-class pool (no similarity used)."""
    splits = []
    for k in range(bank.num_classes):
        other = bank.sample_ids[bank.other_rows(k)]
        s = rng.permutation(len(other)).astype(np.float64)
        a, b = bank.class_ranges[k]
        splits.append(split_environments(s, k, bank.sample_ids[a:b], other))
    return splits


# -- diagnostics ------------------------------------------------------------


@dataclass
class EnvDiagnostics:
    anchor: int
    class_share: np.ndarray  # [2, C] share of each other class placed in env1 / env2
    colour_share: np.ndarray  # [2, C] same for each colour among other-class samples

    @property
    def anchor_colour_gap(self) -> float:
        """|share of anchor-colour samples in env1 - share in env2| (NaN if none exist)."""
        return float(abs(self.colour_share[0, self.anchor] - self.colour_share[1, self.anchor]))

    @property
    def class_deviation(self) -> float:
        """Largest distance of any other class's env1 share from the even 1/2."""
        mask = np.arange(self.class_share.shape[1]) != self.anchor
        return float(np.max(np.abs(self.class_share[0, mask] - 0.5)))


def env_diagnostics(split: EnvironmentSplit, dataset: BiasedDataset) -> EnvDiagnostics:
    """Per-environment class and colour proportions; reads the hidden colour labels."""
    z = dataset.env_labels
    y = dataset.labels
    c = dataset.num_classes
    pool = np.union1d(split.negatives(1), split.negatives(2))
    class_share = np.full((2, c), np.nan)
    colour_share = np.full((2, c), np.nan)
    for e, ids in enumerate((split.negatives(1), split.negatives(2))):
        for j in range(c):
            n_cls = np.count_nonzero(y[pool] == j)
            if n_cls:
                class_share[e, j] = np.count_nonzero(y[ids] == j) / n_cls
            n_col = np.count_nonzero(z[pool] == j)
            if n_col:
                colour_share[e, j] = np.count_nonzero(z[ids] == j) / n_col
    return EnvDiagnostics(split.anchor, class_share, colour_share)


def summarize_diagnostics(diags: list[EnvDiagnostics]) -> dict[str, float]:
    gaps = [d.anchor_colour_gap for d in diags]
    return {
        "anchor_colour_gap": float(np.nanmean(gaps)) if not np.all(np.isnan(gaps)) else float("nan"),
        "class_deviation": float(np.mean([d.class_deviation for d in diags])),
        "max_class_deviation": float(np.max([d.class_deviation for d in diags])),
    }


def write_diagnostics_csv(diags: list[EnvDiagnostics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["anchor", "env", "class_or_color", "proportion"])
        for d in diags:
            for e in range(2):
                for j in range(d.class_share.shape[1]):
                    if j != d.anchor:
                        w.writerow([d.anchor, e + 1, f"class:{j}", repr(float(d.class_share[e, j]))])
                for j in range(d.colour_share.shape[1]):
                    w.writerow([d.anchor, e + 1, f"color:{j}", repr(float(d.colour_share[e, j]))])


# -- environment file ---------------------------------------------------------

ENV_FILE_VERSION = 1


def save_environments(splits: list[EnvironmentSplit], path, meta: dict | None = None) -> None:
    doc = {
        "version": ENV_FILE_VERSION,
        "meta": meta or {},
        "anchors": [
            {
                "anchor": int(s.anchor),
                "anchor_ids": s.anchor_ids.tolist(),
                "env1": s.env1.tolist(),
                "env2": s.env2.tolist(),
            }
            for s in splits
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_environments(path) -> list[EnvironmentSplit]:
    try:
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != ENV_FILE_VERSION:
            raise FormatError(f"unsupported environment file version {doc.get('version')}")
        return [
            EnvironmentSplit(
                int(a["anchor"]),
                np.asarray(a["anchor_ids"], dtype=np.int64),
                np.asarray(a["env1"], dtype=np.int64),
                np.asarray(a["env2"], dtype=np.int64),
            )
            for a in doc["anchors"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed environment file: {exc}") from exc
