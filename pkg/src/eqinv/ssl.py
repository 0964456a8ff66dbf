"""Contrastive pretraining of the encoder and the sample-equivariance check."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BiasedDataset, augment_batch
from .errors import ConfigError, DataError
from .models import Encoder
from .optim import SGD


def info_nce(anchor, positive, negatives, temperature: float = 0.5) -> Tensor:
    """-log softmax of the positive similarity against the negatives.

    ``anchor`` and ``positive`` are [D] rows, ``negatives`` is [N, D].  With no
    negatives the loss is exactly 0.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    anchor, positive = ad.as_tensor(anchor), ad.as_tensor(positive)
    d = anchor.shape[-1]
    a = ad.reshape(anchor, (1, d))
    s_pos = ad.reshape(a @ ad.reshape(positive, (d, 1)), (1,))
    negatives = ad.as_tensor(negatives)
    if negatives.size == 0:
        logits = s_pos * (1.0 / temperature)
    else:
        s_neg = ad.reshape(a @ ad.transpose(negatives), (-1,))
        logits = ad.concat([s_pos, s_neg]) * (1.0 / temperature)
    return ad.logsumexp(logits, axis=0) - s_pos.sum() * (1.0 / temperature)


def _offdiag_index(n: int) -> np.ndarray:
    cols = np.arange(n)
    return np.stack([np.concatenate([cols[:i], cols[i + 1:]]) for i in range(n)]) + (np.arange(n) * n)[:, None]


def nt_xent(z1, z2, temperature: float = 0.5) -> Tensor:
    """Mean in-batch contrastive loss over 2B views.

    Row i of ``z1`` and row i of ``z2`` are two views of one image; every other
    view in the batch is a negative.  Rows are assumed unit-normalised.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    z = ad.concat([ad.as_tensor(z1), ad.as_tensor(z2)], axis=0)
    n = z.shape[0]
    b = n // 2
    sim = (z @ ad.transpose(z)) * (1.0 / temperature)
    flat = ad.reshape(sim, (n * n,))
    partner = np.concatenate([np.arange(b, n), np.arange(b)])
    pos = ad.take(flat, np.arange(n) * n + partner)
    rest = ad.take(flat, _offdiag_index(n).reshape(-1))
    lse = ad.logsumexp(ad.reshape(rest, (n, n - 1)), axis=1)
    return ad.mean(lse - pos)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    temperature: float = 0.2
    seed: int = 0
    hidden: tuple[int, ...] = (512, 256)
    feature_dim: int = 128


@dataclass
class PretrainResult:
    encoder: Encoder
    loss_curve: list[tuple[int, int, float]]

    @property
    def final_loss(self) -> float:
        return self.loss_curve[-1][2]


def pretrain(dataset: BiasedDataset, config: PretrainConfig) -> PretrainResult:
    """In-batch contrastive training of the encoder on the train split (labels unused)."""
    if config.batch_size < 2:
        raise ConfigError("contrastive pretraining needs batch_size >= 2")
    ids = dataset.indices("train")
    if len(ids) < 2:
        raise DataError("train split needs at least two samples")
    side = dataset.spec.image_side
    encoder = Encoder.init(3 * side * side, config.hidden, config.feature_dim,
                           np.random.default_rng([config.seed, 11]))
    order_rng = np.random.default_rng([config.seed, 12])
    aug_rng = np.random.default_rng([config.seed, 13])
    opt = SGD(encoder.params, config.lr, config.momentum, config.weight_decay)
    curve = []
    step = 0
    for epoch in range(config.epochs):
        perm = ids[order_rng.permutation(len(ids))]
        for start in range(0, len(perm), config.batch_size):
            batch = perm[start:start + config.batch_size]
            if len(batch) < 2:
                continue
            imgs = dataset.images[batch]
            v1 = augment_batch(imgs, aug_rng).reshape(len(batch), -1)
            v2 = augment_batch(imgs, aug_rng).reshape(len(batch), -1)
            opt.zero_grad()
            z1 = ad.l2_normalize(encoder(v1))
            z2 = ad.l2_normalize(encoder(v2))
            loss = nt_xent(z1, z2, config.temperature)
            loss.backward()
            opt.step()
            curve.append((epoch, step, loss.item()))
            step += 1
    return PretrainResult(encoder, curve)


def sample_equivariance_score(bank: np.ndarray, tol: float = 1e-6) -> tuple[float, int]:
    """(minimum pairwise euclidean distance, number of pairs closer than ``tol``)."""
    x = np.asarray(bank, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise DataError("need at least two rows")
    sq = (x * x).sum(1)
    best = np.inf
    collisions = 0
    chunk = 512
    for i in range(0, n, chunk):
        blk = x[i:i + chunk]
        d2 = sq[i:i + chunk, None] + sq[None, :] - 2.0 * blk @ x.T
        rows = np.arange(i, i + len(blk))
        d2[np.arange(len(blk)), rows] = np.inf
        d2[rows[:, None] > np.arange(n)[None, :]] = np.inf  # count each pair once
        # Re-measure near pairs exactly; the Gram identity loses precision there.
        for r, c in zip(*np.nonzero(d2 < 1e-4)):
            d2[r, c] = ((blk[r] - x[c]) ** 2).sum()
        d = np.sqrt(np.maximum(d2, 0.0))
        best = min(best, float(d.min()))
        collisions += int((d <= tol).sum())
    return best, collisions
