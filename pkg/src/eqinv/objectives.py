"""Training losses for the class-wise invariance stage.

``env_sup_contrastive`` scores one environment of one anchor class: every
anchor-class projection in the environment is pulled towards the other
anchor-class projections and pushed from the environment's negatives, with
all similarities multiplied by a scalar dummy classifier ``w``.  The class
loss combines the two environments of an anchor with either the squared
w-gradient penalty (IRMv1) or the variance of the environment risks (REx).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError

PENALTY_MODES = ("rex", "irmv1")


@dataclass(frozen=True)
class PenaltyConfig:
    mode: str = "rex"
    lam: float = 10.0

    def __post_init__(self):
        if self.mode not in PENALTY_MODES:
            raise ConfigError(f"penalty mode must be one of {PENALTY_MODES}, got {self.mode!r}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"penalty weight must be finite and >= 0, got {self.lam}")


def dummy_classifier() -> Tensor:
    """Fresh scalar w = 1.0 whose gradient is read but whose value is never updated."""
    return Tensor(1.0, requires_grad=True)


def _split(z: Tensor, positive: np.ndarray) -> tuple[Tensor, Tensor] | None:
    positive = np.asarray(positive, dtype=bool)
    pos = np.flatnonzero(positive)
    neg = np.flatnonzero(~positive)
    if len(pos) < 2 or len(neg) < 1:
        return None
    return ad.take(z, pos), ad.take(z, neg)


def _offdiag(p: int) -> np.ndarray:
    idx = np.arange(p * p).reshape(p, p)
    return idx[~np.eye(p, dtype=bool)]


def env_sup_contrastive(z, positive, w=1.0) -> Tensor | None:
    """Environment-based supervised contrastive loss l(e, w).

    ``z`` holds unit-normalised projections of the environment's minibatch
    slice and ``positive`` flags the anchor-class rows.  For each anchor-class
    row the loss averages, over its N+ fellow anchor-class rows,
    -log(exp(w s+) / (exp(w s+) + sum_neg exp(w s-))), and these averages are
    summed.  Returns None (slice skipped) without two positives and one negative.
    """
    parts = _split(ad.as_tensor(z), positive)
    if parts is None:
        return None
    zp, zn = parts
    p = zp.shape[0]
    w = ad.as_tensor(w)
    s_pp = (zp @ ad.transpose(zp)) * w  # [p, p]
    s_pn = (zp @ ad.transpose(zn)) * w  # [p, q]
    neg_lse = ad.logsumexp(s_pn, axis=1, keepdims=True)  # [p, 1]
    # log(exp(a) + exp(b)) with a constant shift; the expression is shift-exact.
    shift = np.maximum(s_pp.data, neg_lse.data)
    both = ad.log(ad.exp(s_pp - shift) + ad.exp(neg_lse - shift)) + shift
    terms = ad.reshape(both - s_pp, (p * p,))
    terms = ad.reshape(ad.take(terms, _offdiag(p)), (p, p - 1))
    return ad.tsum(ad.mean(terms, axis=1))


def env_sup_contrastive_wgrad(z, positive, w: float = 1.0) -> Tensor | None:
    """d l(e, w) / d w evaluated at ``w``, as a graph differentiable in ``z``.

    Per (z, z+) term the derivative is -s+ plus the softmax-weighted mean of
    the similarities in the denominator.
    """
    parts = _split(ad.as_tensor(z), positive)
    if parts is None:
        return None
    zp, zn = parts
    p = zp.shape[0]
    s_pp = zp @ ad.transpose(zp)
    s_pn = zp @ ad.transpose(zn)
    shift = np.maximum(w * s_pp.data.max(axis=1, keepdims=True), w * s_pn.data.max(axis=1, keepdims=True))
    e_n = ad.exp(s_pn * w - shift)
    sum_n = ad.tsum(e_n, axis=1, keepdims=True)
    wsum_n = ad.tsum(s_pn * e_n, axis=1, keepdims=True)
    e_p = ad.exp(s_pp * w - shift)
    d = (s_pp * e_p + wsum_n) / (e_p + sum_n) - s_pp
    d = ad.reshape(ad.take(ad.reshape(d, (p * p,)), _offdiag(p)), (p, p - 1))
    return ad.tsum(ad.mean(d, axis=1))


def irmv1_class_loss(env_losses, env_wgrads, lam: float) -> Tensor:
    """sum_e [ l(e, 1) + lam * (dl(e, w)/dw at w=1)^2 ]."""
    if len(env_losses) < 2 or len(env_losses) != len(env_wgrads):
        raise ContractError("class-wise IRM needs at least two environments with gradients")
    total = None
    for loss, g in zip(env_losses, env_wgrads):
        term = loss + ad.square(g) * lam
        total = term if total is None else total + term
    return total


def rex_class_loss(env_losses, lam: float) -> Tensor:
    """sum_e l(e) + lam * population variance of the environment losses."""
    if len(env_losses) < 2:
        raise ContractError("class-wise REx needs at least two environments")
    risks = ad.concat([ad.reshape(l, (1,)) for l in env_losses])
    return ad.tsum(risks) + ad.variance(risks) * lam


@dataclass
class AnchorGroup:
    """Inputs drawn for one anchor class: shared positives and per-environment negatives."""

    anchor: int
    positives: np.ndarray  # [p, input_dim]
    negatives: list[np.ndarray]  # one [q_e, input_dim] array per environment


@dataclass
class ObjectiveResult:
    loss: Tensor
    ce: Tensor
    class_losses: dict[int, Tensor] = field(default_factory=dict)
    env_losses: dict[int, list[float]] = field(default_factory=dict)
    skipped: list[int] = field(default_factory=list)

    @property
    def ce_only(self) -> bool:
        return not self.class_losses


def class_loss(model, group: AnchorGroup, penalty: PenaltyConfig) -> tuple[Tensor | None, list[float]]:
    """L_k for one anchor.  The encoder output is detached: no gradient reaches phi."""
    x = np.concatenate([group.positives, *group.negatives])
    with ad.no_grad():
        feats = model.encode(x)
    z = model.project(model.masked_feature(feats.detach()))
    n_pos = len(group.positives)
    losses, grads = [], []
    offset = n_pos
    for neg in group.negatives:
        rows = np.concatenate([np.arange(n_pos), np.arange(offset, offset + len(neg))])
        offset += len(neg)
        ze = ad.take(z, rows)
        flags = np.arange(len(rows)) < n_pos
        loss = env_sup_contrastive(ze, flags, dummy_classifier() if penalty.mode == "irmv1" else 1.0)
        if loss is None:
            return None, []
        losses.append(loss)
        if penalty.mode == "irmv1":
            grads.append(env_sup_contrastive_wgrad(ze, flags, 1.0))
    values = [l.item() for l in losses]
    if penalty.mode == "irmv1":
        return irmv1_class_loss(losses, grads, penalty.lam), values
    return rex_class_loss(losses, penalty.lam), values


def total_objective(model, ce_inputs: np.ndarray, ce_labels: np.ndarray, groups: list[AnchorGroup],
                    penalty: PenaltyConfig) -> ObjectiveResult:
    """CE(f(m * phi(x)), y) + sum over anchors of L_k(g, m).

    Cross-entropy gradients reach f, m and phi; class-loss gradients reach g
    and m only.
    """
    ce = ad.softmax_cross_entropy(model.logits(ce_inputs), ce_labels)
    result = ObjectiveResult(loss=ce, ce=ce)
    total = ce
    for group in groups:
        lk, values = class_loss(model, group, penalty)
        if lk is None:
            result.skipped.append(group.anchor)
            continue
        result.class_losses[group.anchor] = lk
        result.env_losses[group.anchor] = values
        total = total + lk
    result.loss = total
    return result
