"""Finite-difference check of every differentiable operation and composite loss.

Each case builds a fresh random instance from a generator and returns the
scalar function plus the leaves to perturb.  Tensor-valued operations are
reduced with a fixed random weighting so every output coordinate matters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import Classifier, Encoder, EqInvModel, MaskLayer, ProjectionHead
from .objectives import (AnchorGroup, PenaltyConfig, env_sup_contrastive, env_sup_contrastive_wgrad,
                         irmv1_class_loss, rex_class_loss, total_objective)
from .ssl import info_nce, nt_xent

TOLERANCE = 1e-5
# Five-point central differences: truncation error is O(h^4), so a step of
# 1e-4 keeps both truncation and roundoff well below the tolerance.
FD_STEP = 1e-4
FD_STENCIL = 5


def _leaf(rng, *shape, low=None):
    x = rng.standard_normal(shape)
    if low is not None:
        # keep values away from kinks / the log singularity
        x = np.sign(x) * (np.abs(x) + low)
    return Tensor(x, requires_grad=True)


def _pos(rng, *shape):
    return Tensor(rng.uniform(0.5, 2.0, shape), requires_grad=True)


def _weighted(rng, shape) -> Callable[[Tensor], Tensor]:
    r = rng.standard_normal(shape)
    return lambda t: ad.tsum(t * r)


def _unary(op, make=_leaf):
    def build(rng):
        a = make(rng, 3, 4)
        red = _weighted(rng, (3, 4))
        return (lambda: red(op(a))), [a]
    return build


def _binary(op, make_b=_leaf, b_shape=(3, 4)):
    def build(rng):
        a, b = _leaf(rng, 3, 4), make_b(rng, *b_shape)
        red = _weighted(rng, (3, 4))
        return (lambda: red(op(a, b))), [a, b]
    return build


def _matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    red = _weighted(rng, (3, 2))
    return (lambda: red(a @ b)), [a, b]


def _reduce(op, out_shape):
    def build(rng):
        a = _leaf(rng, 3, 4)
        red = _weighted(rng, out_shape)
        return (lambda: red(op(a))), [a]
    return build


def _take(rng):
    a = _leaf(rng, 5, 3)
    idx = rng.integers(0, 5, size=7)
    red = _weighted(rng, (7, 3))
    return (lambda: red(ad.take(a, idx))), [a]


def _concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 4, 3)
    red = _weighted(rng, (6, 3))
    return (lambda: red(ad.concat([a, b]))), [a, b]


def _cross_entropy(rng):
    logits = _leaf(rng, 4, 5)
    labels = rng.integers(0, 5, size=4)
    return (lambda: ad.softmax_cross_entropy(logits, labels)), [logits]


def _info_nce(rng):
    a, p, n = _leaf(rng, 6), _leaf(rng, 6), _leaf(rng, 5, 6)
    tau = rng.uniform(0.2, 1.0)
    return (lambda: info_nce(ad.l2_normalize(a), ad.l2_normalize(p), ad.l2_normalize(n), tau)), [a, p, n]


def _nt_xent(rng):
    a, b = _leaf(rng, 4, 5), _leaf(rng, 4, 5)
    return (lambda: nt_xent(ad.l2_normalize(a), ad.l2_normalize(b), 0.5)), [a, b]


def _env_batch(rng, n_pos=3, n_neg=3, dim=4):
    x = _leaf(rng, n_pos + n_neg, dim)
    flags = np.arange(n_pos + n_neg) < n_pos
    return x, flags


def _env_loss(rng):
    x, flags = _env_batch(rng)
    return (lambda: env_sup_contrastive(ad.l2_normalize(x), flags)), [x]


def _env_loss_w(rng):
    x, flags = _env_batch(rng)
    z = ad.l2_normalize(x).detach()
    w = Tensor(rng.uniform(0.5, 1.5), requires_grad=True)
    return (lambda: env_sup_contrastive(z, flags, w)), [w]


def _env_wgrad(rng):
    x, flags = _env_batch(rng)
    return (lambda: env_sup_contrastive_wgrad(ad.l2_normalize(x), flags, 1.0)), [x]


def _two_envs(rng):
    xs = [_env_batch(rng) for _ in range(2)]
    return xs


def _irmv1(rng):
    envs = _two_envs(rng)
    lam = float(rng.choice([2.0, 10.0, 100.0]))

    def fn():
        zs = [(ad.l2_normalize(x), f) for x, f in envs]
        return irmv1_class_loss([env_sup_contrastive(z, f) for z, f in zs],
                                [env_sup_contrastive_wgrad(z, f) for z, f in zs], lam)
    return fn, [x for x, _ in envs]


def _rex(rng):
    envs = _two_envs(rng)
    lam = float(rng.choice([2.0, 10.0, 100.0]))
    return (lambda: rex_class_loss([env_sup_contrastive(ad.l2_normalize(x), f) for x, f in envs], lam)), \
        [x for x, _ in envs]


def _toy_model(rng) -> EqInvModel:
    enc = Encoder.init(6, (5,), 4, rng)
    model = EqInvModel(enc, MaskLayer.init(4), ProjectionHead.init(4, 5, 3, rng), Classifier.init(4, 3, rng))
    # Move the mask off its all-ones start and keep biases positive so no
    # feature row collapses to zero (l2_normalize is singular there).
    model.mask.params["mask"].data[...] = rng.uniform(0.5, 1.5, 4)
    for name, p in model.parameters().items():
        if name.endswith(".bias"):
            p.data[...] = rng.uniform(0.1, 0.5, p.shape)
    return model


def _relu_margin(model: EqInvModel, x: np.ndarray) -> float:
    """Smallest |pre-activation| over every ReLU the inputs pass through."""
    p = {n: t.data for n, t in model.parameters().items()}
    margins = []
    h = x
    n_layers = len(model.encoder.dims) - 1
    for i in range(n_layers):
        h = h @ p[f"encoder.{i}.weight"] + p[f"encoder.{i}.bias"]
        if i < n_layers - 1:
            margins.append(np.abs(h).min())
            h = np.maximum(h, 0.0)
    g = (h * p["mask"]) @ p["head.0.weight"] + p["head.0.bias"]
    margins.append(np.abs(g).min())
    return float(min(margins))


KINK_MARGIN = 1e-2


def _total_instance(rng, mode):
    # Redraw until no ReLU sits near its kink, where finite differences are meaningless.
    while True:
        model = _toy_model(rng)
        x = rng.standard_normal((5, 6))
        y = rng.integers(0, 3, size=5)
        groups = [AnchorGroup(k, rng.standard_normal((3, 6)), [rng.standard_normal((3, 6)) for _ in range(2)])
                  for k in range(2)]
        every = np.concatenate([x] + [np.concatenate([g.positives, *g.negatives]) for g in groups])
        if _relu_margin(model, every) > KINK_MARGIN:
            break
    penalty = PenaltyConfig(mode, float(rng.choice([2.0, 10.0])))
    return model, (lambda: total_objective(model, x, y, groups, penalty).loss), \
        (lambda: ad.softmax_cross_entropy(model.logits(x), y))


def _total(mode):
    """Mask, projection head and classifier against the full objective."""
    def build(rng):
        model, fn, _ = _total_instance(rng, mode)
        return fn, [p for n, p in model.parameters().items() if not n.startswith("encoder.")]
    return build


def _total_phi(mode):
    """phi sees only the cross-entropy term, so its gradient is differenced against CE alone."""
    def build(rng):
        model, fn, ce = _total_instance(rng, mode)
        return fn, list(model.encoder.params.values()), ce
    return build


def _classifier(rng):
    clf = Classifier.init(4, 3, rng)
    clf.params["classifier.gain"].data[...] = rng.uniform(0.5, 1.5, clf.params["classifier.gain"].shape)
    x = rng.standard_normal((5, 4))
    red = _weighted(rng, (5, 3))
    return (lambda: red(clf(x))), list(clf.params.values())


CASES: dict[str, Callable] = {
    "add": _binary(ad.add),
    "add_broadcast": _binary(ad.add, b_shape=(4,)),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "mul_broadcast": _binary(ad.mul, b_shape=(3, 1)),
    "div": _binary(ad.div, make_b=_pos),
    "neg": _unary(ad.neg),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, make=_pos),
    "square": _unary(ad.square),
    "relu": _unary(ad.relu, make=lambda rng, *s: _leaf(rng, *s, low=0.1)),
    "sum": _reduce(lambda a: ad.tsum(a, axis=0), (4,)),
    "mean": _reduce(lambda a: ad.mean(a, axis=1), (3,)),
    "variance": _reduce(lambda a: ad.variance(a, axis=1), (3,)),
    "logsumexp": _reduce(lambda a: ad.logsumexp(a, axis=1), (3,)),
    "matmul": _matmul,
    "transpose": _reduce(ad.transpose, (4, 3)),
    "reshape": _reduce(lambda a: ad.reshape(a, (2, 6)), (2, 6)),
    "take": _take,
    "concat": _concat,
    "l2_normalize": _reduce(ad.l2_normalize, (3, 4)),
    "log_softmax": _reduce(ad.log_softmax, (3, 4)),
    "softmax_cross_entropy": _cross_entropy,
    "weight_norm_classifier": _classifier,
    "info_nce": _info_nce,
    "nt_xent": _nt_xent,
    "env_sup_contrastive": _env_loss,
    "env_sup_contrastive_dw": _env_loss_w,
    "env_sup_contrastive_wgrad": _env_wgrad,
    "irmv1_class_loss": _irmv1,
    "rex_class_loss": _rex,
    "total_objective_rex": _total("rex"),
    "total_objective_irmv1": _total("irmv1"),
    "total_objective_rex_phi": _total_phi("rex"),
    "total_objective_irmv1_phi": _total_phi("irmv1"),
}


@dataclass
class CaseReport:
    name: str
    instances: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_suite(instances: int = 10, seed: int = 0, names=None) -> tuple[list[CaseReport], float]:
    """Run every case on ``instances`` random draws; returns the reports and elapsed seconds."""
    start = time.perf_counter()
    reports = []
    for i, (name, build) in enumerate(CASES.items()):
        if names is not None and name not in names:
            continue
        worst = 0.0
        for j in range(instances):
            fn, params, *reference = build(np.random.default_rng([seed, i, j]))
            worst = max(worst, ad.grad_check(fn, params, eps=FD_STEP, stencil=FD_STENCIL,
                                           reference=reference[0] if reference else None))
        reports.append(CaseReport(name, instances, worst))
    return reports, time.perf_counter() - start
