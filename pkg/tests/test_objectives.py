import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqinv import autodiff as ad
from eqinv.autodiff import Tensor
from eqinv.errors import ConfigError, ContractError
from eqinv.models import EqInvModel, ModelConfig
from eqinv.objectives import (AnchorGroup, PenaltyConfig, class_loss, dummy_classifier, env_sup_contrastive,
                              env_sup_contrastive_wgrad, irmv1_class_loss, rex_class_loss, total_objective)


def unit(x):
    x = np.asarray(x, dtype=float)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def brute_env_loss(z, flags, w=1.0):
    """Triple loop: anchor rows, their fellow positives, the negatives."""
    pos = [i for i in range(len(z)) if flags[i]]
    neg = [i for i in range(len(z)) if not flags[i]]
    total = 0.0
    for i in pos:
        acc = 0.0
        for j in pos:
            if j == i:
                continue
            num = math.exp(w * float(np.dot(z[i], z[j])))
            den = num + sum(math.exp(w * float(np.dot(z[i], z[n]))) for n in neg)
            acc += -math.log(num / den)
        total += acc / (len(pos) - 1)
    return total


def test_symmetric_case_is_ln2_with_zero_wgrad():
    z = np.eye(3)
    flags = np.array([True, True, False])
    assert env_sup_contrastive(z, flags).item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert env_sup_contrastive_wgrad(z, flags).item() == pytest.approx(0.0, abs=1e-12)


def test_closed_form_term():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    flags = np.array([True, True, False])
    term = -math.log(math.e / (math.e + math.exp(-1)))
    assert term == pytest.approx(0.126928, abs=1e-6)
    assert env_sup_contrastive(z, flags).item() == pytest.approx(2 * term, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_env_loss_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    z = unit(rng.standard_normal((6, 4)))
    flags = np.array([1, 1, 1, 0, 0, 0], dtype=bool)
    rng.shuffle(flags)
    w = rng.uniform(0.5, 2.0)
    assert env_sup_contrastive(z, flags, w).item() == pytest.approx(brute_env_loss(z, flags, w), abs=1e-12)
    h = 1e-6
    fd = (brute_env_loss(z, flags, w + h) - brute_env_loss(z, flags, w - h)) / (2 * h)
    assert env_sup_contrastive_wgrad(z, flags, w).item() == pytest.approx(fd, abs=1e-6)
    wt = Tensor(w, requires_grad=True)
    env_sup_contrastive(z, flags, wt).backward()
    assert wt.grad == pytest.approx(fd, abs=1e-6)


def test_skips_without_positives_or_negatives():
    z = unit(np.ones((3, 2)))
    assert env_sup_contrastive(z, np.array([True, False, False])) is None
    assert env_sup_contrastive(z, np.array([True, True, True])) is None
    assert env_sup_contrastive_wgrad(z, np.array([True, True, True])) is None


def test_dummy_classifier_is_one():
    w = dummy_classifier()
    assert w.item() == 1.0 and w.requires_grad


def test_rex_examples():
    a, b = Tensor(0.2), Tensor(0.4)
    assert rex_class_loss([a, b], 10.0).item() == pytest.approx(0.7, abs=1e-12)
    same = rex_class_loss([Tensor(0.3), Tensor(0.3)], 100.0).item()
    assert same == pytest.approx(0.6, abs=1e-12)
    assert same - 0.6 == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ContractError):
        rex_class_loss([a], 1.0)


def test_irmv1_examples():
    z = np.eye(3)
    flags = np.array([True, True, False])
    losses = [env_sup_contrastive(z, flags), env_sup_contrastive(z, flags)]
    grads = [env_sup_contrastive_wgrad(z, flags), env_sup_contrastive_wgrad(z, flags)]
    assert irmv1_class_loss(losses, grads, 100.0).item() == pytest.approx(4 * math.log(2), abs=1e-12)
    assert abs(grads[0].item()) < 1e-9
    rng = np.random.default_rng(0)
    zs = [unit(rng.standard_normal((5, 3))) for _ in range(2)]
    fl = np.array([1, 1, 0, 0, 0], dtype=bool)
    losses = [env_sup_contrastive(q, fl) for q in zs]
    grads = [env_sup_contrastive_wgrad(q, fl) for q in zs]
    assert irmv1_class_loss(losses, grads, 0.0).item() == pytest.approx(sum(l.item() for l in losses), abs=1e-12)
    h = 1e-6
    expected = 0.0
    for q in zs:
        g = (brute_env_loss(q, fl, 1 + h) - brute_env_loss(q, fl, 1 - h)) / (2 * h)
        expected += brute_env_loss(q, fl) + 3.0 * g * g
    assert irmv1_class_loss(losses, grads, 3.0).item() == pytest.approx(expected, abs=1e-6)
    with pytest.raises(ContractError):
        irmv1_class_loss(losses[:1], grads[:1], 1.0)


def test_penalty_config_validation():
    with pytest.raises(ConfigError):
        PenaltyConfig("vrex")
    with pytest.raises(ConfigError):
        PenaltyConfig("rex", -1.0)
    with pytest.raises(ConfigError):
        PenaltyConfig("rex", float("inf"))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=2, max_size=5), st.floats(0, 100))
def test_rex_penalty_non_negative(risks, lam):
    total = rex_class_loss([Tensor(r) for r in risks], lam).item()
    assert total - sum(risks) >= -1e-9
    assert total - sum(risks) == pytest.approx(lam * np.var(risks), abs=1e-9 * (1 + lam))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16))
def test_identical_envs_have_zero_variance(seed):
    rng = np.random.default_rng(seed)
    z = unit(rng.standard_normal((5, 3)))
    fl = np.array([1, 1, 1, 0, 0], dtype=bool)
    l1, l2 = env_sup_contrastive(z, fl), env_sup_contrastive(z.copy(), fl)
    assert l1.item() == l2.item()
    assert rex_class_loss([l1, l2], 10.0).item() - 2 * l1.item() == pytest.approx(0.0, abs=1e-12)


# -- composite objective ------------------------------------------------------


def toy_model(seed=0):
    cfg = ModelConfig(input_dim=6, num_classes=3, hidden=(8,), feature_dim=5, head_hidden=7, head_out=4)
    model = EqInvModel.init(cfg, np.random.default_rng(seed))
    model.mask.value.data[...] = np.random.default_rng(seed + 100).uniform(0.5, 1.5, 5)
    return model


def toy_batch(rng, anchors=(0, 1)):
    x = rng.standard_normal((12, 6))
    y = rng.integers(0, 3, 12)
    groups = [AnchorGroup(k, rng.standard_normal((3, 6)), [rng.standard_normal((3, 6)) for _ in range(2)])
              for k in anchors]
    return x, y, groups


def grads(model, loss):
    model.zero_grad()
    loss.backward()
    return {k: (None if p.grad is None else p.grad.copy()) for k, p in model.parameters().items()}


@pytest.mark.parametrize("lam", [0.0, 2.0, 10.0, 100.0])
@pytest.mark.parametrize("mode", ["rex", "irmv1"])
def test_phi_gradient_routing_is_bitwise(lam, mode):
    model = toy_model()
    rng = np.random.default_rng(int(lam) + (mode == "rex"))
    for _ in range(20):
        x, y, groups = toy_batch(rng)
        total = grads(model, total_objective(model, x, y, groups, PenaltyConfig(mode, lam)).loss)
        ce = grads(model, ad.softmax_cross_entropy(model.logits(x), y))
        for name in model.encoder.params:
            assert total[name].tobytes() == ce[name].tobytes()


def test_no_anchors_reduces_to_cross_entropy():
    model = toy_model()
    x, y, _ = toy_batch(np.random.default_rng(0))
    res = total_objective(model, x, y, [], PenaltyConfig("rex", 0.0))
    assert res.ce_only
    assert res.loss.item() == ad.softmax_cross_entropy(model.logits(x), y).item()


def test_starved_group_is_skipped():
    model = toy_model()
    rng = np.random.default_rng(1)
    x, y, _ = toy_batch(rng)
    group = AnchorGroup(2, rng.standard_normal((1, 6)), [rng.standard_normal((3, 6))] * 2)
    res = total_objective(model, x, y, [group], PenaltyConfig())
    assert res.skipped == [2] and res.ce_only


def test_class_loss_gradients_match_finite_differences():
    model = toy_model(3)
    _, _, groups = toy_batch(np.random.default_rng(3), anchors=(0,))
    params = [p for n, p in model.parameters().items() if n.startswith(("head.", "mask"))]
    err = ad.grad_check(lambda: class_loss(model, groups[0], PenaltyConfig("rex", 10.0))[0], params,
                        eps=1e-4, stencil=5)
    assert err < 1e-5


def test_mask_gradient_grows_with_lambda():
    model = toy_model(4)
    _, _, groups = toy_batch(np.random.default_rng(4), anchors=(0,))
    norms = []
    base = None
    for lam in (0.0, 2.0, 10.0, 100.0):
        model.zero_grad()
        class_loss(model, groups[0], PenaltyConfig("rex", lam))[0].backward()
        g = model.mask.value.grad.copy()
        if base is None:
            base = g
        norms.append(np.linalg.norm(g - base))
    assert norms[0] == 0.0
    assert all(a <= b for a, b in zip(norms, norms[1:]))
    assert norms[-1] > 0
