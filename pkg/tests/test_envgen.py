import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqinv.data import BiasedDatasetSpec, forbid_env_access, generate
from eqinv.envgen import (adjust_similarity, bank_from_features, build_feature_bank, construct_environments,
                          env_diagnostics, even_split, load_environments, random_environments, save_environments,
                          similarity_stats, split_environments, summarize_diagnostics, write_diagnostics_csv)
from eqinv.errors import ContractError, DataError, FormatError
from eqinv.models import Encoder


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def make_bank(rng, counts, d=5):
    labels = np.repeat(np.arange(len(counts)), counts)
    return bank_from_features(rng.standard_normal((len(labels), d)), labels, np.arange(len(labels)), len(counts))


def test_similarity_identical_and_orthogonal():
    feats = np.ones((6, 3))
    bank = bank_from_features(feats, np.array([0, 0, 1, 1, 2, 2]), np.arange(6), 3)
    np.testing.assert_allclose(similarity_stats(bank, 0), np.ones(4), atol=1e-12)
    feats = np.array([[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    bank = bank_from_features(feats, np.array([0, 0, 1, 1]), np.arange(4), 2)
    np.testing.assert_array_equal(similarity_stats(bank, 0), [0.0, 0.0])


def test_similarity_matches_double_loop():
    rng = np.random.default_rng(0)
    bank = make_bank(rng, [3, 4])
    s = similarity_stats(bank, 0)
    anchor, other = bank.rows[:3], bank.rows[3:]
    for j in range(4):
        total = 0.0
        for i in range(3):
            total += sum(anchor[i, t] * other[j, t] for t in range(anchor.shape[1]))
        assert s[j] == pytest.approx(total / 3, abs=1e-12)
    with pytest.raises(ContractError):
        similarity_stats(bank, 5)


def test_bank_rows_unit_and_order_independent():
    rng = np.random.default_rng(1)
    feats = rng.standard_normal((20, 4))
    labels = rng.integers(0, 3, 20)
    labels[:3] = [0, 1, 2]
    a = bank_from_features(feats, labels, np.arange(20), 3)
    perm = rng.permutation(20)
    b = bank_from_features(feats[perm], labels[perm], perm, 3)
    np.testing.assert_allclose(np.linalg.norm(a.rows, axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(a.rows, b.rows)
    np.testing.assert_array_equal(a.sample_ids, b.sample_ids)
    lo = [r[0] for r in a.class_ranges] + [20]
    assert lo[0] == 0 and all(a.class_ranges[i][1] == lo[i + 1] for i in range(3))
    with pytest.raises(DataError):
        bank_from_features(feats, np.zeros(20, int), np.arange(20), 2)


def test_feature_bank_matches_per_sample_encoding(tiny_dataset):
    enc = Encoder.init(3 * 8 * 8, (6,), 4, np.random.default_rng(2))
    bank = build_feature_bank(enc, tiny_dataset, batch_size=7)
    ids = tiny_dataset.indices("train")[:20]
    for i in ids:
        row = bank.rows[np.flatnonzero(bank.sample_ids == i)[0]]
        f = enc(tiny_dataset.inputs([i])).data[0]
        np.testing.assert_allclose(row, f / (np.linalg.norm(f) + 1e-12), rtol=0, atol=1e-12)


def test_adjust_example():
    s = adjust_similarity([0.9, 0.5, 0.2, 0.4], [(0, 2), (2, 4)])
    np.testing.assert_allclose(s, [0.2, -0.2, -0.1, 0.1], atol=1e-12)
    np.testing.assert_array_equal(adjust_similarity([0.3, 0.3, 0.3], [(0, 3)]), [0.0, 0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(0, 2**16))
def test_adjust_sums_to_zero_and_ignores_class_offsets(sizes, seed):
    rng = np.random.default_rng(seed)
    edges = np.concatenate([[0], np.cumsum(sizes)])
    ranges = list(zip(edges[:-1], edges[1:]))
    s = rng.uniform(-1, 1, edges[-1])
    adj = adjust_similarity(s, ranges)
    offsets = np.repeat(rng.uniform(-1, 1, len(sizes)), sizes)
    np.testing.assert_allclose(adjust_similarity(s + offsets, ranges), adj, atol=1e-12)
    for lo, hi in ranges:
        assert abs(adj[lo:hi].sum()) < 1e-9


def test_split_examples():
    sp = split_environments([0.3, -0.1, 0.2, -0.4])
    np.testing.assert_array_equal(sp.env1, [0, 2])
    np.testing.assert_array_equal(sp.env2, [1, 3])
    sp = split_environments(np.zeros(5))
    np.testing.assert_array_equal(sp.env1, [0, 1, 2])
    with pytest.raises(ContractError):
        split_environments([0.1])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 30), st.integers(0, 6), st.integers(0, 2**16))
def test_split_invariants(n, n_anchor, seed):
    rng = np.random.default_rng(seed)
    ids = rng.permutation(n + n_anchor)
    anchors, others = ids[:n_anchor], ids[n_anchor:]
    s = rng.integers(-3, 3, n) / 2.0  # plenty of ties
    sp = split_environments(s, 0, anchors, others)
    sp.check(universe=ids)
    # permutation equivariance: shuffling the pool yields the same id sets
    perm = rng.permutation(n)
    sp2 = split_environments(s[perm], 0, anchors, others[perm])
    if len(np.unique(s)) == n:
        np.testing.assert_array_equal(sp.env1, sp2.env1)
    hi, lo = even_split(s)
    assert s[hi].min() >= s[lo].max() if len(lo) else True


def test_every_sample_in_c_minus_one_pools(tiny_dataset):
    enc = Encoder.init(3 * 8 * 8, (6,), 4, np.random.default_rng(3))
    bank = build_feature_bank(enc, tiny_dataset)
    splits = construct_environments(bank)
    counts = {int(i): 0 for i in bank.sample_ids}
    for sp in splits:
        sp.check(universe=bank.sample_ids)
        for i in np.union1d(sp.negatives(1), sp.negatives(2)):
            counts[int(i)] += 1
    assert set(counts.values()) == {bank.num_classes - 1}


def test_env_construction_never_reads_colours(tiny_dataset):
    enc = Encoder.init(3 * 8 * 8, (6,), 4, np.random.default_rng(3))
    with forbid_env_access("environment construction"):
        bank = build_feature_bank(enc, tiny_dataset)
        construct_environments(bank)
        construct_environments(bank, adjust=False)
        random_environments(bank, np.random.default_rng(0))


def colour_features(ds):
    # a perfectly colour-sensitive "encoder": the mean tint of each image
    ids = ds.indices("train")
    x = ds.images[ids].mean((2, 3)).astype(np.float64)
    return bank_from_features(x + 1e-3 * np.random.default_rng(0).standard_normal(x.shape),
                              ds.labels[ids], ids, ds.num_classes)


def glyph_features(ds):
    # colour-blind features: the binarised ink mask
    ids = ds.indices("train")
    x = (ds.images[ids].sum(1) > 0).reshape(len(ids), -1).astype(np.float64)
    return bank_from_features(x + 1e-3 * np.random.default_rng(0).standard_normal(x.shape),
                              ds.labels[ids], ids, ds.num_classes)


def test_unbiased_data_has_no_colour_gap():
    gaps = []
    for seed in range(3):
        ds = generate(BiasedDatasetSpec(num_classes=4, samples_per_class=200, image_side=8, bias_ratio=0.25,
                                        seed=seed, val_per_class=0, test_per_class=0))
        diags = [env_diagnostics(s, ds) for s in construct_environments(glyph_features(ds))]
        gaps.append(summarize_diagnostics(diags)["anchor_colour_gap"])
    assert np.mean(gaps) < 0.1


def test_colour_encoder_separates_anchor_colour():
    ds = generate(BiasedDatasetSpec(num_classes=4, samples_per_class=60, image_side=8, bias_ratio=0.9,
                                    val_per_class=0, test_per_class=0))
    diags = [env_diagnostics(s, ds) for s in construct_environments(colour_features(ds))]
    for d in diags:
        assert d.colour_share[0, d.anchor] == pytest.approx(1.0)
    assert summarize_diagnostics(diags)["anchor_colour_gap"] == pytest.approx(1.0)


def test_environment_file_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    bank = make_bank(rng, [3, 4, 2])
    splits = construct_environments(bank)
    path = tmp_path / "envs.json"
    save_environments(splits, path, {"adjust": True})
    back = load_environments(path)
    for a, b in zip(splits, back):
        assert a.anchor == b.anchor
        np.testing.assert_array_equal(a.env1, b.env1)
        np.testing.assert_array_equal(a.env2, b.env2)
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_environments(path)
    path.write_text("{}")
    with pytest.raises(FormatError):
        load_environments(path)


def test_diagnostics_csv(tmp_path, tiny_dataset):
    enc = Encoder.init(3 * 8 * 8, (6,), 4, np.random.default_rng(3))
    diags = [env_diagnostics(s, tiny_dataset) for s in construct_environments(build_feature_bank(enc, tiny_dataset))]
    path = tmp_path / "d.csv"
    write_diagnostics_csv(diags, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "anchor,env,class_or_color,proportion"
    c = tiny_dataset.num_classes
    assert len(lines) == 1 + c * 2 * ((c - 1) + c)
