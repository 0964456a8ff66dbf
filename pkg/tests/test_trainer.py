from dataclasses import replace

import numpy as np
import pytest

from eqinv.data import BiasedDatasetSpec, forbid_env_access, generate, save_dataset
from eqinv.envgen import build_feature_bank, construct_environments
from eqinv.errors import ConfigError, ContractError
from eqinv.models import Encoder
from eqinv.ssl import PretrainConfig
from eqinv.trainer import (ABLATION_ROWS, FinetuneConfig, MetricLog, RunManifest, ablate, finetune,
                           git_blob_hash, stratified_order, train_baseline)

SMALL = FinetuneConfig(epochs=3, batch_size=16, decay_epochs=(1, 2), hidden=(16,), feature_dim=8, head_hidden=12,
                       head_out=6, anchors_per_batch=2, positives_per_anchor=4, negatives_per_env=4, diag_every=1)


@pytest.fixture(scope="module")
def setup(tiny_dataset):
    enc = Encoder.init(3 * 8 * 8, (16,), 8, np.random.default_rng(0))
    splits = construct_environments(build_feature_bank(enc, tiny_dataset))
    return tiny_dataset, enc.params, splits


def test_smoke_losses_finite(setup):
    ds, params, splits = setup
    res = finetune(params, ds, splits, SMALL)
    for metric in ("ce_loss", "class_loss"):
        values = [v for _, v in res.metrics.series("train", metric)]
        assert len(values) == SMALL.epochs and np.isfinite(values).all()
    assert 0 <= res.metrics.final("test_conflicting", "accuracy") <= 1


def test_reruns_are_bitwise_identical(setup, tmp_path):
    ds, params, splits = setup
    a, b = finetune(params, ds, splits, SMALL), finetune(params, ds, splits, SMALL)
    a.metrics.to_csv(tmp_path / "a.csv")
    b.metrics.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    for k, p in a.model.parameters().items():
        assert p.data.tobytes() == b.model.parameters()[k].data.tobytes()


def test_encoder_params_are_not_mutated(setup):
    ds, params, splits = setup
    before = {k: v.data.copy() for k, v in params.items()}
    finetune(params, ds, splits, SMALL)
    for k, v in params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_degenerate_config_equals_ssl_baseline(setup, tmp_path):
    ds, params, _ = setup
    plain = finetune(params, ds, None, replace(SMALL, anchors_per_batch=0, lam=0.0))
    base = train_baseline("ssl_finetune", ds, SMALL, params)
    plain.metrics.to_csv(tmp_path / "a.csv")
    base.metrics.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_metric_schemas_match(setup):
    ds, params, splits = setup
    runs = [finetune(params, ds, splits, SMALL), train_baseline("ssl_finetune", ds, SMALL, params),
            train_baseline("scratch_erm", ds, SMALL)]
    keys = [{(s, m) for _, s, m, _ in r.metrics.rows if m != "class_loss"} for r in runs]
    assert keys[0] == keys[1] == keys[2]


def test_lr_schedule_in_log(setup):
    ds, params, splits = setup
    cfg = replace(SMALL, epochs=5, decay_epochs=(2, 4))
    lrs = [v for _, v in finetune(params, ds, splits, cfg).metrics.series("train", "lr")]
    assert lrs == pytest.approx([0.05, 0.05, 0.005, 0.005, 0.0005])


def test_training_never_reads_colours(setup):
    ds, params, splits = setup
    before = ds.env_label_reads
    with forbid_env_access("fine-tuning"):
        finetune(params, ds, splits, SMALL)
        train_baseline("scratch_erm", ds, SMALL)
    assert ds.env_label_reads == before


def test_contract_errors(setup):
    ds, params, splits = setup
    with pytest.raises(ContractError):
        finetune(params, ds, None, SMALL)
    with pytest.raises(ContractError):
        finetune(params, ds, splits[:2], SMALL)
    with pytest.raises(ConfigError):
        finetune(params, ds, splits, replace(SMALL, anchors_per_batch=4))
    with pytest.raises(ConfigError):
        train_baseline("other", ds, SMALL)
    with pytest.raises(ContractError):
        train_baseline("ssl_finetune", ds, SMALL)


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(decay_epochs=(50,)), dict(penalty="x"), dict(lam=-1.0),
                                dict(anchors_per_batch=-1)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        FinetuneConfig(**kw)


def test_stratified_order_is_a_balanced_permutation():
    labels = np.repeat(np.arange(4), 25)
    ids = np.arange(100)
    order = stratified_order(labels, ids, np.random.default_rng(0))
    assert sorted(order) == list(ids)
    for start in range(0, 100, 20):
        assert np.all(np.bincount(labels[order[start:start + 20]], minlength=4) == 5)


def test_metric_log_round_trip(tmp_path):
    log = MetricLog()
    log.add(0, "val", "accuracy", 1 / 3)
    log.add(1, "val", "accuracy", 0.1 + 0.2)
    log.to_csv(tmp_path / "m.csv")
    back = MetricLog.from_csv(tmp_path / "m.csv")
    assert back.rows == log.rows
    assert back.final("val", "accuracy") == 0.1 + 0.2
    with pytest.raises(KeyError):
        back.final("test", "accuracy")


def test_manifest_round_trip_and_hash(tmp_path, tiny_dataset):
    save_dataset(tiny_dataset, tmp_path / "d.eqiv")
    h = git_blob_hash(tmp_path / "d.eqiv")
    (tmp_path / "hello").write_bytes(b"hello\n")
    assert git_blob_hash(tmp_path / "hello") == "ce013625030ba8dba906f756967f9e9ca394464a"
    m = RunManifest("finetune", {"lam": 10.0}, {"data": 0}, {"model": "m.ckpt"}, {"log": "m.csv"}, h)
    m.write(tmp_path / "manifest.json")
    assert RunManifest.read(tmp_path / "manifest.json") == m


def test_ablation_grid_schema(tmp_path, tiny_dataset):
    pre = PretrainConfig(epochs=1, batch_size=8, hidden=(16,), feature_dim=8)
    cfg = replace(SMALL, epochs=2, decay_epochs=(1,), diag_every=0)
    seen = []
    res = ablate(tiny_dataset, cfg, pre, seeds=(0, 1), out_dir=tmp_path, on_run=lambda r, s, _: seen.append(r.name))
    grid = res.grid()
    assert [g["row"] for g in grid] == [r.name for r in ABLATION_ROWS]
    assert {g["row"] for g in grid if g["random_splits"]} == {"scratch+step3", "ssl+step3"}
    assert all({"test_aligned_mean", "test_conflicting_mean", "test_aligned_std", "test_conflicting_std"} <= set(g)
               for g in grid)
    assert len(seen) == 12
    assert (tmp_path / "grid.csv").read_text().count("\n") == 7


def test_scratch_reaches_high_accuracy_without_bias():
    ds = generate(BiasedDatasetSpec(bias_ratio=0.1))
    res = train_baseline("scratch_erm", ds, FinetuneConfig(epochs=10, decay_epochs=(6, 8), diag_every=0))
    assert res.metrics.final("test_aligned", "accuracy") > 0.9
    assert res.metrics.final("test_conflicting", "accuracy") > 0.9
