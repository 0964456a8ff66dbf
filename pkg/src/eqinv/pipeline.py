"""End-to-end runs shared by the command line and the acceptance tests."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

from .config import ExperimentConfig
from .data import BiasedDataset, generate, save_dataset
from .envgen import (build_feature_bank, construct_environments, env_diagnostics, save_environments,
                     summarize_diagnostics, write_diagnostics_csv)
from .evaluation import accuracy, interventional_risk_oracle, intra_class_variance
from .models import EqInvModel, save_checkpoint
from .ssl import pretrain, sample_equivariance_score
from .trainer import RunManifest, finetune, git_blob_hash, train_baseline

log = logging.getLogger(__name__)

EVAL_SPLITS = ("train", "val", "test_aligned", "test_conflicting")


def evaluate(model: EqInvModel, dataset: BiasedDataset) -> dict[str, float]:
    """Accuracies, train-set intra-class variances and the reweighted-risk oracle."""
    out = {f"accuracy_{s}": accuracy(model, dataset, s) for s in EVAL_SPLITS if len(dataset.indices(s))}
    ids = dataset.indices("train")
    raw, masked = model.features(dataset.inputs(ids))
    y = dataset.labels[ids]
    out["intra_var_raw"] = intra_class_variance(raw, y)
    out["intra_var_masked"] = intra_class_variance(masked, y)
    oracle = interventional_risk_oracle(model, dataset, "train")
    out["oracle_risk"] = oracle.risk
    out["plain_risk"] = oracle.plain_risk
    out["positivity_violated"] = float(oracle.positivity_violated)
    return out


def write_metric_table(metrics: dict[str, float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, "%.17g" % v])


def write_loss_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "loss"])
        for e, s, v in curve:
            w.writerow([e, s, "%.17g" % v])


SUMMARY_COLUMNS = ("model", "accuracy_train", "accuracy_val", "accuracy_test_aligned", "accuracy_test_conflicting",
                   "intra_var_raw", "intra_var_masked", "oracle_risk")


def reproduce(config: ExperimentConfig, out_dir) -> dict[str, dict[str, float]]:
    """Generate data, pretrain, build environments, then train EqInv and both baselines.

    Every artefact lands in ``out_dir``; returns the per-model evaluation table.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = generate(config.data)
    save_dataset(dataset, out / "dataset.eqiv")

    pre = pretrain(dataset, config.pretrain)
    save_checkpoint(pre.encoder.params, out / "ssl.ckpt")
    write_loss_curve(pre.loss_curve, out / "pretrain_loss.csv")
    bank = build_feature_bank(pre.encoder, dataset)
    min_dist, collisions = sample_equivariance_score(bank.rows)

    env_rows = {}
    splits = None
    for adjust, name in ((True, "envs"), (False, "envs_noadjust")):
        s = construct_environments(bank, adjust=adjust)
        save_environments(s, out / f"{name}.json", {"adjust": adjust})
        diags = [env_diagnostics(sp, dataset) for sp in s]
        write_diagnostics_csv(diags, out / f"{name}_diagnostics.csv")
        env_rows[name] = summarize_diagnostics(diags)
        if adjust:
            splits = s

    runs = {
        "eqinv": finetune(pre.encoder.params, dataset, splits, config.finetune),
        "scratch_erm": train_baseline("scratch_erm", dataset, config.finetune),
        "ssl_finetune": train_baseline("ssl_finetune", dataset, config.finetune, pre.encoder.params),
    }
    table = {}
    for name, res in runs.items():
        (out / name).mkdir(exist_ok=True)
        save_checkpoint(res.model.parameters(), out / name / "model.ckpt")
        res.metrics.to_csv(out / name / "metrics.csv")
        table[name] = evaluate(res.model, dataset)

    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for name, m in table.items():
            w.writerow([name] + ["%.17g" % m[c] for c in SUMMARY_COLUMNS[1:]])
    with open(out / "env_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["environments", "anchor_colour_gap", "class_deviation", "max_class_deviation"])
        for name, m in env_rows.items():
            w.writerow([name] + ["%.17g" % m[k] for k in ("anchor_colour_gap", "class_deviation",
                                                        "max_class_deviation")])

    RunManifest(
        command="reproduce",
        config=config.to_dict(),
        seeds={"data": config.data.seed, "pretrain": config.pretrain.seed, "finetune": config.finetune.seed},
        checkpoints={"ssl": "ssl.ckpt", **{n: f"{n}/model.ckpt" for n in runs}},
        metrics={"summary": "summary.csv", "env_summary": "env_summary.csv",
                 "pretrain_final_loss": pre.final_loss, "feature_collisions": collisions,
                 "feature_min_distance": min_dist},
        dataset_hash=git_blob_hash(out / "dataset.eqiv"),
    ).write(out / "manifest.json")
    return table
