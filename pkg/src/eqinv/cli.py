"""Command-line entry point: ``eqinv <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or file-format error,
3 numeric failure (NaN during training or a failing gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .data import generate, load_dataset, save_dataset
from .envgen import (build_feature_bank, construct_environments, env_diagnostics, load_environments,
                     save_environments, summarize_diagnostics, write_diagnostics_csv)
from .errors import ConfigError, ContractError, DataError, FormatError, NumericError, SpecError
from .evaluation import export_embeddings
from .models import Encoder, EqInvModel, load_checkpoint, save_checkpoint
from .pipeline import evaluate, reproduce, write_loss_curve, write_metric_table
from .ssl import pretrain, sample_equivariance_score
from .trainer import RunManifest, ablate, finetune, git_blob_hash, train_baseline

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return p


def _manifest(command: str, config: ExperimentConfig, data_path=None, **kw) -> RunManifest:
    return RunManifest(
        command=command,
        config=config.to_dict(),
        seeds={"data": config.data.seed, "pretrain": config.pretrain.seed, "finetune": config.finetune.seed},
        dataset_hash=git_blob_hash(data_path) if data_path else None,
        **kw,
    )


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out)
    save_dataset(generate(cfg.data), out)
    _manifest("gen-data", cfg, out).write(_manifest_path(out))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    dataset = load_dataset(_existing(args.data))
    res = pretrain(dataset, cfg.pretrain)
    out = Path(args.out)
    save_checkpoint(res.encoder.params, out)
    curve = out.with_name(out.name + ".loss.csv")
    write_loss_curve(res.loss_curve, curve)
    _manifest("pretrain", cfg, args.data, checkpoints={"encoder": out.name},
              metrics={"loss_curve": curve.name, "final_loss": res.final_loss}).write(_manifest_path(out))
    print(f"final loss {res.final_loss:.6f}; wrote {out}")
    return EXIT_OK


def cmd_build_envs(args) -> int:
    dataset = load_dataset(_existing(args.data))
    encoder = Encoder.from_params(load_checkpoint(_existing(args.ckpt)))
    bank = build_feature_bank(encoder, dataset)
    splits = construct_environments(bank, adjust=not args.no_adjust)
    out = Path(args.out)
    save_environments(splits, out, {"adjust": not args.no_adjust})
    diags = [env_diagnostics(s, dataset) for s in splits]
    diag_path = out.with_name(out.stem + "_diagnostics.csv")
    write_diagnostics_csv(diags, diag_path)
    summary = summarize_diagnostics(diags)
    min_dist, collisions = sample_equivariance_score(bank.rows)
    _manifest("build-envs", ExperimentConfig(), args.data, checkpoints={"encoder": str(args.ckpt)},
              metrics={**summary, "diagnostics": diag_path.name, "feature_collisions": collisions,
                       "feature_min_distance": min_dist}).write(_manifest_path(out))
    for k, v in summary.items():
        print(f"{k} {v:.6f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    dataset = load_dataset(_existing(args.data))
    encoder_params = load_checkpoint(_existing(args.ckpt)) if args.ckpt else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.baseline:
        res = train_baseline(args.baseline, dataset, cfg.finetune, encoder_params)
    else:
        splits = load_environments(_existing(args.envs)) if args.envs else None
        if splits is None and cfg.finetune.anchors_per_batch > 0:
            raise UsageError("--envs is required unless finetune.anchors_per_batch = 0 or --baseline is given")
        res = finetune(encoder_params, dataset, splits, cfg.finetune)
    save_checkpoint(res.model.parameters(), out / "model.ckpt")
    res.metrics.to_csv(out / "metrics.csv")
    _manifest("finetune", cfg, args.data, checkpoints={"model": "model.ckpt"},
              metrics={"log": "metrics.csv"}).write(out / "manifest.json")
    print(f"test_conflicting accuracy {res.metrics.final('test_conflicting', 'accuracy'):.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = load_dataset(_existing(args.data))
    model = EqInvModel.from_params(load_checkpoint(_existing(args.model)))
    metrics = evaluate(model, dataset)
    out = Path(args.out)
    write_metric_table(metrics, out)
    if args.embeddings:
        export_embeddings(model, dataset, args.embeddings)
    _manifest("eval", ExperimentConfig(), args.data, checkpoints={"model": str(args.model)},
              metrics={"table": out.name}).write(_manifest_path(out))
    for k, v in metrics.items():
        print(f"{k} {v:.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    dataset = load_dataset(_existing(args.data))
    out = Path(args.out_dir)
    result = ablate(dataset, cfg.finetune, cfg.pretrain, cfg.ablate.seeds, out_dir=out)
    _manifest("ablate", cfg, args.data, metrics={"grid": "grid.csv"}).write(out / "manifest.json")
    for row in result.grid():
        print(f"{row['row']:22s} aligned {row['test_aligned_mean']:.4f}+-{row['test_aligned_std']:.4f}  "
              f"conflicting {row['test_conflicting_mean']:.4f}+-{row['test_conflicting_std']:.4f}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    table = reproduce(cfg, args.out_dir)
    for name, m in table.items():
        print(f"{name:14s} aligned {m['accuracy_test_aligned']:.4f}  conflicting {m['accuracy_test_conflicting']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    reports, seconds = run_suite(args.instances, args.seed)
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:28s} max_rel_error={r.max_rel_error:.3e}")
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed (tolerance {TOLERANCE:g}) in {seconds:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eqinv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a biased dataset file")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="contrastive pretraining of the encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("build-envs", help="class-wise environments from a pretrained encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-adjust", action="store_true", help="rank by raw similarity (no class adjustment)")
    p.set_defaults(func=cmd_build_envs)

    p = sub.add_parser("finetune", help="fine-tune with the class-wise invariance loss")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="encoder checkpoint; omit to start from a random encoder")
    p.add_argument("--envs")
    p.add_argument("--config")
    p.add_argument("--baseline", choices=("scratch_erm", "ssl_finetune"))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="accuracies, variances, oracle risk and embeddings")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="step-ablation grid over seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("reproduce", help="default desk experiment end to end")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("gradcheck", help="finite-difference suite")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError, SpecError, ContractError) as exc:
        print(f"eqinv {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DataError, OSError) as exc:
        print(f"eqinv {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"eqinv {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
