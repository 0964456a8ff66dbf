"""Fine-tuning loop, baselines and the step-ablation grid."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import BiasedDataset
from .envgen import EnvironmentSplit, build_feature_bank, construct_environments, random_environments
from .errors import ConfigError, ContractError, NumericError
from .evaluation import accuracy, intra_class_variance
from .models import Classifier, Encoder, EqInvModel, MaskLayer, ProjectionHead
from .objectives import AnchorGroup, PenaltyConfig, total_objective
from .optim import SGD, step_lr
from .ssl import PretrainConfig, pretrain

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    decay_epochs: tuple[int, ...] = (30, 40)
    decay_factor: float = 0.1
    penalty: str = "rex"
    lam: float = 10.0
    anchors_per_batch: int = 4
    positives_per_anchor: int = 8
    negatives_per_env: int = 8
    seed: int = 0
    weight_norm: bool = True
    hidden: tuple[int, ...] = (512, 256)
    feature_dim: int = 128
    head_hidden: int = 512
    head_out: int = 128
    diag_every: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if any(d >= self.epochs or d < 0 for d in self.decay_epochs):
            raise ConfigError(f"decay epochs {self.decay_epochs} must lie in [0, epochs={self.epochs})")
        if self.anchors_per_batch < 0:
            raise ConfigError("anchors_per_batch must be >= 0")
        PenaltyConfig(self.penalty, self.lam)

    @property
    def penalty_config(self) -> PenaltyConfig:
        return PenaltyConfig(self.penalty, self.lam)


class MetricLog:
    """Rows of (epoch, split, metric, value)."""

    HEADER = ("epoch", "split", "metric", "value")

    def __init__(self):
        self.rows: list[tuple[int, str, str, float]] = []

    def add(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.rows.append((int(epoch), split, metric, float(value)))

    def series(self, split: str, metric: str) -> list[tuple[int, float]]:
        return [(e, v) for e, s, m, v in self.rows if s == split and m == metric]

    def final(self, split: str, metric: str) -> float:
        series = self.series(split, metric)
        if not series:
            raise KeyError((split, metric))
        return series[-1][1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            for e, s, m, v in self.rows:
                w.writerow([e, s, m, "%.17g" % v])

    @classmethod
    def from_csv(cls, path) -> MetricLog:
        out = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            if tuple(next(reader)) != cls.HEADER:
                raise ValueError("unexpected metric CSV header")
            for e, s, m, v in reader:
                out.add(int(e), s, m, float(v))
        return out


@dataclass
class FinetuneResult:
    model: EqInvModel
    metrics: MetricLog
    skipped_slices: int = 0


def _copy_params(params: dict) -> dict:
    return {k: ad.Tensor(v.data, requires_grad=True) for k, v in params.items()}


def init_encoder(dataset: BiasedDataset, config: FinetuneConfig) -> Encoder:
    """Random encoder used by the from-scratch variants (same draw for a given seed)."""
    side = dataset.spec.image_side
    return Encoder.init(3 * side * side, config.hidden, config.feature_dim,
                        np.random.default_rng([config.seed, 20]))


def build_model(dataset: BiasedDataset, config: FinetuneConfig, encoder_params: dict | None) -> EqInvModel:
    encoder = init_encoder(dataset, config) if encoder_params is None else Encoder.from_params(
        _copy_params(encoder_params))
    d = encoder.feature_dim
    return EqInvModel(
        encoder,
        MaskLayer.init(d),
        ProjectionHead.init(d, config.head_hidden, config.head_out, np.random.default_rng([config.seed, 21])),
        Classifier.init(d, dataset.num_classes, np.random.default_rng([config.seed, 24]), config.weight_norm),
    )


def stratified_order(labels: np.ndarray, ids: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shuffle within each class, then interleave classes so every chunk is near class-balanced."""
    keys = np.empty(len(ids))
    for k in np.unique(labels[ids]):
        pos = np.flatnonzero(labels[ids] == k)
        perm = rng.permutation(len(pos))
        keys[pos[perm]] = (np.arange(len(pos)) + 0.5) / len(pos)
    order = np.lexsort((labels[ids], keys))
    return ids[order]


def _draw(rng: np.random.Generator, pool: np.ndarray, n: int) -> np.ndarray:
    if len(pool) == 0:
        return pool
    return pool[np.sort(rng.choice(len(pool), size=min(n, len(pool)), replace=False))]


def _diagnose(model: EqInvModel, dataset: BiasedDataset, log_: MetricLog, epoch: int) -> None:
    ids = dataset.indices("train")
    raw, masked = model.features(dataset.inputs(ids))
    y = dataset.labels[ids]
    log_.add(epoch, "train", "intra_var_raw", intra_class_variance(raw, y))
    log_.add(epoch, "train", "intra_var_masked", intra_class_variance(masked, y))
    log_.add(epoch, "train", "mask_mean_abs", float(np.abs(model.mask.value.data).mean()))


def finetune(encoder_params: dict | None, dataset: BiasedDataset, splits: list[EnvironmentSplit] | None,
             config: FinetuneConfig) -> FinetuneResult:
    """Cross-entropy fine-tuning plus the class-wise invariance loss on sampled anchors.

    ``encoder_params`` of None starts phi from a random initialisation.  With
    ``anchors_per_batch == 0`` the run is plain cross-entropy fine-tuning.
    """
    c = dataset.num_classes
    a_per = config.anchors_per_batch
    if a_per > c:
        raise ConfigError(f"anchors_per_batch={a_per} exceeds number of classes {c}")
    by_anchor: dict[int, EnvironmentSplit] = {}
    if a_per > 0:
        if splits is None:
            raise ContractError("environment splits are required when anchors_per_batch > 0")
        by_anchor = {s.anchor: s for s in splits}
        missing = sorted(set(range(c)) - set(by_anchor))
        if missing:
            raise ContractError(f"no environment split for classes {missing}")

    model = build_model(dataset, config, encoder_params)
    params = model.parameters()
    opt = SGD(params, config.lr, config.momentum, config.weight_decay)
    penalty = config.penalty_config
    ce_rng = np.random.default_rng([config.seed, 22])
    irm_rng = np.random.default_rng([config.seed, 23])

    train_ids = dataset.indices("train")
    val_ids = dataset.indices("val")
    labels = dataset.labels
    metrics = MetricLog()
    steps_per_epoch = math.ceil(len(train_ids) / config.batch_size)
    step = 0
    skipped = 0
    for epoch in range(config.epochs):
        opt.lr = step_lr(config.lr, epoch, config.decay_epochs, config.decay_factor)
        metrics.add(epoch, "train", "lr", opt.lr)
        order = stratified_order(labels, train_ids, ce_rng)
        ce_sum = irm_sum = 0.0
        irm_count = 0
        for b in range(steps_per_epoch):
            batch = order[b * config.batch_size:(b + 1) * config.batch_size]
            groups = []
            for j in range(a_per):
                k = (step * a_per + j) % c
                split = by_anchor[k]
                pos = _draw(irm_rng, split.anchor_ids, config.positives_per_anchor)
                negs = [_draw(irm_rng, split.negatives(e), config.negatives_per_env) for e in (1, 2)]
                groups.append(AnchorGroup(k, dataset.inputs(pos), [dataset.inputs(n) for n in negs]))
            opt.zero_grad()
            res = total_objective(model, dataset.inputs(batch), labels[batch], groups, penalty)
            if not np.isfinite(res.loss.data).all():
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            res.loss.backward()
            opt.step()
            ce_sum += res.ce.item()
            for lk in res.class_losses.values():
                irm_sum += lk.item()
                irm_count += 1
            skipped += len(res.skipped)
            step += 1
        metrics.add(epoch, "train", "ce_loss", ce_sum / steps_per_epoch)
        if a_per:
            metrics.add(epoch, "train", "class_loss", irm_sum / max(irm_count, 1))
        metrics.add(epoch, "val", "accuracy", accuracy(model, dataset, "val"))
        last = epoch == config.epochs - 1
        if last or (config.diag_every and (epoch + 1) % config.diag_every == 0):
            _diagnose(model, dataset, metrics, epoch)
    final = config.epochs - 1
    for split_name in ("train", "test_aligned", "test_conflicting"):
        metrics.add(final, split_name, "accuracy", accuracy(model, dataset, split_name))
    if skipped:
        log.warning("skipped %d class-loss slices without enough positives or negatives", skipped)
    return FinetuneResult(model, metrics, skipped)


BASELINES = ("scratch_erm", "ssl_finetune")


def train_baseline(kind: str, dataset: BiasedDataset, config: FinetuneConfig,
                   encoder_params: dict | None = None) -> FinetuneResult:
    """Cross-entropy-only training from a random (scratch_erm) or pretrained (ssl_finetune) encoder."""
    if kind not in BASELINES:
        raise ConfigError(f"unknown baseline {kind!r}")
    cfg = replace(config, anchors_per_batch=0, lam=0.0)
    if kind == "scratch_erm":
        return finetune(None, dataset, None, cfg)
    if encoder_params is None:
        raise ContractError("ssl_finetune needs a pretrained encoder")
    return finetune(encoder_params, dataset, None, cfg)


# -- ablation grid ----------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    name: str
    ssl: bool
    envs: bool
    invariance: bool

    @property
    def random_splits(self) -> bool:
        return self.invariance and not self.envs


ABLATION_ROWS = (
    AblationRow("scratch", False, False, False),
    AblationRow("scratch+step3", False, False, True),
    AblationRow("scratch+step2+step3", False, True, True),
    AblationRow("ssl", True, False, False),
    AblationRow("ssl+step3", True, False, True),
    AblationRow("ssl+step2+step3", True, True, True),
)


@dataclass
class AblationResult:
    runs: dict[tuple[str, int], MetricLog] = field(default_factory=dict)
    pretrain_losses: dict[int, float] = field(default_factory=dict)
    encoders: dict[int, dict] = field(default_factory=dict)  # pretrained phi parameters per seed
    seeds: tuple[int, ...] = ()

    def values(self, row: str, split: str, metric: str = "accuracy") -> np.ndarray:
        return np.array([self.runs[(row, s)].final(split, metric) for s in self.seeds])

    def grid(self) -> list[dict]:
        out = []
        for row in ABLATION_ROWS:
            rec = {"row": row.name, "step1": row.ssl, "step2": row.envs, "step3": row.invariance,
                   "random_splits": row.random_splits}
            for split in ("test_aligned", "test_conflicting"):
                v = self.values(row.name, split)
                rec[f"{split}_mean"] = float(v.mean())
                rec[f"{split}_std"] = float(v.std())
            out.append(rec)
        return out

    def write_grid(self, path) -> None:
        rows = self.grid()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: ("%.17g" % v if isinstance(v, float) else v) for k, v in r.items()})


def ablate(dataset: BiasedDataset, config: FinetuneConfig, pretrain_config: PretrainConfig,
           seeds=(0, 1, 2), rows=ABLATION_ROWS, out_dir=None, on_run=None) -> AblationResult:
    """Run every (row, seed) cell; Step 3 without Step 2 uses index-random even splits."""
    result = AblationResult(seeds=tuple(seeds))
    out_dir = Path(out_dir) if out_dir is not None else None
    for seed in seeds:
        cfg = replace(config, seed=seed)
        encoders = {}
        if any(r.ssl for r in rows):
            pre = pretrain(dataset, replace(pretrain_config, seed=seed))
            encoders[True] = pre.encoder
            result.pretrain_losses[seed] = pre.final_loss
            result.encoders[seed] = pre.encoder.params
        if any(not r.ssl for r in rows):
            encoders[False] = init_encoder(dataset, cfg)
        for row in rows:
            encoder = encoders[row.ssl]
            splits = None
            if row.invariance:
                bank = build_feature_bank(encoder, dataset)
                if row.envs:
                    splits = construct_environments(bank, adjust=True)
                else:
                    splits = random_environments(bank, np.random.default_rng([seed, 31]))
            run_cfg = cfg if row.invariance else replace(cfg, anchors_per_batch=0, lam=0.0)
            res = finetune(encoder.params, dataset, splits, run_cfg)
            result.runs[(row.name, seed)] = res.metrics
            if out_dir is not None:
                out_dir.mkdir(parents=True, exist_ok=True)
                res.metrics.to_csv(out_dir / f"metrics_{row.name}_seed{seed}.csv")
            if on_run is not None:
                on_run(row, seed, res)
    if out_dir is not None:
        result.write_grid(out_dir / "grid.csv")
    return result


# -- manifests ----------------------------------------------------------------


def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    checkpoints: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    dataset_hash: str | None = None

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True, default=_jsonable))

    @classmethod
    def read(cls, path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text()))


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj)}")
