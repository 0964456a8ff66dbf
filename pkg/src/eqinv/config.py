"""Line-oriented ``section.key = value`` experiment configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

from .data import BiasedDatasetSpec
from .errors import ConfigError, SpecError
from .ssl import PretrainConfig
from .trainer import FinetuneConfig


@dataclass(frozen=True)
class AblateConfig:
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class ExperimentConfig:
    data: BiasedDatasetSpec = field(default_factory=BiasedDatasetSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def with_seed(self, seed: int) -> ExperimentConfig:
        """Same experiment with every stage driven by ``seed``."""
        return replace(self, data=replace(self.data, seed=seed), pretrain=replace(self.pretrain, seed=seed),
                       finetune=replace(self.finetune, seed=seed), ablate=AblateConfig((seed,)))

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


SECTIONS = {
    "data": BiasedDatasetSpec,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "ablate": AblateConfig,
}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(text: str, hint: str):
    hint = hint.replace(" ", "")
    if hint == "int":
        return int(text)
    if hint == "float":
        return float(text)
    if hint == "bool":
        return _parse_bool(text)
    if hint == "str":
        return text
    if hint.startswith("tuple[tuple[float") and text.lower() == "default":
        return None
    if hint.startswith("tuple[tuple[float"):
        # palette: "r,g,b; r,g,b; ..."
        return tuple(tuple(float(v) for v in c.split(",")) for c in text.split(";") if c.strip())
    if hint.startswith("tuple[int"):
        return tuple(int(v) for v in text.split(",") if v.strip())
    raise ValueError(f"unsupported field type {hint}")


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``section.key = value`` lines; ``#`` starts a comment; unknown keys raise ConfigError."""
    base = base or ExperimentConfig()
    updates: dict[str, dict] = {name: {} for name in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        hints = {f.name: f.type for f in fields(SECTIONS[section])}
        if name not in hints:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if name in updates[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            updates[section][name] = _convert(value, str(hints[name]))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    data = updates["data"]
    if "num_classes" in data and "palette" not in data:
        data["palette"] = None
    parts = {}
    for section in SECTIONS:
        try:
            parts[section] = replace(getattr(base, section), **updates[section])
        except SpecError as exc:
            raise ConfigError(str(exc)) from exc
    return ExperimentConfig(**parts)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def format_config(config: ExperimentConfig) -> str:
    """Inverse of :func:`parse_config` (round-trips every field)."""
    lines = []
    for section in SECTIONS:
        obj = getattr(config, section)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple) and v and isinstance(v[0], tuple):
                text = "; ".join(",".join(repr(float(x)) for x in c) for c in v)
            elif isinstance(v, tuple):
                text = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{section}.{f.name} = {text}")
    return "\n".join(lines) + "\n"

