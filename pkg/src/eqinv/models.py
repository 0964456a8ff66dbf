"""Encoder, feature mask, projection head and classifier.

Inference always runs ``classify(masked_feature(encode(x)))``.  Parameters
live in plain name -> Tensor dictionaries so checkpoints and optimizers can
address them by name.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    hidden: tuple[int, ...] = (512, 256)
    feature_dim: int = 128
    head_hidden: int = 512
    head_out: int = 128
    weight_norm: bool = True


def _he(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 2.0) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)


class Encoder:
    """MLP feature extractor: flattened image -> [B, D] features."""

    def __init__(self, dims: list[int], params: dict[str, Tensor]):
        self.dims = list(dims)
        self.params = params

    @classmethod
    def init(cls, input_dim: int, hidden, feature_dim: int, rng: np.random.Generator) -> Encoder:
        dims = [input_dim, *hidden, feature_dim]
        params = {}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            params[f"encoder.{i}.weight"] = Tensor(_he(rng, a, b, 1.0 if last else 2.0), requires_grad=True)
            params[f"encoder.{i}.bias"] = Tensor(np.zeros(b), requires_grad=True)
        return cls(dims, params)

    @classmethod
    def from_params(cls, params: dict[str, Tensor]) -> Encoder:
        n_layers = sum(1 for k in params if k.startswith("encoder.") and k.endswith(".weight"))
        dims = [params["encoder.0.weight"].shape[0]]
        for i in range(n_layers):
            dims.append(params[f"encoder.{i}.weight"].shape[1])
        return cls(dims, {k: v for k, v in params.items() if k.startswith("encoder.")})

    @property
    def feature_dim(self) -> int:
        return self.dims[-1]

    def __call__(self, x) -> Tensor:
        h = ad.as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.dims[0]:
            raise ShapeError(f"encoder expects [B, {self.dims[0]}], got {h.shape}")
        n_layers = len(self.dims) - 1
        for i in range(n_layers):
            h = h @ self.params[f"encoder.{i}.weight"] + self.params[f"encoder.{i}.bias"]
            if i < n_layers - 1:
                h = ad.relu(h)
        return h


class MaskLayer:
    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    @classmethod
    def init(cls, dim: int) -> MaskLayer:
        return cls({"mask": Tensor(np.ones(dim), requires_grad=True)})

    @property
    def value(self) -> Tensor:
        return self.params["mask"]

    def __call__(self, features) -> Tensor:
        features = ad.as_tensor(features)
        if features.shape[-1] != self.value.shape[0]:
            raise ShapeError(f"mask of length {self.value.shape[0]} vs features {features.shape}")
        return features * self.value


class ProjectionHead:
    """One-hidden-layer MLP followed by row l2 normalisation."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    @classmethod
    def init(cls, dim: int, hidden: int, out: int, rng: np.random.Generator) -> ProjectionHead:
        return cls({
            "head.0.weight": Tensor(_he(rng, dim, hidden), requires_grad=True),
            "head.0.bias": Tensor(np.zeros(hidden), requires_grad=True),
            "head.1.weight": Tensor(_he(rng, hidden, out, 1.0), requires_grad=True),
            "head.1.bias": Tensor(np.zeros(out), requires_grad=True),
        })

    def __call__(self, x) -> Tensor:
        p = self.params
        h = ad.relu(ad.as_tensor(x) @ p["head.0.weight"] + p["head.0.bias"])
        return ad.l2_normalize(h @ p["head.1.weight"] + p["head.1.bias"])


class Classifier:
    """Linear layer; with weight normalisation each row is a unit direction times a learned gain."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    @property
    def weight_norm(self) -> bool:
        return "classifier.gain" in self.params

    @classmethod
    def init(cls, dim: int, num_classes: int, rng: np.random.Generator, weight_norm: bool = True) -> Classifier:
        v = rng.standard_normal((num_classes, dim)) * np.sqrt(1.0 / dim)
        params = {"classifier.weight": Tensor(v, requires_grad=True)}
        if weight_norm:
            params["classifier.gain"] = Tensor(np.ones(num_classes), requires_grad=True)
        params["classifier.bias"] = Tensor(np.zeros(num_classes), requires_grad=True)
        return cls(params)

    def effective_weight(self) -> Tensor:
        """[C, D] weight actually applied to features."""
        v = self.params["classifier.weight"]
        if not self.weight_norm:
            return v
        gain = ad.reshape(self.params["classifier.gain"], (-1, 1))
        return ad.l2_normalize(v) * gain

    def directions(self) -> np.ndarray:
        v = self.params["classifier.weight"].data
        return v / (np.sqrt((v * v).sum(1, keepdims=True)) + 1e-12)

    def __call__(self, x) -> Tensor:
        return ad.as_tensor(x) @ ad.transpose(self.effective_weight()) + self.params["classifier.bias"]


class EqInvModel:
    """Encoder phi, mask m, projection head g and classifier f."""

    GROUPS = ("phi", "mask", "head", "classifier")

    def __init__(self, encoder: Encoder, mask: MaskLayer, head: ProjectionHead, classifier: Classifier):
        self.encoder = encoder
        self.mask = mask
        self.head = head
        self.classifier = classifier

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, encoder: Encoder | None = None) -> EqInvModel:
        if encoder is None:
            encoder = Encoder.init(config.input_dim, config.hidden, config.feature_dim, rng)
        d = encoder.feature_dim
        return cls(
            encoder,
            MaskLayer.init(d),
            ProjectionHead.init(d, config.head_hidden, config.head_out, rng),
            Classifier.init(d, config.num_classes, rng, config.weight_norm),
        )

    @classmethod
    def from_params(cls, params: dict[str, Tensor]) -> EqInvModel:
        return cls(
            Encoder.from_params(params),
            MaskLayer({"mask": params["mask"]}),
            ProjectionHead({k: v for k, v in params.items() if k.startswith("head.")}),
            Classifier({k: v for k, v in params.items() if k.startswith("classifier.")}),
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for part in (self.encoder, self.mask, self.head, self.classifier):
            out.update(part.params)
        return out

    def groups(self) -> dict[str, dict[str, Tensor]]:
        return {
            "phi": self.encoder.params,
            "mask": self.mask.params,
            "head": self.head.params,
            "classifier": self.classifier.params,
        }

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    # forward pieces
    def encode(self, x) -> Tensor:
        return self.encoder(x)

    def masked_feature(self, features) -> Tensor:
        return self.mask(features)

    def project(self, masked) -> Tensor:
        return self.head(masked)

    def classify(self, masked) -> Tensor:
        return self.classifier(masked)

    def logits(self, x) -> Tensor:
        return self.classify(self.masked_feature(self.encode(x)))

    def predict(self, x, batch_size: int = 512) -> np.ndarray:
        x = np.asarray(x)
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(np.argmax(self.logits(x[i:i + batch_size]).data, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def features(self, x, batch_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
        """(phi(x), m * phi(x)) as float64 arrays."""
        x = np.asarray(x)
        raw = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                raw.append(self.encode(x[i:i + batch_size]).data)
        raw = np.concatenate(raw) if raw else np.zeros((0, self.encoder.feature_dim))
        return raw, raw * self.mask.value.data


# -- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"EQCK"
CKPT_VERSION = 1


def save_checkpoint(params: dict[str, Tensor], path) -> None:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, Tensor]:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 12
    params = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape))
            if off + 8 * size > len(buf):
                raise FormatError(f"truncated block {name!r}")
            data = np.frombuffer(buf, "<f8", size, off).reshape(shape)
            off += 8 * size
            params[name] = Tensor(data, requires_grad=True)
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    if off != len(buf):
        raise FormatError("trailing bytes after checkpoint blocks")
    return params
