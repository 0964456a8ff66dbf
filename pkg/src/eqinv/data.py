"""Synthetic colour-biased glyph datasets.

Each class is a fixed stroke template rendered with per-sample geometric
jitter; each sample is then tinted with one palette colour.  The colour
(environment) is drawn from an RNG stream separate from the glyph stream,
so changing the bias ratio changes only the tint layer.
"""

from __future__ import annotations

import contextlib
import contextvars
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import EnvLabelAccessError, FormatError, SpecError

SPLITS = ("train", "val", "test_aligned", "test_conflicting")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}

DEFAULT_PALETTE = (
    (1.00, 0.00, 0.00),
    (0.00, 1.00, 0.00),
    (0.00, 0.00, 1.00),
    (1.00, 0.75, 0.00),
    (0.80, 0.00, 1.00),
    (0.00, 0.80, 1.00),
    (1.00, 0.45, 0.00),
    (0.00, 1.00, 0.50),
    (0.45, 0.10, 1.00),
    (1.00, 0.40, 0.70),
)

# Polylines in unit coordinates (x right, y down), loosely digit-shaped.
_TEMPLATES = (
    [[(0.30, 0.20), (0.70, 0.20), (0.70, 0.80), (0.30, 0.80), (0.30, 0.20)]],
    [[(0.50, 0.15), (0.50, 0.85)], [(0.36, 0.28), (0.50, 0.15)]],
    [[(0.30, 0.22), (0.70, 0.22), (0.70, 0.48), (0.30, 0.80), (0.72, 0.80)]],
    [[(0.30, 0.20), (0.70, 0.20), (0.48, 0.48), (0.70, 0.66), (0.52, 0.82), (0.30, 0.80)]],
    [[(0.62, 0.85), (0.62, 0.15), (0.28, 0.60), (0.76, 0.60)]],
    [[(0.70, 0.20), (0.30, 0.20), (0.30, 0.50), (0.70, 0.50), (0.70, 0.80), (0.30, 0.80)]],
    [[(0.66, 0.15), (0.30, 0.50), (0.30, 0.80), (0.70, 0.80), (0.70, 0.55), (0.30, 0.55)]],
    [[(0.28, 0.20), (0.72, 0.20), (0.44, 0.85)]],
    [[(0.30, 0.20), (0.70, 0.20), (0.30, 0.80), (0.70, 0.80), (0.30, 0.20)]],
    [[(0.70, 0.50), (0.30, 0.50), (0.30, 0.20), (0.70, 0.20), (0.70, 0.85)]],
)

# Per-sample glyph jitter, in unit coordinates unless noted.
_POINT_JITTER = 0.035
_SHIFT = 0.09
_SCALE = (0.85, 1.15)
_ROTATION_DEG = 15.0
_THICKNESS = (0.035, 0.065)
_INTENSITY = (0.7, 1.0)


@dataclass(frozen=True)
class BiasedDatasetSpec:
    num_classes: int = 10
    samples_per_class: int = 200
    image_side: int = 32
    bias_ratio: float = 0.95
    palette: tuple[tuple[float, float, float], ...] | None = None  # None: first C default colours
    seed: int = 0
    test_conflict_fraction: float = 0.5
    val_per_class: int = 50
    test_per_class: int = 100

    def __post_init__(self):
        c = self.num_classes
        if c < 2:
            raise SpecError("need at least two classes")
        palette = self.palette
        if palette is None:
            if c > len(DEFAULT_PALETTE):
                raise SpecError(f"{c} classes need an explicit palette (default has {len(DEFAULT_PALETTE)})")
            palette = DEFAULT_PALETTE[:c]
        object.__setattr__(self, "palette", tuple(tuple(float(v) for v in col) for col in palette))
        if len(self.palette) != c:
            raise SpecError(f"palette has {len(self.palette)} colours for {c} classes")
        if not (1.0 / c - 1e-12 <= self.bias_ratio <= 1.0):
            raise SpecError(f"bias_ratio must lie in [1/C, 1], got {self.bias_ratio}")
        if min(self.samples_per_class, self.image_side) < 1 or min(self.val_per_class, self.test_per_class) < 0:
            raise SpecError("sample counts and image side must be positive")
        if not 0.0 <= self.test_conflict_fraction <= 1.0:
            raise SpecError("test_conflict_fraction must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise SpecError("seed must fit in uint64")
        pal = np.asarray(self.palette)
        if pal.shape != (c, 3) or pal.min() < 0 or pal.max() > 1:
            raise SpecError("palette entries must be RGB triples in [0, 1]")
        dist = np.sqrt(((pal[:, None, :] - pal[None, :, :]) ** 2).sum(-1))
        dist[np.diag_indices(c)] = np.inf
        if dist.min() < 0.3 - 1e-12:
            raise SpecError(f"palette colours closer than 0.3 (min distance {dist.min():.3f})")

    @classmethod
    def colored_mnist_preset(cls, **overrides) -> BiasedDatasetSpec:
        """Colour bias matching the 0.5% non-bias ratio of Colored MNIST."""
        return cls(**{"bias_ratio": 0.995, **overrides})


_guard: contextvars.ContextVar[str | None] = contextvars.ContextVar("eqinv_env_guard", default=None)


@contextlib.contextmanager
def forbid_env_access(region: str = "guarded region"):
    """Make any read of ``BiasedDataset.env_labels`` raise inside the block."""
    token = _guard.set(region)
    try:
        yield
    finally:
        _guard.reset(token)


@dataclass(eq=False)
class BiasedDataset:
    spec: BiasedDatasetSpec
    images: np.ndarray  # float32 [N, 3, H, W]
    labels: np.ndarray  # int64 [N]
    _env_labels: np.ndarray = field(repr=False)
    split_tags: np.ndarray  # uint8 [N], codes index SPLITS
    env_label_reads: int = field(default=0, repr=False)

    @property
    def env_labels(self) -> np.ndarray:
        """Ground-truth environment (colour) labels; diagnostics only."""
        region = _guard.get()
        if region is not None:
            raise EnvLabelAccessError(f"environment labels read inside {region}")
        self.env_label_reads += 1
        return self._env_labels

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split_tags == _SPLIT_CODE[split])

    def inputs(self, index) -> np.ndarray:
        """Flattened float64 images for the given sample indices."""
        x = self.images[np.asarray(index)]
        return x.reshape(len(x), -1).astype(np.float64)

    def equals(self, other: BiasedDataset) -> bool:
        return (
            self.spec == other.spec
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self._env_labels, other._env_labels)
            and np.array_equal(self.split_tags, other.split_tags)
        )


# -- glyph rendering ----------------------------------------------------------


def class_template(k: int) -> list[np.ndarray]:
    """Stroke polylines for class ``k``; classes beyond the fixed ten get seeded random strokes."""
    if k < len(_TEMPLATES):
        return [np.asarray(line, dtype=np.float64) for line in _TEMPLATES[k]]
    rng = np.random.default_rng([0x61796C67, k])
    n_lines = int(rng.integers(1, 3))
    return [rng.uniform(0.2, 0.8, size=(int(rng.integers(3, 6)), 2)) for _ in range(n_lines)]


def _segments(k: int) -> np.ndarray:
    segs = []
    for line in class_template(k):
        segs.extend(np.stack([line[:-1], line[1:]], axis=1))
    return np.asarray(segs)  # [S, 2, 2]


def _render_class(k: int, n: int, side: int, rng: np.random.Generator) -> np.ndarray:
    segs = _segments(k)
    s_count = len(segs)
    # Jitter every endpoint independently, then apply a random similarity transform.
    pts = segs[None] + rng.normal(0.0, _POINT_JITTER, size=(n, s_count, 2, 2))
    scale = rng.uniform(*_SCALE, size=(n, 1, 1, 1))
    theta = np.deg2rad(rng.uniform(-_ROTATION_DEG, _ROTATION_DEG, size=n))
    shift = rng.uniform(-_SHIFT, _SHIFT, size=(n, 1, 1, 2))
    thickness = rng.uniform(*_THICKNESS, size=(n, 1))
    intensity = rng.uniform(*_INTENSITY, size=(n, 1))
    cos, sin = np.cos(theta), np.sin(theta)
    rot = np.stack([np.stack([cos, -sin], -1), np.stack([sin, cos], -1)], -2)  # [n, 2, 2]
    centred = (pts - 0.5) * scale
    pts = np.einsum("nij,nsej->nsei", rot, centred) + 0.5 + shift

    grid = (np.arange(side) + 0.5) / side
    px = np.stack(np.meshgrid(grid, grid, indexing="xy"), -1).reshape(-1, 2)  # [P, 2] as (x, y)
    a = pts[:, None, :, 0, :]  # [n, 1, S, 2]
    b = pts[:, None, :, 1, :]
    ab = b - a
    ap = px[None, :, None, :] - a  # [n, P, S, 2]
    denom = np.maximum((ab * ab).sum(-1), 1e-12)
    t = np.clip((ap * ab).sum(-1) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    dist = np.sqrt(((px[None, :, None, :] - closest) ** 2).sum(-1)).min(-1)  # [n, P]
    soft = 1.0 / side
    ink = np.clip((thickness - dist) / soft + 0.5, 0.0, 1.0) * intensity
    return ink.reshape(n, side, side)


def _class_counts(spec: BiasedDatasetSpec) -> list[tuple[str, int]]:
    n_conf = int(round(spec.test_conflict_fraction * spec.test_per_class))
    return [
        ("train", spec.samples_per_class),
        ("val", spec.val_per_class),
        ("test_aligned", spec.test_per_class - n_conf),
        ("test_conflicting", n_conf),
    ]


def render_glyphs(spec: BiasedDatasetSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Untinted ink maps [N, H, W], class labels and split tags, in dataset order."""
    inks, labels, tags = [], [], []
    for split, n in _class_counts(spec):
        code = _SPLIT_CODE[split]
        for k in range(spec.num_classes):
            if n == 0:
                continue
            rng = np.random.default_rng([spec.seed, code, k, 0])
            inks.append(_render_class(k, n, spec.image_side, rng))
            labels.append(np.full(n, k, dtype=np.int64))
            tags.append(np.full(n, code, dtype=np.uint8))
    side = spec.image_side
    if not inks:
        return np.zeros((0, side, side)), np.zeros(0, np.int64), np.zeros(0, np.uint8)
    return np.concatenate(inks), np.concatenate(labels), np.concatenate(tags)


def _draw_colours(spec: BiasedDatasetSpec, split: str, k: int, n: int) -> np.ndarray:
    """Colour index per sample of class ``k``.

    Counts are stratified rather than i.i.d.: exactly round(rho * n) samples keep
    colour ``k`` and the rest are spread as evenly as possible over the other
    C-1 colours (remainder assigned to random colours), in random order.
    """
    c = spec.num_classes
    rng = np.random.default_rng([spec.seed, _SPLIT_CODE[split], k, 1])
    if split == "test_aligned":
        n_aligned = n
    elif split == "test_conflicting":
        n_aligned = 0
    else:
        n_aligned = int(round(spec.bias_ratio * n))
    others = np.array([j for j in range(c) if j != k], dtype=np.int64)
    n_conf = n - n_aligned
    counts = np.full(c - 1, n_conf // (c - 1))
    counts[rng.permutation(c - 1)[: n_conf % (c - 1)]] += 1
    colours = np.concatenate([np.full(n_aligned, k, dtype=np.int64), np.repeat(others, counts)])
    return colours[rng.permutation(n)]


def generate(spec: BiasedDatasetSpec) -> BiasedDataset:
    """Build the full dataset (train, val, aligned and conflicting test splits)."""
    ink, labels, tags = render_glyphs(spec)
    env = []
    for split, n in _class_counts(spec):
        for k in range(spec.num_classes):
            if n:
                env.append(_draw_colours(spec, split, k, n))
    env = np.concatenate(env) if env else np.zeros(0, np.int64)
    palette = np.asarray(spec.palette)
    images = (ink[:, None, :, :] * palette[env][:, :, None, None]).astype(np.float32)
    return BiasedDataset(spec, images, labels, env, tags)


# -- augmentation -------------------------------------------------------------

MAX_SHIFT_FRACTION = 0.10
SCALE_RANGE = 0.10
NOISE_SIGMA = 0.02


def augment_batch(images: np.ndarray, rng) -> np.ndarray:
    """Random translation, scaling and pixel noise for a batch [B, 3, H, W].

    Colour channels are never permuted or jittered.  With all random draws at
    zero the output equals the input.
    """
    images = np.asarray(images, dtype=np.float64)
    b, _, h, w = images.shape
    u = np.asarray(rng.uniform(-1.0, 1.0, size=(b, 3)), dtype=np.float64)
    noise = np.asarray(rng.standard_normal(size=images.shape), dtype=np.float64)
    tx = u[:, 0] * MAX_SHIFT_FRACTION * w
    ty = u[:, 1] * MAX_SHIFT_FRACTION * h
    scale = 1.0 + u[:, 2] * SCALE_RANGE

    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    src_y = (rows[None, :, None] - cy - ty[:, None, None]) / scale[:, None, None] + cy
    src_x = (cols[None, None, :] - cx - tx[:, None, None]) / scale[:, None, None] + cx
    src_y = np.broadcast_to(src_y, (b, h, w))
    src_x = np.broadcast_to(src_x, (b, h, w))

    y0 = np.floor(src_y)
    x0 = np.floor(src_x)
    fy = src_y - y0
    fx = src_x - x0
    y0 = y0.astype(np.intp)
    x0 = x0.astype(np.intp)
    padded = np.pad(images, ((0, 0), (0, 0), (1, 1), (1, 1)))
    bi = np.arange(b)[:, None, None]

    def sample(yy, xx):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yy = np.clip(yy, -1, h) + 1
        xx = np.clip(xx, -1, w) + 1
        vals = padded[bi, :, yy, xx]  # [B, H, W, 3]
        return np.where(valid[..., None], vals, 0.0)

    out = (
        sample(y0, x0) * ((1 - fy) * (1 - fx))[..., None]
        + sample(y0, x0 + 1) * ((1 - fy) * fx)[..., None]
        + sample(y0 + 1, x0) * (fy * (1 - fx))[..., None]
        + sample(y0 + 1, x0 + 1) * (fy * fx)[..., None]
    )
    out = np.moveaxis(out, -1, 1) + NOISE_SIGMA * noise
    return np.clip(out, 0.0, 1.0)


def augment(image: np.ndarray, rng) -> np.ndarray:
    """Augment a single [3, H, W] image."""
    return augment_batch(np.asarray(image)[None], rng)[0]


# -- file format ------------------------------------------------------------

MAGIC = b"EQIV"
VERSION = 1
_FIXED = struct.Struct("<4sIIIIIdQIIIId")


def _header_bytes(spec: BiasedDatasetSpec, n: int) -> bytes:
    head = _FIXED.pack(
        MAGIC, VERSION, spec.num_classes, n, spec.image_side, spec.image_side,
        spec.bias_ratio, spec.seed, spec.samples_per_class, spec.val_per_class,
        spec.test_per_class, 0, spec.test_conflict_fraction,
    )
    return head + np.asarray(spec.palette, dtype="<f8").tobytes()


def _read_header(buf: bytes) -> tuple[BiasedDatasetSpec, int, int]:
    if len(buf) < _FIXED.size:
        raise FormatError("file shorter than dataset header")
    (magic, version, c, n, h, w, rho, seed, spc, vpc, tpc, _reserved, frac) = _FIXED.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if h != w:
        raise FormatError("non-square images are not supported")
    end = _FIXED.size + 8 * 3 * c
    if len(buf) < end:
        raise FormatError("truncated palette")
    palette = np.frombuffer(buf, dtype="<f8", count=3 * c, offset=_FIXED.size).reshape(c, 3)
    try:
        spec = BiasedDatasetSpec(
            num_classes=c, samples_per_class=spc, image_side=h, bias_ratio=rho,
            palette=tuple(map(tuple, palette)), seed=seed, test_conflict_fraction=frac,
            val_per_class=vpc, test_per_class=tpc,
        )
    except SpecError as exc:
        raise FormatError(f"invalid header: {exc}") from exc
    return spec, n, end


def save_dataset(dataset: BiasedDataset, path) -> None:
    spec = dataset.spec
    n = len(dataset)
    with open(path, "wb") as fh:
        fh.write(_header_bytes(spec, n))
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
        fh.write(np.asarray(dataset.labels, dtype="<i4").tobytes())
        fh.write(np.asarray(dataset._env_labels, dtype="<i4").tobytes())
        fh.write(np.asarray(dataset.split_tags, dtype="u1").tobytes())


def inspect_dataset(path) -> tuple[BiasedDatasetSpec, int]:
    """Read only the header: returns (spec, sample count)."""
    with open(path, "rb") as fh:
        head = fh.read(_FIXED.size)
        if len(head) < _FIXED.size:
            raise FormatError("file shorter than dataset header")
        c = struct.unpack_from("<I", head, 8)[0]
        head += fh.read(8 * 3 * c)
    spec, n, _ = _read_header(head)
    return spec, n


def load_dataset(path) -> BiasedDataset:
    buf = Path(path).read_bytes()
    spec, n, off = _read_header(buf)
    side = spec.image_side
    n_pix = n * 3 * side * side
    expected = off + 4 * n_pix + 4 * n + 4 * n + n
    if len(buf) != expected:
        raise FormatError(f"dataset payload has {len(buf)} bytes, expected {expected}")
    images = np.frombuffer(buf, "<f4", n_pix, off).reshape(n, 3, side, side).astype(np.float32)
    off += 4 * n_pix
    labels = np.frombuffer(buf, "<i4", n, off).astype(np.int64)
    off += 4 * n
    env = np.frombuffer(buf, "<i4", n, off).astype(np.int64)
    off += 4 * n
    tags = np.frombuffer(buf, "u1", n, off).copy()
    if tags.size and tags.max() >= len(SPLITS):
        raise FormatError("unknown split tag")
    return BiasedDataset(spec, images, labels, env, tags)


def spec_fields() -> list[str]:
    return [f.name for f in fields(BiasedDatasetSpec)]
