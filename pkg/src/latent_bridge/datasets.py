"""Labeled vector datasets: synthetic two-domain arcs, IDX images, samplers."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import BadMagic, BatchTooLarge, CountMismatch, LabelOutOfRange, TruncatedFile, UnknownKind

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

FASHION_CLASSES = (
    "T-shirt/top",
    "Trouser",
    "Pullover",
    "Dress",
    "Coat",
    "Sandal",
    "Shirt",
    "Sneaker",
    "Bag",
    "Ankle boot",
)


@dataclass
class LabeledVectorDataset:
    vectors: np.ndarray
    labels: np.ndarray
    domain: int = 1
    params: Optional[np.ndarray] = None
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {self.vectors.shape}")
        if self.labels.shape != (self.vectors.shape[0],):
            raise CountMismatch(f"{self.labels.shape[0]} labels for {self.vectors.shape[0]} vectors")
        if self.params is not None:
            self.params = np.asarray(self.params, dtype=np.float64)
            if self.params.shape != self.labels.shape:
                raise CountMismatch("params length does not match dataset size")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, idx) -> "LabeledVectorDataset":
        idx = np.asarray(idx)
        return LabeledVectorDataset(
            self.vectors[idx],
            self.labels[idx],
            self.domain,
            None if self.params is None else self.params[idx],
            self.num_classes,
        )

    def split(self, holdout_fraction: float, rng: np.random.Generator):
        """Random (train, holdout) split."""
        perm = rng.permutation(len(self))
        n_hold = int(round(holdout_fraction * len(self)))
        return self.subset(np.sort(perm[n_hold:])), self.subset(np.sort(perm[:n_hold]))


# ---------------------------------------------------------------------------
# synthetic domains


@dataclass
class EllipseArc:
    center: tuple
    axes: tuple
    rotation: float = 0.0  # radians
    arc: tuple = (0.0, math.pi)  # polar-angle range swept as u goes 0 -> 1

    def points(self, u: np.ndarray) -> np.ndarray:
        theta = self.arc[0] + u * (self.arc[1] - self.arc[0])
        local = np.stack([self.axes[0] * np.cos(theta), self.axes[1] * np.sin(theta)], axis=1)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.center, dtype=np.float64)


def _rotate_arc(arc: EllipseArc, angle: float, offset) -> EllipseArc:
    c, s = math.cos(angle), math.sin(angle)
    cx, cy = arc.center
    center = (c * cx - s * cy + offset[0], s * cx + c * cy + offset[1])
    return EllipseArc(center, arc.axes, arc.rotation + angle, arc.arc)


def default_arcs(num_classes: int, rotation_deg: float = 90.0, offset=(3.0, 0.0)) -> dict:
    """Per-domain, per-class arcs for the default layout.

    Domain 1 stacks half-ellipses vertically, each class a different size
    so the two class shapes cannot be swapped by a distribution match.
    Domain 2 is the same picture rotated and shifted.
    """
    dom1 = []
    for k in range(num_classes):
        y = 1.2 * (k - (num_classes - 1) / 2.0)
        dom1.append(EllipseArc((0.0, y), (1.4 - 0.5 * k / max(num_classes - 1, 1), 0.45)))
    angle = math.radians(rotation_deg)
    dom2 = [_rotate_arc(a, angle, offset) for a in dom1]
    return {1: dom1, 2: dom2}


@dataclass
class SyntheticConfig:
    num_classes: int = 2
    samples_per_class: int = 500
    noise: float = 0.05
    seed: int = 0
    rotation_deg: float = 90.0
    offset: tuple = (3.0, 0.0)
    arcs: Optional[dict] = field(default=None)

    def __post_init__(self):
        if self.num_classes <= 0 or self.samples_per_class <= 0:
            raise ValueError("num_classes and samples_per_class must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.arcs is None:
            self.arcs = default_arcs(self.num_classes, self.rotation_deg, self.offset)
        for dom in (1, 2):
            if len(self.arcs[dom]) != self.num_classes:
                raise ValueError(f"domain {dom} needs one arc per class")
            for arc in self.arcs[dom]:
                if min(arc.axes) <= 0:
                    raise ValueError("ellipse axes must be positive")


def gen_synthetic_domains(config: SyntheticConfig = None):
    """Sample both domains; returns ``(dataset1, dataset2)``."""
    config = config or SyntheticConfig()
    rng = np.random.default_rng(config.seed)
    out = []
    for dom in (1, 2):
        vecs, labels, params = [], [], []
        for k, arc in enumerate(config.arcs[dom]):
            u = rng.uniform(0.0, 1.0, size=config.samples_per_class)
            pts = arc.points(u)
            if config.noise > 0:
                pts = pts + config.noise * rng.standard_normal(pts.shape)
            vecs.append(pts)
            labels.append(np.full(config.samples_per_class, k))
            params.append(u)
        out.append(
            LabeledVectorDataset(
                np.concatenate(vecs),
                np.concatenate(labels),
                dom,
                np.concatenate(params),
                config.num_classes,
            )
        )
    return out[0], out[1]


def class_margin(ds1: LabeledVectorDataset, ds2: LabeledVectorDataset) -> float:
    """Smallest distance between same-class points drawn from the two domains."""
    best = math.inf
    for k in range(ds1.num_classes):
        a = ds1.vectors[ds1.labels == k]
        b = ds2.vectors[ds2.labels == k]
        if len(a) and len(b):
            d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)).min()
            best = min(best, float(d))
    return best


def write_csv(path, datasets) -> None:
    """Write datasets in the ``domain,class,param,x0,x1,...`` schema."""
    datasets = list(datasets)
    dim = datasets[0].dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "class", "param"] + [f"x{i}" for i in range(dim)])
        for ds in datasets:
            params = ds.params if ds.params is not None else np.full(len(ds), np.nan)
            for vec, lab, p in zip(ds.vectors, ds.labels, params):
                w.writerow([ds.domain, int(lab), repr(float(p))] + [repr(float(v)) for v in vec])


def read_csv(path, domain: Optional[int] = None, num_classes: Optional[int] = None) -> LabeledVectorDataset:
    """Read the CSV schema back, keeping only rows of ``domain`` when given."""
    vecs, labels, params, doms = [], [], [], []
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        xcols = [c for c in r.fieldnames if c.startswith("x")]
        for row in r:
            d = int(row["domain"])
            if domain is not None and d != domain:
                continue
            doms.append(d)
            labels.append(int(row["class"]))
            params.append(float(row.get("param", "nan") or "nan"))
            vecs.append([float(row[c]) for c in xcols])
    if not vecs:
        raise ValueError(f"no rows for domain {domain} in {path}")
    params = np.array(params)
    return LabeledVectorDataset(
        np.array(vecs),
        np.array(labels),
        doms[0] if domain is None else domain,
        None if np.all(np.isnan(params)) else params,
        num_classes,
    )


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: missing header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedFile(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx_raw(images_path, labels_path, limit: Optional[int] = None):
    """Unscaled (uint8 images, labels) arrays."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return images, labels


def load_idx(images_path, labels_path, limit: Optional[int] = None, domain: int = 1) -> LabeledVectorDataset:
    images, labels = load_idx_raw(images_path, labels_path, limit)
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledVectorDataset(flat, labels.astype(np.int64), domain, None, 10)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(">3I", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_LABELS_MAGIC))
        fh.write(struct.pack(">I", labels.shape[0]))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------------------
# class correspondence and sampling


def class_mapping(kind: str) -> dict:
    if kind == "identity":
        return {i: i for i in range(10)}
    if kind == "digit_to_fashion":
        # digit i goes to the i-th Fashion-MNIST class in label order
        return {digit: FASHION_CLASSES.index(name) for digit, name in enumerate(FASHION_CLASSES)}
    raise UnknownKind(f"unknown class mapping {kind!r}")


def minibatch_sampler(dataset, batch_size: int, seed) -> Iterator[np.ndarray]:
    """Endless stream of index batches drawn uniformly with replacement."""
    n = dataset if isinstance(dataset, int) else len(dataset)
    if batch_size > n:
        raise BatchTooLarge(f"batch size {batch_size} exceeds dataset size {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    while True:
        yield rng.integers(0, n, size=batch_size)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One shuffled pass over ``range(n)``; the last batch may be short."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]
