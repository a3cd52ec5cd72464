"""Transfer chains, accuracy metrics, Fréchet distance, slerp, and experiment sweeps."""

from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .bridge import BridgeConfig, ablation_variants, train_bridge
from .datasets import LabeledVectorDataset
from .errors import DegenerateCovariance, EmptyDataset, MissingMapping, ShapeMismatch, ZeroVector


def _rng(seed_or_rng):
    if seed_or_rng is None or isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def _encode(base, x, rng) -> np.ndarray:
    # decoder-only bases have no encoder: their inputs already are latents
    if not hasattr(base, "encode"):
        return np.asarray(x, dtype=np.float64)
    return base.encode(x, rng)


def transfer_latent(bridge, z, source: int = 1, target: int = 2, rng=None) -> np.ndarray:
    """Base latent of ``source`` -> shared latent -> base latent of ``target``."""
    zp = bridge.encode(z, source, _rng(rng))[0]
    return bridge.decode(zp, target)


def transfer(base1, bridge, base2, x1, rng=None, source: int = 1, target: int = 2) -> np.ndarray:
    """Full chain from source data space to target data space.

    ``rng`` (a seed or Generator) makes both encoders sample their
    posteriors; with ``None`` the posterior means are used throughout.
    """
    rng = _rng(rng)
    z1 = _encode(base1, x1, rng)
    return base2.decode(transfer_latent(bridge, z1, source, target, rng))


def reconstruction_accuracy(base, bridge, dataset: LabeledVectorDataset, classifier, rng=None) -> float:
    """Fraction of samples whose predicted class survives a same-domain round trip."""
    if len(dataset) == 0:
        raise EmptyDataset("reconstruction accuracy of an empty dataset")
    d = dataset.domain
    x_hat = transfer(base, bridge, base, dataset.vectors, rng, source=d, target=d)
    before = classifier.predict(dataset.vectors)
    return float(np.mean(classifier.predict(x_hat) == before))


def transfer_accuracy(base1, bridge, base2, dataset1: LabeledVectorDataset, classifier2, mapping=None,
                      rng=None, target: Optional[int] = None) -> float:
    """Fraction of transferred samples classified as the mapped source class."""
    if len(dataset1) == 0:
        raise EmptyDataset("transfer accuracy of an empty dataset")
    source = dataset1.domain
    target = (3 - source) if target is None else target
    labels = dataset1.labels
    if mapping is None:
        expected = labels
    else:
        try:
            expected = np.array([mapping[int(l)] for l in labels])
        except KeyError as exc:
            raise MissingMapping(f"no class mapping for source class {exc.args[0]}") from None
    x2 = transfer(base1, bridge, base2, dataset1.vectors, rng, source=source, target=target)
    return float(np.mean(classifier2.predict(x2) == expected))


# ---------------------------------------------------------------------------
# Fréchet distance


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(features_a, features_b) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets (rows are samples).

    ``tr sqrt(Sa Sb)`` is computed as the trace of the square root of the
    symmetric ``Sa^1/2 Sb Sa^1/2`` with negative eigenvalues clamped to 0.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise EmptyDataset("need at least two samples per set")
    k = a.shape[1]
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    if k > len(a) or k > len(b):
        warnings.warn(f"{k} feature dims exceed sample count; adding 1e-6*I", DegenerateCovariance)
        cov_a = cov_a + 1e-6 * np.eye(k)
        cov_b = cov_b + 1e-6 * np.eye(k)
    diff = a.mean(axis=0) - b.mean(axis=0)
    root_a = _sqrt_psd(cov_a)
    w = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    tr_cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)


def fid_in_classifier_space(classifier, x_a, x_b) -> float:
    return frechet_distance(classifier.features(x_a), classifier.features(x_b))


# ---------------------------------------------------------------------------
# interpolation


def slerp(p0, p1, t: float) -> np.ndarray:
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    n0, n1 = np.linalg.norm(p0), np.linalg.norm(p1)
    if n0 == 0 or n1 == 0:
        raise ZeroVector("slerp endpoints must be nonzero")
    if t == 0.0:
        return p0.copy()
    if t == 1.0:
        return p1.copy()
    cos = np.clip(p0 @ p1 / (n0 * n1), -1.0, 1.0)
    theta = math.acos(cos)
    sin = math.sin(theta)
    if sin < 1e-6:
        return (1.0 - t) * p0 + t * p1
    return (math.sin((1.0 - t) * theta) * p0 + math.sin(t * theta) * p1) / sin


def slerp_path(points: np.ndarray, steps: int) -> np.ndarray:
    """``steps`` evenly spaced positions along the piecewise slerp through ``points``."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        raise ValueError("need at least two fixed points")
    if steps < 2:
        raise ValueError("need at least two steps")
    segs = len(points) - 1
    out = []
    for s in np.linspace(0.0, segs, steps):
        j = min(int(s), segs - 1)
        out.append(slerp(points[j], points[j + 1], float(min(s - j, 1.0))))
    return np.array(out)


@dataclass
class InterpolationSweep:
    """Three rows of ``steps`` latents each, plus their decodings.

    ``source``: slerp in the source base latent space.
    ``target``: fixed points transferred first, then slerp in the target space.
    ``transfer``: every source interpolant transferred.
    """

    source: np.ndarray
    target: np.ndarray
    transfer: np.ndarray
    source_data: np.ndarray
    target_data: np.ndarray
    transfer_data: np.ndarray

    def rows(self):
        return [self.source, self.target, self.transfer]


def interpolation_sweep(base1, bridge, base2, fixed_points, steps: int, source: int = 1,
                        target: int = 2) -> InterpolationSweep:
    """Fixed points are source base latents; every transfer uses encoder means."""
    fixed = np.asarray(fixed_points, dtype=np.float64)
    row1 = slerp_path(fixed, steps)
    row2 = slerp_path(transfer_latent(bridge, fixed, source, target), steps)
    row3 = transfer_latent(bridge, row1, source, target)
    return InterpolationSweep(row1, row2, row3, base1.decode(row1), base2.decode(row2), base2.decode(row3))


def spike_ratio(points) -> float:
    """Largest consecutive step length over the median step length."""
    steps = np.linalg.norm(np.diff(np.asarray(points), axis=0), axis=1)
    med = float(np.median(steps))
    return float(steps.max() / med) if med > 0 else math.inf


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class TransferSetup:
    """Everything needed to score a trained bridge by transfer accuracy."""

    base1: object
    base2: object
    dataset1: LabeledVectorDataset
    classifier2: object
    mapping: Optional[dict] = None


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LTBR_THREADS", "1")))
    except ValueError:
        return 1


def _run_all(fn, items):
    n = worker_count()
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _count_label(count) -> str:
    return "all" if count is None else str(count)


def data_efficiency_sweep(bank1, bank2, config: BridgeConfig, label_counts: Sequence,
                          setup: TransferSetup) -> list:
    """One training per labels-per-class value (``None`` = fully labelled).

    Rows are ``(labels_per_class, transfer_accuracy, mean_cls_loss)``.
    """
    counts = list(label_counts)
    numeric = [math.inf if c is None else c for c in counts]
    if numeric != sorted(numeric):
        raise ValueError("label_counts must be ascending")

    def run(count):
        model, trace = train_bridge(bank1, bank2, replace(config, labels_per_class=count))
        acc = transfer_accuracy(setup.base1, model, setup.base2, setup.dataset1, setup.classifier2, setup.mapping)
        cls = float(np.mean([r.cls1 + r.cls2 for r in trace])) if trace else 0.0
        return (_count_label(count), acc, cls)

    return _run_all(run, counts)


def ablation_sweep(bank1, bank2, config: BridgeConfig, setup: TransferSetup) -> list:
    """Rows of ``(variant, transfer_accuracy)`` in ablation order."""
    variants = ablation_variants(config)

    def run(item):
        name, cfg = item
        model, _ = train_bridge(bank1, bank2, cfg)
        return (name, transfer_accuracy(setup.base1, model, setup.base2, setup.dataset1, setup.classifier2,
                                         setup.mapping))

    return _run_all(run, variants)


# ---------------------------------------------------------------------------
# output formats


def write_table(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_scatter(path, points_by_domain) -> None:
    """``points_by_domain`` maps domain -> (points[N, 2], labels[N]); writes ``domain,class,x,y``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "class", "x", "y"])
        for dom, (pts, labels) in points_by_domain.items():
            for p, lab in zip(np.asarray(pts), labels):
                w.writerow([dom, int(lab), repr(float(p[0])), repr(float(p[1]))])


def write_pgm(path, images, cols: Optional[int] = None, side: int = 28) -> None:
    """Tile flat ``side*side`` images (values in [0, 1]) into one binary P5 image."""
    images = np.asarray(images, dtype=np.float64).reshape(-1, side, side)
    n = len(images)
    cols = cols or n
    rows = math.ceil(n / cols)
    canvas = np.zeros((rows * side, cols * side))
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        canvas[r * side : (r + 1) * side, c * side : (c + 1) * side] = img
    pix = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    # exactly one whitespace byte separates the header from the raster
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w) / maxval
