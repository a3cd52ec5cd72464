"""Differentiable losses for the bridging VAE: ELBO pieces, sliced Wasserstein, classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import (
    LabelOutOfRange,
    LengthMismatch,
    NonFiniteLoss,
    NonPositiveSigma,
    ShapeMismatch,
)
from .nn import Linear


@dataclass
class LossWeights:
    beta_kl: float = 0.05
    beta_swd: float = 1.0
    beta_cls: float = 0.05
    sigma_likelihood: float = 1.0

    def __post_init__(self):
        for name in ("beta_kl", "beta_swd", "beta_cls"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.sigma_likelihood <= 0:
            raise ValueError("sigma_likelihood must be positive")


@dataclass
class ProjectionSet:
    """Random unit directions, one per row of ``directions``."""

    directions: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        norms = np.linalg.norm(self.directions, axis=1)
        if self.directions.ndim != 2 or np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("projection rows must have unit L2 norm")

    @classmethod
    def sample(cls, num: int, dim: int, rng: np.random.Generator, seed=None) -> "ProjectionSet":
        g = rng.standard_normal((num, dim))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        # a zero draw has probability zero; redraw rather than divide by it
        while np.any(norms == 0):
            g = rng.standard_normal((num, dim))
            norms = np.linalg.norm(g, axis=1, keepdims=True)
        return cls(g / norms, seed)

    @classmethod
    def from_seed(cls, num: int, dim: int, seed: int) -> "ProjectionSet":
        return cls.sample(num, dim, np.random.default_rng(seed), seed)

    def __len__(self) -> int:
        return self.directions.shape[0]


def gaussian_recon_loss(target, recon: Tensor, sigma: float = 1.0) -> Tensor:
    """Batch mean of ``||target - recon||^2 / (2 sigma^2)``."""
    target = as_tensor(target)
    if target.shape != recon.shape:
        raise ShapeMismatch(f"target {target.shape} vs reconstruction {recon.shape}")
    if sigma <= 0:
        raise NonPositiveSigma("likelihood sigma must be positive")
    batch = recon.shape[0] if recon.ndim > 1 else 1
    sq = ad.sum(ad.square(ad.sub(recon, target)))
    return ad.scale(sq, 1.0 / (2.0 * sigma * sigma * batch))


def kl_diag_gaussian(mu: Tensor, sigma: Tensor) -> Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over dims and averaged over the batch."""
    if mu.shape != sigma.shape:
        raise ShapeMismatch(f"mu {mu.shape} vs sigma {sigma.shape}")
    if np.any(sigma.data <= 0):
        raise NonPositiveSigma("posterior sigma must be strictly positive")
    batch = mu.shape[0] if mu.ndim > 1 else 1
    inner = ad.sub(ad.add(ad.square(mu), ad.square(sigma)), ad.scale(ad.log(sigma), 2.0))
    return ad.scale(ad.shift(ad.sum(inner), -float(mu.data.size)), 0.5 / batch)


def wasserstein_1d_sq(a: Tensor, b: Tensor) -> Tensor:
    """Squared 2-Wasserstein distance between two equal-size 1-D samples."""
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeMismatch("wasserstein_1d_sq expects 1-D inputs")
    if a.shape != b.shape:
        raise LengthMismatch(f"sample sizes differ: {a.shape[0]} vs {b.shape[0]}")
    sa, _ = ad.sort_ascending_with_permutation(a)
    sb, _ = ad.sort_ascending_with_permutation(b)
    return ad.mean(ad.square(ad.sub(sa, sb)))


def swd(batch_a: Tensor, batch_b: Tensor, projections: ProjectionSet) -> Tensor:
    """Sliced Wasserstein distance: mean 1-D W2^2 over the projection directions."""
    if batch_a.ndim != 2 or batch_a.shape != batch_b.shape:
        raise ShapeMismatch(f"swd needs equal (n, d) batches, got {batch_a.shape} and {batch_b.shape}")
    omega = projections.directions
    if omega.shape[1] != batch_a.shape[1]:
        raise ShapeMismatch(f"projection dim {omega.shape[1]} != batch dim {batch_a.shape[1]}")
    basis = Tensor._wrap(np.ascontiguousarray(omega.T))
    pa, _ = ad.sort_ascending_with_permutation(ad.matmul(batch_a, basis))
    pb, _ = ad.sort_ascending_with_permutation(ad.matmul(batch_b, basis))
    # mean over all (n, |Omega|) entries == mean over directions of per-direction W2^2
    return ad.mean(ad.square(ad.sub(pa, pb)))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def per_sample_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Softmax cross-entropy of each row of ``logits`` against integer ``labels``."""
    target = Tensor._wrap(one_hot(labels, logits.shape[1]))
    picked = ad.sum(ad.mul(logits, target), axis=1)
    return ad.sub(ad.logsumexp(logits, axis=1), picked)


def cross_entropy_linear(z_prime: Tensor, classifier: Linear, labels, mask=None) -> Tensor:
    """Mean cross-entropy of a linear classifier over the samples selected by ``mask``.

    With ``mask`` all false the result is an exact zero and contributes no
    gradient to the classifier.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != z_prime.shape[0]:
        raise ShapeMismatch(f"{labels.shape[0]} labels for {z_prime.shape[0]} samples")
    ce = per_sample_cross_entropy(classifier(z_prime), labels)
    if mask is None:
        return ad.mean(ce)
    mask = np.asarray(mask, dtype=np.float64)
    count = float(mask.sum())
    return ad.scale(ad.sum(ad.mul(ce, Tensor._wrap(mask))), 1.0 / max(count, 1.0))


def elbo_domain(z_d, recon: Tensor, mu: Tensor, sigma: Tensor, weights: LossWeights) -> Tensor:
    rec = gaussian_recon_loss(z_d, recon, weights.sigma_likelihood)
    return ad.add(rec, ad.scale(kl_diag_gaussian(mu, sigma), weights.beta_kl))


def total_bridge_loss(
    elbo1: Tensor, elbo2: Tensor, swd_term: Tensor, cls1: Tensor, cls2: Tensor, weights: LossWeights
) -> Tensor:
    parts = (elbo1, elbo2, swd_term, cls1, cls2)
    if not all(np.all(np.isfinite(p.data)) for p in parts):
        raise NonFiniteLoss("non-finite loss component")
    total = ad.add(elbo1, elbo2)
    total = ad.add(total, ad.scale(swd_term, weights.beta_swd))
    return ad.add(total, ad.scale(ad.add(cls1, cls2), weights.beta_cls))
