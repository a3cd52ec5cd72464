"""Per-domain generative models, the data-space classifier, and latent banks."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .datasets import LabeledVectorDataset, epoch_batches
from .errors import EmptyHoldout, NonFiniteLoss, NonPositiveSigma, QuotaUnreachable
from .losses import gaussian_recon_loss, kl_diag_gaussian, per_sample_cross_entropy
from .nn import MLP, Adam, Linear

logger = logging.getLogger(__name__)

ENCODED = "encoded-from-data"
REJECTION = "prior-rejection-sampled"


def reparameterize(mu: Tensor, sigma: Tensor, rng: np.random.Generator) -> Tensor:
    """``mu + sigma * eps`` with ``eps ~ N(0, I)``; differentiable in mu and sigma."""
    if np.any(sigma.data <= 0):
        raise NonPositiveSigma("sigma must be strictly positive")
    eps = Tensor._wrap(rng.standard_normal(mu.shape))
    return ad.add(mu, ad.mul(sigma, eps))


def _load_params(params: dict, tensors: dict, prefix: str = "") -> None:
    for name, p in params.items():
        arr = tensors[prefix + name]
        if arr.shape != p.data.shape:
            raise ValueError(f"checkpoint entry {prefix + name} has shape {arr.shape}, expected {p.data.shape}")
        p.data = np.array(arr, dtype=np.float64)


# ---------------------------------------------------------------------------
# beta-VAE


@dataclass
class BaseVaeConfig:
    latent_dim: int = 100
    hidden: tuple = (1024, 1024, 1024)
    beta: float = 1.0
    x_sigma: float = 0.1
    epochs: int = 100
    batch_size: int = 512
    lr: float = 1e-3
    seed: int = 0


class BetaVae:
    """Gaussian encoder (affine mean, sigmoid scale) and an MLP decoder."""

    kind = "beta_vae"

    def __init__(self, data_dim: int, latent_dim: int, hidden=(1024, 1024, 1024), beta=1.0, x_sigma=0.1, rng=None):
        if latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        hidden = tuple(int(h) for h in hidden)
        self.data_dim = data_dim
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.beta = float(beta)
        self.x_sigma = float(x_sigma)
        self.encoder = MLP((data_dim,) + hidden, head="relu", rng=rng)
        self.mu_head = Linear(hidden[-1], latent_dim, rng)
        self.sigma_head = Linear(hidden[-1], latent_dim, rng)
        self.decoder = MLP((latent_dim,) + hidden + (data_dim,), head="affine", rng=rng)

    def named_parameters(self) -> dict:
        out = {}
        out.update(self.encoder.named_parameters("encoder/"))
        out.update(self.mu_head.named_parameters("mu_head/"))
        out.update(self.sigma_head.named_parameters("sigma_head/"))
        out.update(self.decoder.named_parameters("decoder/"))
        return out

    def posterior(self, x: Tensor):
        h = self.encoder(x)
        return self.mu_head(h), ad.sigmoid(self.sigma_head(h))

    def encode(self, x, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """One posterior sample per row, or the posterior mean when ``rng`` is None."""
        mu, sigma = self.posterior(Tensor(x))
        if rng is None:
            return mu.data
        return reparameterize(mu, sigma, rng).data

    def decode(self, z) -> np.ndarray:
        return self.decoder(Tensor(z)).data

    def loss(self, x, rng: np.random.Generator):
        """Returns ``(total, reconstruction, kl)`` tensors for a batch."""
        xt = Tensor._wrap(np.asarray(x, dtype=np.float64))
        mu, sigma = self.posterior(xt)
        z = reparameterize(mu, sigma, rng)
        rec = gaussian_recon_loss(xt, self.decoder(z), self.x_sigma)
        kl = kl_diag_gaussian(mu, sigma)
        return ad.add(rec, ad.scale(kl, self.beta)), rec, kl

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "config": json.dumps(
                {
                    "data_dim": self.data_dim,
                    "latent_dim": self.latent_dim,
                    "hidden": list(self.hidden),
                    "beta": self.beta,
                    "x_sigma": self.x_sigma,
                }
            ),
        }

    @classmethod
    def from_state(cls, tensors: dict, metadata: dict) -> "BetaVae":
        cfg = json.loads(metadata["config"])
        model = cls(cfg["data_dim"], cfg["latent_dim"], cfg["hidden"], cfg["beta"], cfg["x_sigma"])
        _load_params(model.named_parameters(), tensors)
        return model


def _check_finite(value: Tensor, what: str, snapshot=None, trace=None) -> None:
    if not np.all(np.isfinite(value.data)):
        raise NonFiniteLoss(f"{what} became non-finite", last_good=snapshot, trace=trace)


def train_base_vae(dataset: LabeledVectorDataset, config: BaseVaeConfig, rng=None):
    """Epoch-shuffled Adam training of a beta-VAE; returns ``(model, per-epoch mean loss)``."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    model = BetaVae(dataset.dim, config.latent_dim, config.hidden, config.beta, config.x_sigma, rng)
    params = list(model.named_parameters().values())
    opt = Adam(params, lr=config.lr)
    batch_size = min(config.batch_size, len(dataset))
    trace = []
    for epoch in range(config.epochs):
        losses = []
        for idx in epoch_batches(len(dataset), batch_size, rng):
            with Tape() as tape:
                total, _, _ = model.loss(dataset.vectors[idx], rng)
            _check_finite(total, f"base VAE loss at epoch {epoch}", trace=list(trace))
            opt.step(tape.backward(total))
            losses.append(total.item())
        trace.append(float(np.mean(losses)))
        logger.debug("base vae epoch %d loss %.6f", epoch, trace[-1])
    return model, trace


class DecoderOnly:
    """Exposes just the prior and decoder of a model, the way a GAN generator is accessed."""

    kind = "decoder_only"

    def __init__(self, model):
        self.model = model
        self.latent_dim = model.latent_dim
        self.data_dim = model.data_dim

    def decode(self, z) -> np.ndarray:
        return self.model.decode(z)

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.latent_dim))


class IdentityBase:
    """A base model whose latent space is the data space itself.

    Used when the data already are embeddings, as in the synthetic setting.
    """

    kind = "identity"

    def __init__(self, dim: int):
        self.data_dim = dim
        self.latent_dim = dim

    def encode(self, x, rng=None) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)

    def decode(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64)

    def named_parameters(self) -> dict:
        return {}

    def metadata(self) -> dict:
        return {"kind": self.kind, "config": json.dumps({"dim": self.data_dim})}

    @classmethod
    def from_state(cls, tensors: dict, metadata: dict) -> "IdentityBase":
        return cls(json.loads(metadata["config"])["dim"])


# ---------------------------------------------------------------------------
# data classifier


@dataclass
class ClassifierConfig:
    hidden: tuple = (512, 512, 512, 512)
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    holdout_fraction: float = 0.1
    seed: int = 0


class DataClassifier:
    """Relu MLP trunk followed by an affine head over the classes."""

    kind = "data_classifier"

    def __init__(self, data_dim: int, num_classes: int, hidden=(512, 512, 512, 512), rng=None):
        hidden = tuple(int(h) for h in hidden)
        self.data_dim = data_dim
        self.num_classes = num_classes
        self.hidden = hidden
        self.trunk = MLP((data_dim,) + hidden, head="relu", rng=rng)
        self.head = Linear(hidden[-1], num_classes, rng)

    def named_parameters(self) -> dict:
        out = self.trunk.named_parameters("trunk/")
        out.update(self.head.named_parameters("head/"))
        return out

    def logits(self, x: Tensor) -> Tensor:
        return self.head(self.trunk(x))

    def features(self, x) -> np.ndarray:
        """Penultimate-layer activations."""
        return self.trunk(Tensor(x)).data

    def predict_proba(self, x) -> np.ndarray:
        z = self.logits(Tensor(x)).data
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, x) -> np.ndarray:
        return self.logits(Tensor(x)).data.argmax(axis=1)

    def accuracy(self, dataset: LabeledVectorDataset) -> float:
        return float(np.mean(self.predict(dataset.vectors) == dataset.labels))

    def metadata(self) -> dict:
        cfg = {"data_dim": self.data_dim, "num_classes": self.num_classes, "hidden": list(self.hidden)}
        return {"kind": self.kind, "config": json.dumps(cfg)}

    @classmethod
    def from_state(cls, tensors: dict, metadata: dict) -> "DataClassifier":
        cfg = json.loads(metadata["config"])
        model = cls(cfg["data_dim"], cfg["num_classes"], cfg["hidden"])
        _load_params(model.named_parameters(), tensors)
        return model


def train_data_classifier(dataset: LabeledVectorDataset, config: ClassifierConfig, rng=None):
    """Train with Adam and keep the epoch with the best holdout accuracy.

    Returns ``(classifier, history)`` where ``history`` lists
    ``(epoch, holdout_accuracy)`` and the classifier holds the last epoch
    achieving the maximum (later epochs are usually more confident).
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    train, holdout = dataset.split(config.holdout_fraction, rng)
    if len(holdout) == 0:
        raise EmptyHoldout("holdout split is empty; raise holdout_fraction or add data")
    model = DataClassifier(dataset.dim, dataset.num_classes, config.hidden, rng)
    params = model.named_parameters()
    opt = Adam(list(params.values()), lr=config.lr)
    batch_size = min(config.batch_size, len(train))
    best_acc, best_state, history = -1.0, None, []
    for epoch in range(config.epochs):
        for idx in epoch_batches(len(train), batch_size, rng):
            with Tape() as tape:
                logits = model.logits(Tensor._wrap(train.vectors[idx]))
                loss = ad.mean(per_sample_cross_entropy(logits, train.labels[idx]))
            _check_finite(loss, f"classifier loss at epoch {epoch}")
            opt.step(tape.backward(loss))
        acc = model.accuracy(holdout)
        history.append((epoch, acc))
        if acc >= best_acc:
            best_acc = acc
            best_state = {k: v.data.copy() for k, v in params.items()}
    if best_state is not None:
        _load_params(params, best_state)
    return model, history


# ---------------------------------------------------------------------------
# latent banks


@dataclass
class LatentBank:
    latents: np.ndarray
    labels: np.ndarray
    provenance: str = ENCODED
    num_classes: Optional[int] = None
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.latents.ndim != 2 or self.labels.shape != (self.latents.shape[0],):
            raise ValueError("bank needs (N, d) latents and N labels")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("bank labels out of range")

    def __len__(self) -> int:
        return self.latents.shape[0]

    @property
    def dim(self) -> int:
        return self.latents.shape[1]

    def named_tensors(self) -> dict:
        return {"bank/latents": self.latents, "bank/labels": self.labels.astype(np.float64)}

    def metadata(self) -> dict:
        meta = {"kind": "latent_bank", "provenance": self.provenance, "num_classes": str(self.num_classes)}
        if self.stats:
            meta["stats"] = json.dumps(self.stats, sort_keys=True)
        return meta

    @classmethod
    def from_state(cls, tensors: dict, metadata: dict) -> "LatentBank":
        stats = json.loads(metadata["stats"]) if "stats" in metadata else {}
        return cls(
            tensors["bank/latents"],
            tensors["bank/labels"].astype(np.int64),
            metadata.get("provenance", ENCODED),
            int(metadata["num_classes"]),
            stats,
        )


def build_latent_bank_encoded(vae, dataset: LabeledVectorDataset, rng: np.random.Generator) -> LatentBank:
    """One posterior sample per datum; labels kept in dataset order."""
    z = vae.encode(dataset.vectors, rng)
    return LatentBank(z, dataset.labels.copy(), ENCODED, dataset.num_classes)


def build_latent_bank_rejection(
    decoder,
    classifier: DataClassifier,
    threshold: float,
    per_label_quota: int,
    rng: np.random.Generator,
    batch_size: int = 1024,
    max_attempts: Optional[int] = None,
) -> LatentBank:
    """Keep prior samples whose decoded data the classifier labels confidently.

    A draw ``z ~ N(0, I)`` is kept, labelled with the argmax class, when the
    max softmax probability is at least ``threshold`` and that class still
    needs samples.  Gives up after ``max_attempts`` draws (default
    ``1000 * per_label_quota``).
    """
    num_classes = classifier.num_classes
    cap = 1000 * per_label_quota if max_attempts is None else max_attempts
    kept = {k: [] for k in range(num_classes)}
    attempts = 0

    def rates():
        return {k: (len(kept[k]) / attempts if attempts else 0.0) for k in range(num_classes)}

    if threshold > 1.0:
        raise QuotaUnreachable(
            f"threshold {threshold} exceeds 1; no softmax output can reach it",
            rates(),
            {k: 0 for k in kept},
        )
    while attempts < cap and any(len(v) < per_label_quota for v in kept.values()):
        n = min(batch_size, cap - attempts)
        z = rng.standard_normal((n, decoder.latent_dim))
        probs = classifier.predict_proba(decoder.decode(z))
        conf = probs.max(axis=1)
        label = probs.argmax(axis=1)
        for i in range(n):
            k = int(label[i])
            if conf[i] >= threshold and len(kept[k]) < per_label_quota:
                kept[k].append(z[i])
        attempts += n
    counts = {k: len(v) for k, v in kept.items()}
    if any(c < per_label_quota for c in counts.values()):
        raise QuotaUnreachable(
            f"quota {per_label_quota} not met after {attempts} draws: counts {counts}",
            rates(),
            counts,
        )
    latents = np.concatenate([np.array(kept[k]) for k in range(num_classes)])
    labels = np.concatenate([np.full(per_label_quota, k) for k in range(num_classes)])
    stats = {"attempts": attempts, "acceptance_rate": float(len(labels) / attempts)}
    stats.update({f"acceptance_rate_{k}": r for k, r in rates().items()})
    return LatentBank(latents, labels, REJECTION, num_classes, stats)
