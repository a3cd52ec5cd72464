"""Domain-conditional bridging VAE over two latent banks."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .base_models import LatentBank, _load_params, reparameterize
from .datasets import minibatch_sampler
from .errors import BadDomain, EmptyBank, NonFiniteLoss, ShapeMismatch
from .losses import (
    LossWeights,
    ProjectionSet,
    cross_entropy_linear,
    elbo_domain,
    swd,
    total_bridge_loss,
)
from .nn import MLP, Adam, GatedMixing, Linear

logger = logging.getLogger(__name__)

NUM_DOMAINS = 2
TRACE_COLUMNS = ("step", "elbo1", "elbo2", "swd", "cls1", "cls2", "total")


@dataclass
class BridgeConfig:
    shared_dim: int = 8
    hidden: tuple = (512, 512, 512, 512)
    weights: LossWeights = field(default_factory=LossWeights)
    num_projections: int = 50
    batch_size: int = 128
    total_steps: int = 50000
    labels_per_class: Optional[int] = None
    lr: float = 1e-3
    conditional: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.shared_dim <= 0 or self.num_projections <= 0 or self.batch_size <= 0:
            raise ValueError("shared_dim, num_projections and batch_size must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if not self.hidden or min(self.hidden) <= 0:
            raise ValueError("hidden widths must be positive")
        if self.labels_per_class is not None and self.labels_per_class < 0:
            raise ValueError("labels_per_class must be non-negative")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class BridgingVae:
    """Shared encoder/decoder over ``concat(latent, one_hot(domain))`` plus a linear latent classifier.

    Both networks are relu MLP trunks with gated-mixing output layers; the
    encoder's scale head is affine + sigmoid so every sigma lies in (0, 1).
    With ``conditional=False`` the domain code is all zeros.
    """

    kind = "bridging_vae"

    def __init__(self, latent_dim: int, shared_dim: int, num_classes: int, hidden=(512, 512, 512, 512),
                 conditional: bool = True, rng=None):
        hidden = tuple(int(h) for h in hidden)
        self.latent_dim = latent_dim
        self.shared_dim = shared_dim
        self.num_classes = num_classes
        self.hidden = hidden
        self.conditional = conditional
        self.encoder = MLP((latent_dim + NUM_DOMAINS,) + hidden, head="relu", rng=rng)
        self.enc_mu = GatedMixing(hidden[-1], shared_dim, rng)
        self.enc_sigma = Linear(hidden[-1], shared_dim, rng)
        self.decoder = MLP((shared_dim + NUM_DOMAINS,) + hidden, head="relu", rng=rng)
        self.dec_out = GatedMixing(hidden[-1], latent_dim, rng)
        self.latent_classifier = Linear(shared_dim, num_classes, rng)

    def named_parameters(self) -> dict:
        out = {}
        out.update(self.encoder.named_parameters("encoder/"))
        out.update(self.enc_mu.named_parameters("enc_mu/"))
        out.update(self.enc_sigma.named_parameters("enc_sigma/"))
        out.update(self.decoder.named_parameters("decoder/"))
        out.update(self.dec_out.named_parameters("dec_out/"))
        out.update(self.latent_classifier.named_parameters("classifier/"))
        return out

    def domain_code(self, domain: int, n: int) -> Tensor:
        if domain not in (1, 2):
            raise BadDomain(f"domain must be 1 or 2, got {domain!r}")
        code = np.zeros((n, NUM_DOMAINS))
        if self.conditional:
            code[:, domain - 1] = 1.0
        return Tensor._wrap(code)

    def posterior(self, z: Tensor, domain: int):
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeMismatch(f"expected latents of width {self.latent_dim}, got {z.shape}")
        h = self.encoder(ad.concat(z, self.domain_code(domain, z.shape[0]), axis=1))
        return self.enc_mu(h), ad.sigmoid(self.enc_sigma(h))

    def generate(self, z_prime: Tensor, domain: int) -> Tensor:
        if z_prime.ndim != 2 or z_prime.shape[1] != self.shared_dim:
            raise ShapeMismatch(f"expected shared latents of width {self.shared_dim}, got {z_prime.shape}")
        h = self.decoder(ad.concat(z_prime, self.domain_code(domain, z_prime.shape[0]), axis=1))
        return self.dec_out(h)

    # array-level API used by evaluation code

    def encode(self, z, domain: int, rng: Optional[np.random.Generator] = None):
        """Returns ``(z_prime, mu_prime, sigma_prime)``; ``z_prime`` is the mean when ``rng`` is None."""
        mu, sigma = self.posterior(Tensor(z), domain)
        zp = mu if rng is None else reparameterize(mu, sigma, rng)
        return zp.data, mu.data, sigma.data

    def encode_mean(self, z, domain: int) -> np.ndarray:
        return self.posterior(Tensor(z), domain)[0].data

    def decode(self, z_prime, domain: int) -> np.ndarray:
        return self.generate(Tensor(z_prime), domain).data

    def metadata(self) -> dict:
        cfg = {
            "latent_dim": self.latent_dim,
            "shared_dim": self.shared_dim,
            "num_classes": self.num_classes,
            "hidden": list(self.hidden),
            "conditional": self.conditional,
        }
        return {"kind": self.kind, "config": json.dumps(cfg)}

    @classmethod
    def from_state(cls, tensors: dict, metadata: dict) -> "BridgingVae":
        cfg = json.loads(metadata["config"])
        model = cls(cfg["latent_dim"], cfg["shared_dim"], cfg["num_classes"], cfg["hidden"], cfg["conditional"])
        _load_params(model.named_parameters(), tensors)
        return model


def bridge_encode(model: BridgingVae, z, domain: int, rng=None):
    return model.encode(z, domain, rng)


def bridge_decode(model: BridgingVae, z_prime, domain: int) -> np.ndarray:
    return model.decode(z_prime, domain)


class TraceRow(NamedTuple):
    step: int
    elbo1: float
    elbo2: float
    swd: float
    cls1: float
    cls2: float
    total: float


def label_mask(labels: np.ndarray, num_classes: int, per_class: Optional[int], rng) -> np.ndarray:
    """Class-balanced labelled subset: ``per_class`` random samples of each class (all if None)."""
    mask = np.zeros(labels.shape[0], dtype=bool)
    if per_class is None:
        mask[:] = True
        return mask
    for k in range(num_classes):
        idx = np.flatnonzero(labels == k)
        chosen = rng.permutation(idx)[:per_class]
        mask[chosen] = True
    return mask


def train_bridge(bank1: LatentBank, bank2: LatentBank, config: BridgeConfig, rng=None, on_step=None):
    """Train a bridging VAE jointly on both banks.

    Returns ``(model, trace)`` with one :class:`TraceRow` per step.  All
    randomness derives from ``config.seed`` unless ``rng`` is given, in which
    case it seeds the derived streams.  ``on_step(row)`` is called after each
    update when supplied.
    """
    for b in (bank1, bank2):
        if len(b) == 0:
            raise EmptyBank("latent bank is empty")
    if bank1.num_classes != bank2.num_classes:
        raise ValueError(f"banks disagree on class count: {bank1.num_classes} vs {bank2.num_classes}")
    if bank1.dim != bank2.dim:
        raise ShapeMismatch(f"bank latent widths differ: {bank1.dim} vs {bank2.dim}")

    root = np.random.SeedSequence(config.seed) if rng is None else np.random.SeedSequence(
        int(rng.integers(0, 2**63 - 1))
    )
    init_ss, mask_ss, s1_ss, s2_ss, noise_ss = root.spawn(5)
    model = BridgingVae(bank1.dim, config.shared_dim, bank1.num_classes, config.hidden, config.conditional,
                        np.random.default_rng(init_ss))
    mask_rng = np.random.default_rng(mask_ss)
    masks = [label_mask(b.labels, b.num_classes, config.labels_per_class, mask_rng) for b in (bank1, bank2)]
    batch = min(config.batch_size, len(bank1), len(bank2))
    samplers = [
        minibatch_sampler(len(bank1), batch, np.random.default_rng(s1_ss)),
        minibatch_sampler(len(bank2), batch, np.random.default_rng(s2_ss)),
    ]
    noise = np.random.default_rng(noise_ss)
    weights = config.weights
    params = model.named_parameters()
    opt = Adam(list(params.values()), lr=config.lr)
    trace: list = []
    last_good = {k: v.data for k, v in params.items()}

    for step in range(config.total_steps):
        idx = [next(s) for s in samplers]
        with Tape() as tape:
            elbos, zps, clss = [], [], []
            for d, (bank, i, mask) in enumerate(zip((bank1, bank2), idx, masks), start=1):
                z = Tensor._wrap(bank.latents[i])
                mu, sigma = model.posterior(z, d)
                zp = reparameterize(mu, sigma, noise)
                recon = model.generate(zp, d)
                elbos.append(elbo_domain(z, recon, mu, sigma, weights))
                zps.append(zp)
                clss.append(cross_entropy_linear(zp, model.latent_classifier, bank.labels[i], mask[i]))
            proj = ProjectionSet.sample(config.num_projections, config.shared_dim, noise)
            swd_term = swd(zps[0], zps[1], proj)
            try:
                total = total_bridge_loss(elbos[0], elbos[1], swd_term, clss[0], clss[1], weights)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"loss became non-finite at step {step}", last_good, trace) from exc
        grads = tape.backward(total)
        opt.step(grads)
        if not all(np.all(np.isfinite(p.data)) for p in opt.params):
            raise NonFiniteLoss(f"parameters became non-finite at step {step}", last_good, trace)
        last_good = {k: v.data for k, v in params.items()}
        row = TraceRow(step, elbos[0].item(), elbos[1].item(), swd_term.item(), clss[0].item(),
                       clss[1].item(), total.item())
        trace.append(row)
        if on_step is not None:
            on_step(row)
    return model, trace


def ablation_variants(config: BridgeConfig) -> list:
    """The four component ablations, each a ``(name, config)`` pair.

    ``unconditional`` drops the domain code and the alignment losses (a plain
    VAE over the pooled banks); each later variant adds one component, and
    ``full`` is ``config`` itself.
    """
    w = config.weights
    no_align = replace(w, beta_swd=0.0, beta_cls=0.0)
    return [
        ("unconditional", replace(config, conditional=False, weights=no_align)),
        ("conditional", replace(config, conditional=True, weights=no_align)),
        ("conditional+swd", replace(config, conditional=True, weights=replace(w, beta_cls=0.0))),
        ("full", config),
    ]
