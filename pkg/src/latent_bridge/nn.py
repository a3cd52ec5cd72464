"""Fully connected building blocks and the Adam optimizer."""

from __future__ import annotations

import math
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradientMap, Tensor
from .errors import NonFiniteGradient, ShapeMismatch

HEADS = ("affine", "sigmoid", "relu")


def xavier_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"layer dims must be positive, got {fan_in}x{fan_out}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear:
    """Affine map ``x @ weight + bias`` with weight shaped (in, out)."""

    def __init__(self, fan_in: int, fan_out: int, rng: Optional[np.random.Generator] = None):
        if rng is None:
            w = np.zeros((fan_in, fan_out))
        else:
            w = xavier_uniform(fan_in, fan_out, rng)
        self.weight = Tensor(w)
        self.bias = Tensor(np.zeros(fan_out))

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.fan_in:
            raise ShapeMismatch(f"linear layer expects width {self.fan_in}, got shape {x.shape}")
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def named_parameters(self, prefix: str = "") -> dict:
        return {f"{prefix}weight": self.weight, f"{prefix}bias": self.bias}


class MLP:
    """Stack of linear layers with relu between them.

    ``dims`` lists every width including input and output.  ``head`` picks
    the activation after the final layer: ``"affine"`` (none), ``"sigmoid"``
    or ``"relu"`` (useful for trunks that feed further heads).
    """

    def __init__(self, dims: Sequence[int], head: str = "affine", rng=None):
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {head!r}")
        self.dims = list(dims)
        self.head = head
        self.layers = [Linear(i, o, rng) for i, o in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < last or self.head == "relu":
                h = ad.relu(h)
            elif self.head == "sigmoid":
                h = ad.sigmoid(h)
        return h

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}{i}/"))
        return out


class GatedMixing:
    """Sigmoid gate blending a transform path with a passthrough path.

    ``out = g * transform(h) + (1 - g) * passthrough(h)`` with
    ``g = sigmoid(gate(h))``.  The gate bias starts at zero, so a fresh layer
    is an even blend of the two paths.
    """

    def __init__(self, fan_in: int, fan_out: int, rng=None):
        self.gate = Linear(fan_in, fan_out, rng)
        self.transform = Linear(fan_in, fan_out, rng)
        self.passthrough = Linear(fan_in, fan_out, rng)

    def __call__(self, h: Tensor) -> Tensor:
        g = ad.sigmoid(self.gate(h))
        t = self.transform(h)
        p = self.passthrough(h)
        return ad.add(p, ad.mul(g, ad.sub(t, p)))

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        out.update(self.gate.named_parameters(f"{prefix}gate/"))
        out.update(self.transform.named_parameters(f"{prefix}transform/"))
        out.update(self.passthrough.named_parameters(f"{prefix}passthrough/"))
        return out


def mlp_forward(stack: MLP, x: Tensor) -> Tensor:
    return stack(x)


def gml_forward(gml: GatedMixing, h: Tensor) -> Tensor:
    return gml(h)


def init_params(spec, rng: np.random.Generator):
    """Build freshly initialized layers from a spec.

    ``spec`` is ``("linear", in, out)``, ``("mlp", dims, head)`` or
    ``("gml", in, out)``.
    """
    kind, *args = spec
    if kind == "linear":
        return Linear(*args, rng=rng)
    if kind == "mlp":
        return MLP(*args, rng=rng)
    if kind == "gml":
        return GatedMixing(*args, rng=rng)
    raise ValueError(f"unknown layer kind {kind!r}")


class Adam:
    """Adam with bias correction over a fixed list of parameter tensors.

    Parameters are updated by replacing ``tensor.data``; arrays captured by
    an earlier tape are never written in place.
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        """Apply one update. ``grads`` is a GradientMap or a list aligned with params."""
        if isinstance(grads, GradientMap):
            grads = [grads.get(p) for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeMismatch(f"got {len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient("non-finite gradient passed to Adam")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(state: Adam, params, grads) -> Adam:
    """Functional spelling of :meth:`Adam.step`; ``params`` must be the optimizer's own."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("params do not match the optimizer state")
    state.step(grads)
    return state
