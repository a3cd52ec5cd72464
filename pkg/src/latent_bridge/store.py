"""Save and load models and latent banks through the checkpoint container."""

from __future__ import annotations

from typing import Mapping, Optional

from .base_models import BetaVae, DataClassifier, IdentityBase, LatentBank
from .bridge import BridgingVae
from .persistence import load_checkpoint, save_checkpoint

MODEL_KINDS = {cls.kind: cls for cls in (BetaVae, DataClassifier, BridgingVae, IdentityBase)}


def save_model(path, model, extra: Optional[Mapping] = None) -> None:
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    meta = model.metadata()
    meta.update({k: str(v) for k, v in (extra or {}).items()})
    save_checkpoint(path, tensors, meta)


def load_model(path):
    tensors, meta = load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "latent_bank":
        return LatentBank.from_state(tensors, meta)
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"{path}: unknown checkpoint kind {kind!r}") from None
    return cls.from_state(tensors, meta)


def save_bank(path, bank: LatentBank, extra: Optional[Mapping] = None) -> None:
    meta = bank.metadata()
    meta.update({k: str(v) for k, v in (extra or {}).items()})
    save_checkpoint(path, bank.named_tensors(), meta)


def load_bank(path) -> LatentBank:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "latent_bank":
        raise ValueError(f"{path} is not a latent bank checkpoint")
    return LatentBank.from_state(tensors, meta)
