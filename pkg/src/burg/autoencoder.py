"""View-specific encoder/decoder pairs and the dual reconstruction objective."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import Rng, ShapeError, Tensor, as_tensor, init_linear

ACTIVATIONS = ("relu", "tanh")


@dataclass
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_dims: list[int] = field(default_factory=list)
    activation: str = "relu"

    def __post_init__(self):
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        if any(int(n) <= 0 for n in dims):
            raise ValueError(f"MLP layer sizes must be positive, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]


class MLP:
    """Fully connected stack; activation between layers, none on the output."""

    def __init__(self, spec: MlpSpec, rng: Rng):
        self.spec = spec
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        dims = spec.dims
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w, b = init_linear(rng, fan_in, fan_out)
            self.weights.append(w)
            self.biases.append(b)

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ShapeError(f"MLP expects (batch, {self.spec.input_dim}) input, got {x.shape}")
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if k < last:
                x = x.relu() if self.spec.activation == "relu" else x.tanh()
        return x

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}layer{k}.weight", w))
            out.append((f"{prefix}layer{k}.bias", b))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class ViewAutoencoder:
    """Encoder/decoder pair mapping one view into the shared latent space and back."""

    def __init__(self, view_dim: int, latent_dim: int, hidden_dims: Sequence[int], rng: Rng,
                 activation: str = "relu"):
        self.view_dim = view_dim
        self.latent_dim = latent_dim
        self.encoder = MLP(MlpSpec(view_dim, latent_dim, list(hidden_dims), activation), rng)
        self.decoder = MLP(MlpSpec(latent_dim, view_dim, list(reversed(hidden_dims)), activation), rng)

    def encode(self, x) -> Tensor:
        return self.encoder(x)

    def decode(self, z) -> Tensor:
        return self.decoder(z)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return self.encoder.named_parameters(prefix + "encoder.") + self.decoder.named_parameters(prefix + "decoder.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def encode(ae: ViewAutoencoder, x) -> Tensor:
    return ae.encode(x)


def decode(ae: ViewAutoencoder, z) -> Tensor:
    return ae.decode(z)


def fuse_latents(latents: Sequence[Tensor], mask) -> Tensor:
    """Masked mean of per-view latents.

    ``latents`` holds one entry per view, either a ``(d,)`` vector for a single
    sample with a length-V ``mask``, or ``(B, d)`` batches with a ``(B, V)`` mask.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape[-1] != len(latents):
        raise ShapeError(f"mask has {mask.shape[-1]} columns for {len(latents)} views")
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        bad = int(np.flatnonzero(np.atleast_1d(counts) == 0)[0])
        raise ValueError(f"sample {bad} has no observed view")
    total = None
    for v, z in enumerate(latents):
        w = mask[..., v]
        term = as_tensor(z) * (w[..., None] if w.ndim else float(w))
        total = term if total is None else total + term
    inv = 1.0 / counts
    return total * (inv[..., None] if np.ndim(inv) else float(inv))


def instance_losses(views: Sequence[np.ndarray], aes: Sequence[ViewAutoencoder],
                    latents: Sequence[Tensor], fused: Tensor) -> list[Tensor]:
    """Per-row dual reconstruction error for every view (unmasked)."""
    out = []
    for x, ae, z in zip(views, aes, latents):
        x = np.asarray(x, dtype=np.float64)
        own = (ae.decode(z) - x).sq_norm(axis=1)
        common = (ae.decode(fused) - x).sq_norm(axis=1)
        out.append(own + common)
    return out


def reconstruction_loss(views: Sequence[np.ndarray], aes: Sequence[ViewAutoencoder], mask,
                        latents: Sequence[Tensor] | None = None) -> Tensor:
    """Masked dual reconstruction loss averaged over observed (sample, view) pairs.

    Missing instances enter only through the mask weights, so their feature
    values never influence the result.
    """
    mask = np.asarray(mask, dtype=np.float64)
    views = [np.where(mask[:, [v]] > 0, x, 0.0) for v, x in enumerate(views)]
    if latents is None:
        latents = [ae.encode(x) for ae, x in zip(aes, views)]
    fused = fuse_latents(latents, mask)
    per_view = instance_losses(views, aes, latents, fused)
    total = None
    for v, ell in enumerate(per_view):
        term = (ell * mask[:, v]).sum()
        total = term if total is None else total + term
    return total * (1.0 / mask.sum())
