"""View-specific affine coupling flows, Gaussian fusion and the transfer loss."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autoencoder import MLP, MlpSpec, ViewAutoencoder, fuse_latents, instance_losses
from .numerics import NumericError, Rng, ShapeError, Tensor, as_tensor, concat, scatter_rows

LOG_2PI = math.log(2.0 * math.pi)


class CouplingLayer:
    """Affine coupling: one half is rescaled and shifted by functions of the other.

    Odd layers (1-based ``index``) transform the first half conditioned on the
    second; even layers transform the second half conditioned on the first.
    """

    def __init__(self, index: int, dim: int, hidden: int, rng: Rng, scale_clamp: float = 2.0):
        if dim % 2:
            raise ValueError(f"coupling layers need an even latent dimension, got {dim}")
        self.index = index
        self.half = dim // 2
        self.scale_clamp = float(scale_clamp)
        self.s_net = MLP(MlpSpec(self.half, self.half, [hidden], "tanh"), rng)
        self.t_net = MLP(MlpSpec(self.half, self.half, [hidden], "tanh"), rng)

    @property
    def parity(self) -> str:
        return "odd" if self.index % 2 else "even"

    def _scale_shift(self, cond: Tensor) -> tuple[Tensor, Tensor]:
        c = self.scale_clamp
        s = (self.s_net(cond) * (1.0 / c)).tanh() * c
        return s, self.t_net(cond)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        a, b = x.split([self.half, self.half], axis=1)
        if self.parity == "odd":
            s, t = self._scale_shift(b)
            y = concat([a * s.exp() + t, b], axis=1)
        else:
            s, t = self._scale_shift(a)
            y = concat([a, b * s.exp() + t], axis=1)
        return y, s.sum(axis=1)

    def inverse(self, y: Tensor) -> Tensor:
        a, b = y.split([self.half, self.half], axis=1)
        if self.parity == "odd":
            s, t = self._scale_shift(b)
            return concat([(a - t) * (-s).exp(), b], axis=1)
        s, t = self._scale_shift(a)
        return concat([a, (b - t) * (-s).exp()], axis=1)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return self.s_net.named_parameters(prefix + "s_net.") + self.t_net.named_parameters(prefix + "t_net.")


class ScalingLayer:
    """Elementwise ``exp(s_theta)`` rescaling with learnable log-scales."""

    def __init__(self, dim: int):
        self.s_theta = Tensor(np.zeros((1, dim)), requires_grad=True)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return x * self.s_theta.exp(), self.s_theta.sum()

    def inverse(self, y: Tensor) -> Tensor:
        return y * (-self.s_theta).exp()

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(prefix + "s_theta", self.s_theta)]


class FlowNetwork:
    """``M`` alternating coupling layers followed by a scaling layer."""

    def __init__(self, dim: int, n_layers: int, rng: Rng, hidden: int = 64, scale_clamp: float = 2.0):
        if dim % 2:
            raise ValueError(f"flow latent dimension must be even, got {dim}")
        self.dim = dim
        self.layers = [CouplingLayer(m, dim, hidden, rng, scale_clamp) for m in range(1, n_layers + 1)]
        self.scaling = ScalingLayer(dim)

    def _check(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"flow expects (batch, {self.dim}) input, got {x.shape}")
        return x

    def forward(self, z) -> tuple[Tensor, Tensor]:
        """Return ``(h, logdet)`` with one log|det J| per row."""
        x = self._check(z)
        logdet = None
        for layer in self.layers:
            x, ld = layer.forward(x)
            logdet = ld if logdet is None else logdet + ld
        h, ld_s = self.scaling.forward(x)
        logdet = ld_s * np.ones(x.shape[0]) if logdet is None else logdet + ld_s
        return h, logdet

    def inverse(self, h) -> Tensor:
        x = self.scaling.inverse(self._check(h))
        if not np.all(np.isfinite(x.data)):
            raise NumericError("non-finite value after inverting the scaling layer")
        for layer in reversed(self.layers):
            x = layer.inverse(x)
            if not np.all(np.isfinite(x.data)):
                raise NumericError(f"non-finite value after inverting coupling layer {layer.index}")
        return x

    def log_likelihood(self, z) -> Tensor:
        h, logdet = self.forward(z)
        return (h.sq_norm(axis=1) + self.dim * LOG_2PI) * -0.5 + logdet

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for layer in self.layers:
            out += layer.named_parameters(f"{prefix}coupling{layer.index}.")
        return out + self.scaling.named_parameters(prefix + "scaling.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def flow_forward(f: FlowNetwork, z) -> tuple[Tensor, Tensor]:
    return f.forward(z)


def flow_inverse(f: FlowNetwork, h) -> Tensor:
    return f.inverse(h)


def log_likelihood(f: FlowNetwork, z) -> Tensor:
    return f.log_likelihood(z)


def fuse_gaussian(h_list: Sequence, exclude: int | None = None) -> Tensor:
    """Sum the contributing Gaussianised latents and divide by sqrt(count).

    ``exclude`` drops one position of ``h_list`` (the view being recovered).
    """
    contrib = [h for k, h in enumerate(h_list) if k != exclude and h is not None]
    if not contrib:
        raise ValueError("no contributing view to fuse")
    total = as_tensor(contrib[0])
    for h in contrib[1:]:
        total = total + h
    return total * (1.0 / math.sqrt(len(contrib)))


def fuse_gaussian_masked(hs: Sequence[Tensor], weights: np.ndarray) -> Tensor:
    """Row-wise fusion where ``weights[i, v]`` flags view ``v`` as a contributor for row ``i``."""
    weights = np.asarray(weights, dtype=np.float64)
    counts = weights.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError(f"row {int(np.flatnonzero(counts == 0)[0])} has no contributing view")
    total = None
    for v, h in enumerate(hs):
        term = h * weights[:, [v]]
        total = term if total is None else total + term
    return total * (1.0 / np.sqrt(counts))[:, None]


def recover_latents(latents: Sequence[Tensor], flows: Sequence[FlowNetwork], mask,
                    gaussians: Sequence[Tensor] | None = None, return_recovered: bool = False):
    """Fill each missing slot with the inverse flow of the fused observed Gaussians.

    Returns per-view ``(B, d)`` latents: encoder outputs where observed,
    recovered latents where missing. Differentiable in both. With
    ``return_recovered`` also returns, per view, ``(rows, recovered)`` for the
    missing rows alone.
    """
    mask = np.asarray(mask, dtype=np.float64)
    n = mask.shape[0]
    if gaussians is None:
        gaussians = [f.forward(z)[0] for f, z in zip(flows, latents)]
    fused = None
    out, parts = [], []
    for v, (z, f) in enumerate(zip(latents, flows)):
        rows = np.flatnonzero(mask[:, v] == 0)
        observed = as_tensor(z) * mask[:, [v]]
        if len(rows) == 0:
            out.append(observed)
            parts.append((rows, None))
            continue
        if fused is None:
            fused = fuse_gaussian_masked(gaussians, mask)
        recovered = f.inverse(fused[rows])
        out.append(observed + scatter_rows(recovered, rows, n))
        parts.append((rows, recovered))
    return (out, parts) if return_recovered else out


def dtl_loss(views: Sequence[np.ndarray], aes: Sequence[ViewAutoencoder], flows: Sequence[FlowNetwork],
             mask, return_parts: bool = False):
    """Distribution-transfer loss.

    First term: for fully observed rows, every view's latent is predicted from
    the other views through its inverse flow; summed over views and averaged
    over complete rows (0 when the batch has none). Second term: reconstruction
    error minus flow log-likelihood, averaged over observed instances.
    """
    mask = np.asarray(mask, dtype=np.float64)
    n_views = mask.shape[1]
    views = [np.where(mask[:, [v]] > 0, x, 0.0) for v, x in enumerate(views)]
    latents = [ae.encode(x) for ae, x in zip(aes, views)]
    fused = fuse_latents(latents, mask)
    ells = instance_losses(views, aes, latents, fused)
    outs = [f.forward(z) for f, z in zip(flows, latents)]
    gaussians = [h for h, _ in outs]

    keep = None
    for v, (f, z, (h, logdet), ell) in enumerate(zip(flows, latents, outs, ells)):
        logp = (h.sq_norm(axis=1) + f.dim * LOG_2PI) * -0.5 + logdet
        term = ((ell - logp) * mask[:, v]).sum()
        keep = term if keep is None else keep + term
    keep = keep * (1.0 / mask.sum())

    complete = np.flatnonzero(mask.sum(axis=1) == n_views)
    transfer = Tensor(0.0)
    if len(complete) and n_views > 1:
        hs = [h[complete] for h in gaussians]
        total_h = hs[0]
        for h in hs[1:]:
            total_h = total_h + h
        scale = 1.0 / math.sqrt(n_views - 1)
        for v, f in enumerate(flows):
            z_tilde = f.inverse((total_h - hs[v]) * scale)
            err = (z_tilde - latents[v][complete]).sq_norm()
            transfer = transfer + err
        transfer = transfer * (1.0 / len(complete))
    loss = transfer + keep
    if return_parts:
        return loss, {"transfer": transfer, "keep": keep, "latents": latents, "gaussians": gaussians}
    return loss
