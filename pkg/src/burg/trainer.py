"""Three-stage optimisation, missing-view recovery and final clustering."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autoencoder import ViewAutoencoder, fuse_latents, reconstruction_loss
from .consistency import (NeighborIndex, PrototypeSet, compute_prototypes, consensus_label, nac_loss,
                          pc_loss, resolve_neighbors, soft_assign)
from .dataio import MultiViewDataset
from .flow import FlowNetwork, dtl_loss, recover_latents
from .metrics import kmeans
from .numerics import Adam, Rng, Tensor, concat, no_grad

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("stage", "epoch", "loss_total", "loss_rec", "loss_flow_nll", "loss_dtl", "loss_nac", "loss_pc")
CHECKPOINT_MAGIC = b"BURGCKPT"


class TrainingError(RuntimeError):
    """A loss or gradient became non-finite during training."""


@dataclass
class TrainConfig:
    latent_dim: int = 32
    n_coupling_layers: int = 6
    encoder_hidden: list[int] = field(default_factory=lambda: [256, 128])
    coupling_hidden: int = 64
    activation: str = "relu"
    learning_rate: float = 3e-4
    epochs_stage1: int = 200
    epochs_stage2: int = 30
    epochs_stage3: int = 20
    batch_stage12: int = 128
    batch_stage3: int = 512
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    tau: float = 1.0
    scale_clamp: float = 2.0
    pc_entropy: str = "sample"
    n_clusters: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.encoder_hidden = [int(h) for h in self.encoder_hidden]
        self.validate()

    def validate(self) -> None:
        if self.latent_dim <= 0 or self.latent_dim % 2:
            raise ValueError(f"latent_dim must be a positive even number, got {self.latent_dim}")
        positive = ("coupling_hidden", "learning_rate", "batch_stage12", "batch_stage3", "tau", "scale_clamp")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("n_coupling_layers", "epochs_stage1", "epochs_stage2", "epochs_stage3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if any(h <= 0 for h in self.encoder_hidden):
            raise ValueError("encoder_hidden sizes must be positive")
        if self.n_clusters is not None and self.n_clusters < 2:
            raise ValueError(f"n_clusters must be at least 2, got {self.n_clusters}")
        if self.pc_entropy not in ("sample", "batch"):
            raise ValueError(f"pc_entropy must be 'sample' or 'batch', got {self.pc_entropy!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @property
    def ablation(self) -> str:
        return {(True, True): "NAC+PC", (True, False): "NAC only",
                (False, True): "PC only", (False, False): "None"}[(self.alpha > 0, self.beta > 0)]


class BURGModel:
    """Per-view autoencoders and flows."""

    def __init__(self, dims: Sequence[int], config: TrainConfig, rng: Rng):
        self.aes = [ViewAutoencoder(d_v, config.latent_dim, config.encoder_hidden, rng, config.activation)
                    for d_v in dims]
        self.flows = [FlowNetwork(config.latent_dim, config.n_coupling_layers, rng,
                                  config.coupling_hidden, config.scale_clamp) for _ in dims]

    def named_parameters(self, part: str = "all") -> list[tuple[str, Tensor]]:
        out = []
        for v, (ae, f) in enumerate(zip(self.aes, self.flows)):
            if part in ("all", "ae"):
                out += ae.named_parameters(f"view{v}.")
            if part in ("all", "flow"):
                out += f.named_parameters(f"view{v}.flow.")
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}


@dataclass
class LatentState:
    """Per-view latents for every (sample, view) slot.

    ``latents[v][i]`` is the encoder output when ``mask[i, v] == 1`` and the
    recovered latent otherwise.
    """

    latents: list[np.ndarray]
    observed: list[np.ndarray]
    fused: np.ndarray
    gaussians: list[np.ndarray]
    mask: np.ndarray
    epoch: str = ""

    @property
    def n_recovered(self) -> int:
        return int((self.mask == 0).sum())

    def embedding(self) -> np.ndarray:
        return np.hstack(self.latents)


def _masked_views(ds: MultiViewDataset) -> list[np.ndarray]:
    return [np.where(ds.mask[:, [v]] == 1, x, 0.0) for v, x in enumerate(ds.views)]


def recover_missing(dataset: MultiViewDataset, model: BURGModel, epoch: str = "") -> LatentState:
    """Encode every sample and fill missing slots through the inverse flows."""
    views = _masked_views(dataset)
    mask = dataset.mask
    with no_grad():
        latents = [ae.encode(x) for ae, x in zip(model.aes, views)]
        gaussians = [f.forward(z)[0] for f, z in zip(model.flows, latents)]
        completed = recover_latents(latents, model.flows, mask, gaussians)
        fused = fuse_latents(latents, mask)
    observed = [z.data * mask[:, [v]] for v, z in enumerate(latents)]
    return LatentState([c.data for c in completed], observed, fused.data,
                       [h.data for h in gaussians], mask.copy(), epoch)


def final_clustering(dataset: MultiViewDataset, model: BURGModel, k: int, rng: Rng,
                     state: LatentState | None = None) -> np.ndarray:
    """k-means on the concatenation of observed and recovered per-view latents."""
    if k > dataset.n_samples:
        raise ValueError(f"cannot form {k} clusters from {dataset.n_samples} samples")
    state = state or recover_missing(dataset, model)
    labels, _, _ = kmeans(state.embedding(), k, rng, max_iter=20, n_init=4)
    return labels


class Trainer:
    """Runs the three optimisation stages on one dataset."""

    def __init__(self, dataset: MultiViewDataset, config: TrainConfig):
        self.dataset = dataset
        self.config = config
        self.k = config.n_clusters or dataset.n_clusters
        if self.k is None:
            raise ValueError("n_clusters must be given for unlabeled data")
        if self.k > dataset.n_samples:
            raise ValueError(f"cannot form {self.k} clusters from {dataset.n_samples} samples")
        if config.latent_dim % 2:
            raise ValueError("latent_dim must be even")
        root = Rng(config.seed)
        self.init_rng = root.spawn(0)
        self.shuffle_rng = root.spawn(1)
        self.cluster_rng = root.spawn(2)
        self.model = BURGModel(dataset.dims, config, self.init_rng)
        self.views = _masked_views(dataset)
        self.mask = dataset.mask
        ae_named = self.model.named_parameters("ae")
        flow_named = self.model.named_parameters("flow")
        all_named = self.model.named_parameters("all")
        lr = config.learning_rate
        self.opt_ae = Adam([p for _, p in ae_named], lr, names=[n for n, _ in ae_named])
        self.opt_flow = Adam([p for _, p in flow_named], lr, names=[n for n, _ in flow_named])
        self.opt_joint = Adam([p for _, p in all_named], lr, names=[n for n, _ in all_named])
        self.curves: list[dict] = []
        self.schedule: dict[str, dict] = {}
        self.timings: dict[str, float] = {}
        self.stages_done = 0

    # -- helpers --------------------------------------------------------------------------------
    def _batches(self, batch_size: int):
        n = self.dataset.n_samples
        order = self.shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            yield np.sort(order[start:start + batch_size])

    def _batch(self, idx: np.ndarray):
        return [x[idx] for x in self.views], self.mask[idx]

    @staticmethod
    def _check(value: float, stage: int, epoch: int, batch: int, name: str) -> None:
        if not math.isfinite(value):
            raise TrainingError(f"non-finite {name} at stage {stage}, epoch {epoch}, batch {batch}")

    def _log_schedule(self, stage: int, epochs: int, batch_size: int, optimizer: Adam, seen: int) -> None:
        self.schedule[f"stage{stage}"] = {
            "epochs": epochs,
            "batch_size": batch_size,
            "largest_batch": seen,
            "learning_rate": optimizer.lr,
        }

    def _record(self, stage: int, epoch: int, sums: dict, n_batches: int) -> None:
        row = {"stage": stage, "epoch": epoch}
        for key in CURVE_COLUMNS[2:]:
            row[key] = sums[key] / n_batches if key in sums else None
        self.curves.append(row)

    # -- stage 1 -----------------------------------------------------------------------------------
    def run_stage1(self) -> None:
        """Autoencoder reconstruction steps alternating with flow likelihood steps."""
        cfg = self.config
        t0 = time.perf_counter()
        largest = 0
        for epoch in range(1, cfg.epochs_stage1 + 1):
            sums: dict = {"loss_rec": 0.0, "loss_flow_nll": 0.0, "loss_total": 0.0}
            n_batches = 0
            for b, idx in enumerate(self._batches(cfg.batch_stage12)):
                largest = max(largest, len(idx))
                views, mask = self._batch(idx)
                self.opt_ae.zero_grad()
                latents = [ae.encode(x) for ae, x in zip(self.model.aes, views)]
                rec = reconstruction_loss(views, self.model.aes, mask, latents)
                self._check(rec.item(), 1, epoch, b, "reconstruction loss")
                rec.backward()
                self.opt_ae.step()

                self.opt_flow.zero_grad()
                nll, count = None, 0
                for v, (f, z) in enumerate(zip(self.model.flows, latents)):
                    rows = np.flatnonzero(mask[:, v] == 1)
                    if len(rows) == 0:
                        continue
                    term = -f.log_likelihood(Tensor(z.data[rows])).sum()
                    nll = term if nll is None else nll + term
                    count += len(rows)
                nll = nll * (1.0 / count)
                self._check(nll.item(), 1, epoch, b, "flow negative log-likelihood")
                nll.backward()
                self.opt_flow.step()
                sums["loss_rec"] += rec.item()
                sums["loss_flow_nll"] += nll.item()
                sums["loss_total"] += rec.item() + nll.item()
                n_batches += 1
            self._record(1, epoch, sums, n_batches)
            log.debug("stage 1 epoch %d rec=%.5f nll=%.5f", epoch, sums["loss_rec"] / n_batches,
                      sums["loss_flow_nll"] / n_batches)
        self._log_schedule(1, cfg.epochs_stage1, cfg.batch_stage12, self.opt_ae, largest)
        self.timings["stage1"] = time.perf_counter() - t0
        self.stages_done = 1

    # -- stage 2 -----------------------------------------------------------------------------------
    def _joint_epochs(self, stage: int, epochs: int, batch_size: int, refresh=None, extra=None) -> int:
        largest = 0
        for epoch in range(1, epochs + 1):
            context = refresh() if refresh is not None else None
            sums: dict = {"loss_total": 0.0, "loss_dtl": 0.0}
            n_batches = 0
            for b, idx in enumerate(self._batches(batch_size)):
                largest = max(largest, len(idx))
                views, mask = self._batch(idx)
                self.opt_joint.zero_grad()
                dtl, parts = dtl_loss(views, self.model.aes, self.model.flows, mask, return_parts=True)
                loss = dtl
                terms = {}
                if extra is not None:
                    loss, terms = extra(loss, parts, idx, mask, context)
                self._check(loss.item(), stage, epoch, b, "loss")
                loss.backward()
                self.opt_joint.step()
                sums["loss_total"] += loss.item()
                sums["loss_dtl"] += dtl.item()
                for key, value in terms.items():
                    sums[key] = sums.get(key, 0.0) + value
                n_batches += 1
            self._record(stage, epoch, sums, n_batches)
            log.debug("stage %d epoch %d total=%.5f", stage, epoch, sums["loss_total"] / n_batches)
        return largest

    def run_stage2(self) -> None:
        """Joint training of every network on the distribution-transfer loss."""
        cfg = self.config
        t0 = time.perf_counter()
        largest = self._joint_epochs(2, cfg.epochs_stage2, cfg.batch_stage12)
        self._log_schedule(2, cfg.epochs_stage2, cfg.batch_stage12, self.opt_joint, largest)
        self.timings["stage2"] = time.perf_counter() - t0
        self.stages_done = 2

    # -- stage 3 -----------------------------------------------------------------------------------
    def _refresh(self) -> dict:
        cfg = self.config
        state = recover_missing(self.dataset, self.model, epoch="stage3")
        context: dict = {"state": state}
        if cfg.alpha > 0:
            index = NeighborIndex.build(state.observed, self.mask)
            neighbors = np.full(self.mask.shape, -1, dtype=np.intp)
            for v in range(self.dataset.n_views):
                rows = np.flatnonzero(self.mask[:, v] == 0)
                if len(rows):
                    neighbors[rows, v] = resolve_neighbors(index, rows, v, state.latents[v][rows])
            context["neighbors"] = neighbors
            context["index"] = index
        if cfg.beta > 0:
            protos = compute_prototypes(state.fused, self.k, self.cluster_rng, cfg.tau, cfg.gamma)
            with no_grad():
                assign = [soft_assign(z, protos).data for z in state.latents]
            context["protos"] = protos
            context["consensus"] = consensus_label(assign, self.mask)
        return context

    def _consistency_terms(self, loss: Tensor, parts: dict, idx: np.ndarray, mask: np.ndarray, ctx: dict):
        cfg = self.config
        completed, recovered = recover_latents(parts["latents"], self.model.flows, mask, parts["gaussians"],
                                               return_recovered=True)
        terms = {}
        if cfg.alpha > 0:
            index: NeighborIndex = ctx["index"]
            z_rows, targets, valid = [], [], []
            for v, (rows, z_tilde) in enumerate(recovered):
                if z_tilde is None:
                    continue
                nbr = ctx["neighbors"][idx[rows], v]
                ok = nbr >= 0
                z_rows.append(z_tilde)
                targets.append(index.latents[v][np.where(ok, nbr, 0)])
                valid.append(ok)
            if z_rows:
                nac = nac_loss(concat(z_rows, axis=0), np.vstack(targets), np.concatenate(valid))
            else:
                nac = Tensor(0.0)
            loss = loss + nac * cfg.alpha
            terms["loss_nac"] = nac.item()
        if cfg.beta > 0:
            protos: PrototypeSet = ctx["protos"]
            assign = [soft_assign(z, protos) for z in completed]
            pc = pc_loss(assign, ctx["consensus"][idx], cfg.gamma, cfg.pc_entropy)
            loss = loss + pc * cfg.beta
            terms["loss_pc"] = pc.item()
        return loss, terms

    def run_stage3(self) -> None:
        """Transfer loss plus neighbour and prototype consistency, structures refreshed per epoch."""
        cfg = self.config
        t0 = time.perf_counter()
        use_consistency = cfg.alpha > 0 or cfg.beta > 0
        largest = self._joint_epochs(
            3, cfg.epochs_stage3, cfg.batch_stage3,
            refresh=self._refresh if use_consistency else None,
            extra=self._consistency_terms if use_consistency else None,
        )
        self._log_schedule(3, cfg.epochs_stage3, cfg.batch_stage3, self.opt_joint, largest)
        self.timings["stage3"] = time.perf_counter() - t0
        self.stages_done = 3

    # -- driver --------------------------------------------------------------------------------------
    def fit(self, checkpoint_dir: str | Path | None = None) -> "Trainer":
        stages = (self.run_stage1, self.run_stage2, self.run_stage3)
        for number, stage in enumerate(stages, start=1):
            if self.stages_done >= number:
                continue
            stage()
            log.info("finished stage %d in %.1fs", number, self.timings[f"stage{number}"])
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / f"stage{number}.ckpt", self)
        return self

    def recover_missing(self) -> LatentState:
        return recover_missing(self.dataset, self.model, epoch=f"stage{self.stages_done}")

    def predict(self) -> np.ndarray:
        return final_clustering(self.dataset, self.model, self.k, self.cluster_rng)


# -- checkpoints ------------------------------------------------------------------------------------


def save_checkpoint(path, trainer: Trainer) -> Path:
    """Write parameters, optimiser moments and RNG states.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
    header, then raw little-endian float64 buffers in header order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = dict(trainer.model.state_arrays())
    optimizers = {"ae": trainer.opt_ae, "flow": trainer.opt_flow, "joint": trainer.opt_joint}
    for key, opt in optimizers.items():
        for name, arr in opt.state_arrays().items():
            arrays[f"{key}.{name}"] = arr
    entries, offset = [], 0
    for name, arr in arrays.items():
        nbytes = arr.size * 8
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += nbytes
    header = {
        "format": "burg-checkpoint",
        "version": 1,
        "stages_done": trainer.stages_done,
        "config": trainer.config.to_dict(),
        "config_hash": trainer.config.digest(),
        "dims": trainer.dataset.dims,
        "adam_steps": {key: opt.step_count for key, opt in optimizers.items()},
        "rng": {"shuffle": trainer.shuffle_rng.get_state(), "cluster": trainer.cluster_rng.get_state()},
        "curves": trainer.curves,
        "schedule": trainer.schedule,
        "tensors": entries,
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (length,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + length].decode())
    base = 16 + length
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        buf = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = buf.reshape(entry["shape"]).astype(np.float64)
    return header, arrays


def load_checkpoint(path, dataset: MultiViewDataset) -> Trainer:
    header, arrays = read_checkpoint(path)
    config = TrainConfig.from_dict(header["config"])
    if config.digest() != header["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    if list(dataset.dims) != list(header["dims"]):
        raise ValueError(f"{path}: checkpoint view dims {header['dims']} do not match dataset {dataset.dims}")
    trainer = Trainer(dataset, config)
    for name, p in trainer.model.named_parameters():
        p.data[...] = arrays[name]
    optimizers = {"ae": trainer.opt_ae, "flow": trainer.opt_flow, "joint": trainer.opt_joint}
    for key, opt in optimizers.items():
        prefix = f"{key}."
        own = {name[len(prefix):]: arr for name, arr in arrays.items() if name.startswith(prefix)}
        opt.load_state_arrays(own, header["adam_steps"][key])
    trainer.shuffle_rng.set_state(header["rng"]["shuffle"])
    trainer.cluster_rng.set_state(header["rng"]["cluster"])
    trainer.curves = header["curves"]
    trainer.schedule = header["schedule"]
    trainer.stages_done = header["stages_done"]
    return trainer


def write_curves(path, curves: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(CURVE_COLUMNS) + "\n")
        for row in curves:
            cells = []
            for key in CURVE_COLUMNS:
                value = row.get(key)
                cells.append("" if value is None else (str(value) if key in ("stage", "epoch") else repr(float(value))))
            fh.write(",".join(cells) + "\n")
