"""Multi-view datasets: validation, CSV/manifest I/O, masking and synthesis.

A dataset directory holds ``dataset.json`` plus one CSV per view and
optional mask and label CSVs::

    {"n_samples": 4,
     "views": [{"name": "view0", "file": "view0.csv", "dim": 2}, ...],
     "mask_file": "mask.csv",        # optional, absent means complete
     "labels_file": "labels.csv"}    # optional

The mask is N x V with ``mask[i, v] == 1`` when sample ``i`` is observed in
view ``v``. Values stored for missing slots are never read by training.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import Rng

MANIFEST = "dataset.json"


class DatasetError(ValueError):
    """Dataset contents violate a structural invariant."""


class ParseError(ValueError):
    """A data file could not be parsed."""


@dataclass
class MultiViewDataset:
    views: list[np.ndarray]
    mask: np.ndarray
    labels: np.ndarray | None = None
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.views = [np.asarray(x, dtype=np.float64) for x in self.views]
        self.mask = np.asarray(self.mask)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.names:
            self.names = [f"view{v}" for v in range(len(self.views))]
        self.validate()

    @property
    def n_samples(self) -> int:
        return self.views[0].shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def dims(self) -> list[int]:
        return [x.shape[1] for x in self.views]

    @property
    def n_clusters(self) -> int | None:
        return None if self.labels is None else int(self.labels.max()) + 1

    def validate(self) -> None:
        if not self.views:
            raise DatasetError("dataset has no views")
        if len(self.names) != len(self.views):
            raise DatasetError(f"{len(self.names)} view names for {len(self.views)} views")
        for name, x in zip(self.names, self.views):
            if x.ndim != 2:
                raise DatasetError(f"view {name!r} is not a matrix (shape {x.shape})")
        rows = {name: x.shape[0] for name, x in zip(self.names, self.views)}
        if len(set(rows.values())) > 1:
            detail = ", ".join(f"{k}={v}" for k, v in rows.items())
            raise DatasetError(f"views disagree on row count: {detail}")
        n, v = self.n_samples, self.n_views
        if self.mask.shape != (n, v):
            raise DatasetError(f"mask has shape {self.mask.shape}, expected {(n, v)}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise DatasetError("mask entries must be 0 or 1")
        self.mask = self.mask.astype(np.int64)
        empty = np.flatnonzero(self.mask.sum(axis=1) == 0)
        if len(empty):
            raise DatasetError(f"sample {int(empty[0])} has no observed view")
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise DatasetError(f"labels have shape {self.labels.shape}, expected ({n},)")
            if self.labels.min() < 0:
                raise DatasetError("labels must be non-negative")
            k = int(self.labels.max()) + 1
            missing = sorted(set(range(k)) - set(np.unique(self.labels).tolist()))
            if missing:
                raise DatasetError(f"class indices {missing} never occur in labels")

    def with_mask(self, mask: np.ndarray) -> "MultiViewDataset":
        return MultiViewDataset([x.copy() for x in self.views], mask, self.labels, list(self.names))


@dataclass
class SyntheticSpec:
    n_samples: int = 1000
    n_clusters: int = 5
    n_views: int = 3
    latent_dim: int = 8
    view_dims: Sequence[int] = (20, 20, 20)
    cluster_separation: float = 6.0
    noise_std: float = 0.5
    view_noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        counts = {"n_samples": self.n_samples, "n_clusters": self.n_clusters,
                  "n_views": self.n_views, "latent_dim": self.latent_dim}
        for key, value in counts.items():
            if int(value) <= 0:
                raise ValueError(f"{key} must be positive, got {value}")
        if self.n_clusters > self.n_samples:
            raise ValueError("more clusters than samples")
        if len(self.view_dims) != self.n_views or any(d <= 0 for d in self.view_dims):
            raise ValueError(f"need {self.n_views} positive view dims, got {list(self.view_dims)}")
        if self.cluster_separation <= 0:
            raise ValueError("cluster_separation must be positive")
        if self.noise_std < 0 or self.view_noise_std < 0:
            raise ValueError("noise levels must be non-negative")


def generate_synthetic(spec: SyntheticSpec) -> MultiViewDataset:
    """Gaussian blobs in a latent space pushed through per-view ``tanh(A x + b)`` maps."""
    rng = Rng(spec.seed)
    k, q = spec.n_clusters, spec.latent_dim
    # rejection-sample centers until every pair is at least `cluster_separation` apart
    radius = spec.cluster_separation * max(1.0, np.sqrt(k / q))
    centers = np.zeros((0, q))
    while len(centers) < k:
        cand = rng.normal(q) * radius
        if len(centers) == 0 or np.min(np.linalg.norm(centers - cand, axis=1)) >= spec.cluster_separation:
            centers = np.vstack([centers, cand])
    labels = np.arange(spec.n_samples) % k
    labels = labels[rng.permutation(spec.n_samples)]
    latent = centers[labels] + rng.normal((spec.n_samples, q)) * spec.noise_std
    views = []
    for d_v in spec.view_dims:
        a = rng.normal((q, d_v)) / np.sqrt(q) / spec.cluster_separation * 2.0
        b = rng.normal(d_v) * 0.5
        x = np.tanh(latent @ a + b) + rng.normal((spec.n_samples, d_v)) * spec.view_noise_std
        views.append(x)
    mask = np.ones((spec.n_samples, spec.n_views), dtype=np.int64)
    return MultiViewDataset(views, mask, labels)


def generate_mask(n: int, v: int, missing_rate: float, rng: Rng) -> np.ndarray:
    """Remove exactly ``round(rate * n * v)`` slots, keeping one observed view per row."""
    if not 0.0 <= missing_rate < 1.0:
        raise ValueError(f"missing rate must lie in [0, 1), got {missing_rate}")
    n_zero = int(round(missing_rate * n * v))
    if n_zero > n * (v - 1):
        raise ValueError(f"missing rate {missing_rate} is infeasible for {v} views: "
                         f"cannot remove {n_zero} of {n * v} slots while keeping one per row")
    mask = np.ones((n, v), dtype=np.int64)
    kept = np.full(n, v)
    order = rng.permutation(n * v)
    removed = 0
    # a single pass over a random slot order; slots whose row would empty are skipped
    for slot in order:
        if removed == n_zero:
            break
        i, j = divmod(int(slot), v)
        if kept[i] > 1:
            mask[i, j] = 0
            kept[i] -= 1
            removed += 1
    return mask


# -- CSV / manifest I/O --------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_matrix(path: Path, matrix: np.ndarray, integer: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        for row in np.atleast_2d(matrix):
            fh.write(",".join(str(int(x)) if integer else _fmt(x) for x in row) + "\n")


def read_matrix(path: Path, integer: bool = False) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([int(c) if integer else float(c) for c in row])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: malformed numeric cell in {row!r}") from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(f"{path}:{lineno}: expected {len(rows[0])} columns, found {len(rows[-1])}")
    return np.array(rows, dtype=np.int64 if integer else np.float64)


def read_labels(path: Path) -> np.ndarray:
    m = read_matrix(path, integer=True)
    if m.size and m.shape[1] != 1:
        raise ParseError(f"{path}: expected one label per line")
    return m.reshape(-1)


def write_labels(path: Path, labels) -> None:
    with open(path, "w") as fh:
        for y in np.asarray(labels).ravel():
            fh.write(f"{int(y)}\n")


def write_dataset(ds: MultiViewDataset, directory, include_mask: bool = True) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, x in zip(ds.names, ds.views):
        fname = f"{name}.csv"
        write_matrix(directory / fname, x)
        entries.append({"name": name, "file": fname, "dim": int(x.shape[1])})
    manifest: dict = {"n_samples": ds.n_samples, "views": entries}
    if include_mask and not np.all(ds.mask == 1):
        write_matrix(directory / "mask.csv", ds.mask, integer=True)
        manifest["mask_file"] = "mask.csv"
    if ds.labels is not None:
        write_labels(directory / "labels.csv", ds.labels)
        manifest["labels_file"] = "labels.csv"
    with open(directory / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return directory / MANIFEST


def load_dataset(manifest_path) -> MultiViewDataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    base = path.parent
    if "views" not in manifest or not manifest["views"]:
        raise DatasetError(f"{path}: manifest lists no views")
    views, names = [], []
    for entry in manifest["views"]:
        x = read_matrix(base / entry["file"])
        if x.size == 0:
            x = x.reshape(0, int(entry.get("dim", 0)))
        if "dim" in entry and x.shape[1] != int(entry["dim"]):
            raise DatasetError(f"view {entry['name']!r} has {x.shape[1]} columns, manifest says {entry['dim']}")
        views.append(x)
        names.append(entry["name"])
    rows = {name: x.shape[0] for name, x in zip(names, views)}
    if len(set(rows.values())) > 1:
        raise DatasetError("views disagree on row count: " + ", ".join(f"{k}={v}" for k, v in rows.items()))
    n = views[0].shape[0]
    if "n_samples" in manifest and int(manifest["n_samples"]) != n:
        raise DatasetError(f"manifest declares {manifest['n_samples']} samples, views have {n}")
    if manifest.get("mask_file"):
        mask = read_matrix(base / manifest["mask_file"], integer=True)
    else:
        mask = np.ones((n, len(views)), dtype=np.int64)
    labels = read_labels(base / manifest["labels_file"]) if manifest.get("labels_file") else None
    return MultiViewDataset(views, mask, labels, names)


def copy_with_mask(ds: MultiViewDataset, mask: np.ndarray, directory) -> Path:
    """Write ``ds`` with ``mask`` attached into ``directory``."""
    out = ds.with_mask(mask)
    path = write_dataset(out, directory)
    if "mask_file" not in json.loads(Path(path).read_text()):
        # keep an explicit all-ones mask file so the masking run leaves a record
        write_matrix(Path(directory) / "mask.csv", out.mask, integer=True)
        manifest = json.loads(Path(path).read_text())
        manifest["mask_file"] = "mask.csv"
        Path(path).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def mean_impute(ds: MultiViewDataset) -> list[np.ndarray]:
    """Replace missing rows of each view with that view's observed column means."""
    out = []
    for v, x in enumerate(ds.views):
        obs = ds.mask[:, v] == 1
        filled = x.copy()
        filled[~obs] = x[obs].mean(axis=0)
        out.append(filled)
    return out

