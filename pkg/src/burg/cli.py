"""``burg`` command line: synth, mask, train, eval."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .dataio import (DatasetError, ParseError, SyntheticSpec, copy_with_mask, generate_mask, generate_synthetic,
                     load_dataset, read_labels, write_dataset, write_labels, write_matrix)
from .metrics import score
from .numerics import DomainError, NumericError, Rng, ShapeError
from .trainer import TrainConfig, Trainer, TrainingError, write_curves

log = logging.getLogger("burg")

# exit code and category printed on failure, most specific first
ERROR_CATEGORIES = (
    (FileNotFoundError, "io-error", 3),
    (OSError, "io-error", 3),
    (ParseError, "parse-error", 4),
    (DatasetError, "dataset-error", 5),
    (TrainingError, "training-error", 6),
    (NumericError, "numeric-error", 6),
    (ShapeError, "shape-error", 7),
    (DomainError, "domain-error", 7),
    (ValueError, "validation-error", 2),
)


class CliError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """Reports flag errors on one line like every other failure."""

    def error(self, message):
        self.exit(2, f"error: usage-error: {self.prog}: {' '.join(message.split())}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _rate(text: str) -> float:
    value = float(text)
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1), got {text}")
    return value


# -- synth -------------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_samples=args.n, n_clusters=args.k, n_views=args.views, latent_dim=args.latent_dim,
        view_dims=[args.dim] * args.views, cluster_separation=args.separation,
        noise_std=args.noise, view_noise_std=args.view_noise, seed=args.seed,
    )
    path = write_dataset(generate_synthetic(spec), args.out)
    print(path)
    return 0


# -- mask ----------------------------------------------------------------------------------------


def cmd_mask(args) -> int:
    ds = load_dataset(args.dataset)
    mask = generate_mask(ds.n_samples, ds.n_views, args.missing_rate, Rng(args.seed))
    if not np.all(ds.mask == 1):
        # masking an already incomplete dataset keeps the union of missing slots
        mask = mask * ds.mask
        if np.any(mask.sum(axis=1) == 0):
            raise CliError("combined mask would leave a sample with no observed view")
    path = copy_with_mask(ds, mask, args.out)
    print(path)
    return 0


# -- train ------------------------------------------------------------------------------------------

_CONFIG_HELP = {
    "latent_dim": "shared latent dimension d (even)",
    "n_coupling_layers": "coupling layers M per flow",
    "encoder_hidden": "encoder hidden widths; the decoder mirrors them",
    "coupling_hidden": "hidden width of the coupling scale/shift networks",
    "activation": "encoder/decoder activation (relu or tanh)",
    "learning_rate": "Adam learning rate for every stage",
    "epochs_stage1": "epochs of reconstruction + likelihood pretraining",
    "epochs_stage2": "epochs of transfer-loss training",
    "epochs_stage3": "epochs with consistency terms",
    "batch_stage12": "batch size in stages 1 and 2",
    "batch_stage3": "batch size in stage 3",
    "alpha": "weight of the neighbour consistency loss (0 disables)",
    "beta": "weight of the prototype consistency loss (0 disables)",
    "gamma": "entropy weight inside the prototype loss",
    "tau": "softmax temperature of prototype assignments",
    "scale_clamp": "soft clamp c on coupling log-scales, c*tanh(s/c)",
    "pc_entropy": "entropy form in the prototype loss (sample or batch)",
    "n_clusters": "number of clusters; defaults to the label count",
    "seed": "seed for initialisation, shuffling and clustering",
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        help_text = f"{_CONFIG_HELP[f.name]} (default: {default})"
        kwargs = {"dest": f.name, "default": argparse.SUPPRESS, "help": help_text}
        if f.name == "encoder_hidden":
            kwargs.update(type=_positive_int, nargs="+", metavar="WIDTH")
        elif f.name in ("activation", "pc_entropy"):
            kwargs.update(choices=["relu", "tanh"] if f.name == "activation" else ["sample", "batch"])
        elif f.name == "n_clusters":
            kwargs.update(type=_positive_int)
        elif isinstance(default, int):
            kwargs.update(type=int)
        else:
            kwargs.update(type=float)
        parser.add_argument(flag, **kwargs)


def _resolve_config(args) -> TrainConfig:
    data: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"no such file: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise ParseError(f"{path}: config must be a JSON object")
    for f in fields(TrainConfig):
        if hasattr(args, f.name):
            data[f.name] = getattr(args, f.name)
    return TrainConfig.from_dict(data)


def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    config = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    trainer = Trainer(ds, config)
    trainer.fit(checkpoint_dir=ckpt_dir)
    state = trainer.recover_missing()
    labels = trainer.predict()

    paths = {name: out / name for name in ("curves.csv", "labels_pred.csv", "embedding.csv")}
    write_curves(paths["curves.csv"], trainer.curves)
    write_labels(paths["labels_pred.csv"], labels)
    write_matrix(paths["embedding.csv"], state.embedding())
    report = {
        "seed": config.seed,
        "ablation": config.ablation,
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "dataset": str(Path(args.dataset).resolve()),
        "n_samples": ds.n_samples,
        "n_views": ds.n_views,
        "n_clusters": trainer.k,
        "missing_slots": int((ds.mask == 0).sum()),
        "schedule": trainer.schedule,
        "timings": {k: round(v, 3) for k, v in trainer.timings.items()},
        "curve_file": str(paths["curves.csv"]),
        "labels_file": str(paths["labels_pred.csv"]),
        "embedding_file": str(paths["embedding.csv"]),
        "checkpoints": [str(ckpt_dir / f"stage{n}.ckpt") for n in (1, 2, 3)],
    }
    if ds.labels is not None:
        report["metrics"] = score(labels, ds.labels)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    if "metrics" in report:
        m = report["metrics"]
        print(f"acc={m['acc']:.6f} nmi={m['nmi']:.6f} ari={m['ari']:.6f}")
    print(out / "report.json")
    return 0


# -- eval -------------------------------------------------------------------------------------------


def cmd_eval(args) -> int:
    pred, truth = read_labels(args.pred), read_labels(args.truth)
    if len(pred) != len(truth):
        raise CliError(f"label files differ in length: {args.pred} has {len(pred)}, {args.truth} has {len(truth)}")
    m = score(pred, truth)
    print("{" + ", ".join(f'"{k}": {m[k]:.6f}' for k in ("acc", "nmi", "ari")) + "}")
    return 0


# -- entry point ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="burg", description="Incomplete multi-view clustering with flow-based recovery.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic multi-view dataset", formatter_class=fmt)
    p.add_argument("--n", type=_positive_int, default=1000, help="number of samples")
    p.add_argument("--k", type=_positive_int, default=5, help="number of clusters")
    p.add_argument("--views", type=_positive_int, default=3, help="number of views")
    p.add_argument("--dim", type=_positive_int, default=20, help="feature dimension of every view")
    p.add_argument("--latent-dim", type=_positive_int, default=8, help="dimension of the generating latent space")
    p.add_argument("--separation", type=float, default=6.0, help="minimum distance between cluster centres")
    p.add_argument("--noise", type=float, default=0.5, help="within-cluster latent noise std")
    p.add_argument("--view-noise", type=float, default=0.1, help="additive feature noise std per view")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mask", help="drop view instances at a given missing rate", formatter_class=fmt)
    p.add_argument("dataset", help="dataset directory or manifest")
    p.add_argument("--missing-rate", type=_rate, default=0.5, help="fraction of (sample, view) slots removed")
    p.add_argument("--seed", type=int, default=0, help="masking seed")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="run the three training stages and cluster")
    p.add_argument("dataset", help="dataset directory or manifest")
    p.add_argument("--config", default=None, help="JSON file with TrainConfig keys; flags override it (default: None)")
    p.add_argument("--out", required=True, help="run output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predicted labels against ground truth", formatter_class=fmt)
    p.add_argument("pred", help="predicted labels, one integer per line")
    p.add_argument("truth", help="ground-truth labels, one integer per line")
    p.set_defaults(func=cmd_eval)
    return parser


def _categorize(exc: BaseException) -> tuple[str, int]:
    for kind, name, code in ERROR_CATEGORIES:
        if isinstance(exc, kind):
            return name, code
    return "internal-error", 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one categorised line
        name, code = _categorize(exc)
        message = " ".join(str(exc).split())
        print(f"error: {name}: {message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
