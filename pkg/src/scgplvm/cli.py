"""Command-line entry point: ``scgplvm simulate|train|eval|gradcheck``.

Every command writes into ``--out DIR`` and keeps a ``manifest.json`` there
that is rewritten atomically at start and at completion. Exit codes: 0 ok,
1 IO error, 2 configuration or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    LengthMismatch,
    NonFiniteLoss,
    NotPositiveDefinite,
    ParseError,
    PipelineMismatch,
    ShapeMismatch,
    SingleClass,
    UnknownPreset,
    ZeroRow,
)

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

MANIFEST = "manifest.json"


class RunManifest:
    """Run record: command, config echo, input hashes, seed, timestamps, outputs."""

    def __init__(self, out_dir: Path, command: str, argv: list):
        self.path = out_dir / MANIFEST
        self.data = {
            "command": command,
            "argv": list(argv),
            "status": "running",
            "started": _now(),
            "finished": None,
            "seed": None,
            "config": {},
            "inputs": {},
            "outputs": {},
        }

    def add_input(self, name: str, path) -> None:
        self.data["inputs"][name] = {"path": str(path), "sha256": file_sha256(path)}

    def add_output(self, name: str, path) -> None:
        self.data["outputs"][name] = str(path)

    def write(self) -> None:
        atomic_write_text(self.path, json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str = "ok") -> None:
        self.data["status"] = status
        self.data["finished"] = _now()
        self.write()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(str(path), "config file must hold a JSON object")
    return raw


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .data import write_dataset
    from .simulate import SimConfig, simulate

    out = Path(args.out)
    names = [f.name for f in dataclasses.fields(SimConfig)]
    raw = _read_json(args.config) if args.config else {}
    raw.update(_overrides(args, names))
    cfg = SimConfig.from_dict(raw)

    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out, "simulate", args.argv)
    manifest.data["seed"] = cfg.seed
    manifest.data["config"] = cfg.to_dict()
    if args.config:
        manifest.add_input("config", args.config)
    manifest.write()

    ds = simulate(cfg)
    counts, meta, cfg_path = out / "counts.csv", out / "meta.csv", out / "sim_config.json"
    write_dataset(ds, counts, meta)
    atomic_write_text(cfg_path, json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    for name, path in (("counts", counts), ("meta", meta), ("sim_config", cfg_path)):
        manifest.add_output(name, path)
    manifest.finish()
    print(f"simulated {ds.n_cells} cells x {ds.n_genes} genes -> {counts}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

TRAIN_FLAGS = ("epochs", "seed", "batch_size", "lr", "q_latent", "n_inducing", "n_mc", "checkpoint_every")


def _train_setup(args):
    from .likelihoods import LikelihoodForm
    from .trainer import TrainConfig, ablation_presets

    raw = _read_json(args.config) if args.config else {}
    preset_name = args.preset or raw.pop("preset", "proposed")
    raw.pop("preset", None)
    nb_dispersion = args.nb_dispersion if args.nb_dispersion is not None else raw.pop("nb_dispersion", None)
    raw.pop("nb_dispersion", None)
    raw.update(_overrides(args, TRAIN_FLAGS))
    if args.nb_scale is not None:
        raw["library_target"] = args.nb_scale
    cfg = TrainConfig.from_dict(raw)

    preset = ablation_presets(preset_name)
    if nb_dispersion is not None:
        if preset.likelihood.form is LikelihoodForm.GAUSSIAN:
            raise ConfigError("nb_dispersion", "only applies to count likelihoods")
        if not nb_dispersion > 0:
            raise ConfigError("nb_dispersion", f"must be positive, got {nb_dispersion}")
        lik = dataclasses.replace(preset.likelihood, r=float(nb_dispersion))
        preset = dataclasses.replace(preset, likelihood=lik)
    return preset_name, preset, cfg


def write_embedding(path, cell_ids, coords) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["cell_id", *[f"x{q + 1}" for q in range(coords.shape[1])]])
    for cid, row in zip(cell_ids, coords):
        writer.writerow([cid, *[repr(float(v)) for v in row]])
    atomic_write_text(path, buf.getvalue())


def read_embedding(path):
    """Return ``(cell_ids, coords)``; non-numeric entries raise ``ParseError``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["cell_id"]:
        raise ParseError(f"{path}: embedding needs a cell_id header column")
    width = len(rows[0])
    ids, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise ParseError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        ids.append(row[0])
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    return ids, np.array(values, dtype=np.float64).reshape(len(ids), width - 1)


def cmd_train(args) -> int:
    import torch

    from .data import filter_qc, load_dataset
    from .svgp import export_latents
    from .trainer import build_model, save_checkpoint, train

    out = Path(args.out)
    preset_name, preset, cfg = _train_setup(args)
    ds = load_dataset(args.data, format=args.format, meta_path=args.meta)
    if not args.no_qc:
        ds = filter_qc(ds)

    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out, "train", args.argv)
    manifest.data["seed"] = cfg.seed
    manifest.data["config"] = {
        "preset": preset_name,
        "train": cfg.to_dict(),
        "qc": not args.no_qc,
        "format": args.format,
        "n_cells": ds.n_cells,
        "n_genes": ds.n_genes,
    }
    manifest.add_input("data", args.data)
    if args.meta:
        manifest.add_input("meta", args.meta)
    if args.config:
        manifest.add_input("config", args.config)
    manifest.write()

    torch.manual_seed(cfg.seed)
    model, data = build_model(ds, preset, cfg)
    manifest.data["config"]["pipeline"] = data.processed.pipeline_tag
    manifest.data["config"]["model"] = model.config.to_dict()
    manifest.write()

    def progress(epoch, value):
        if not args.quiet:
            print(f"epoch {epoch + 1:4d}  mean ELBO {value:.6e}", flush=True)

    ckpt_dir = out / "checkpoints"
    model, log = train(model, data, cfg, out_dir=ckpt_dir, progress=progress)
    save_checkpoint(model, out / "model", step=len(log.steps), epoch=cfg.epochs)

    log_path, emb_path, var_path = out / "train_log.csv", out / "embedding.csv", out / "embedding_var.csv"
    # wall-clock timings are kept out of the log so reruns are byte-identical
    atomic_write_text(log_path, log.to_csv(include_timing=False))
    post = export_latents(model, data.enc_in, data.phi)
    write_embedding(emb_path, ds.cell_ids, post.mean.numpy())
    write_embedding(var_path, ds.cell_ids, post.var.numpy())
    for name, path in (
        ("model", out / "model.json"),
        ("checkpoints", ckpt_dir),
        ("train_log", log_path),
        ("embedding", emb_path),
        ("embedding_var", var_path),
    ):
        manifest.add_output(name, path)
    timings = [s.wall_ms for s in log.steps]
    manifest.data["timing"] = {"steps": len(timings), "mean_step_ms": float(np.mean(timings))}
    manifest.finish()
    print(f"trained {preset_name} for {cfg.epochs} epochs; final ELBO {log.steps[-1].elbo:.6e}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def cmd_eval(args) -> int:
    from .data import read_metadata
    from .metrics import LatentEmbedding, evaluate

    out = Path(args.out)
    if args.knn < 1:
        raise ConfigError("knn", "must be >= 1")
    if not args.resolution > 0:
        raise ConfigError("resolution", "must be positive")
    ids, coords = read_embedding(args.embedding)
    meta_ids, batch, celltype = read_metadata(Path(args.meta))
    if celltype is None:
        raise ConfigError("meta", "metadata has no celltype column; evaluation needs labels")
    index = {cid: k for k, cid in enumerate(meta_ids)}
    missing = [cid for cid in ids if cid not in index]
    if missing:
        raise ShapeMismatch(f"{len(missing)} embedded cells missing from metadata, e.g. {missing[0]!r}")
    if not np.all(np.isfinite(coords)):
        raise ConfigError("embedding", "embedding contains non-finite values")
    order = [index[cid] for cid in ids]
    batch = np.array([batch[k] for k in order])
    celltype = np.array([celltype[k] for k in order])

    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out, "eval", args.argv)
    manifest.data["seed"] = args.seed
    manifest.data["config"] = {"knn": args.knn, "resolution": args.resolution}
    manifest.add_input("embedding", args.embedding)
    manifest.add_input("meta", args.meta)
    manifest.write()

    report = evaluate(LatentEmbedding(coords, cell_ids=tuple(ids)), batch, celltype, args.knn, args.resolution, args.seed)
    metrics_path = out / "metrics.json"
    atomic_write_text(metrics_path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest.add_output("metrics", metrics_path)
    manifest.finish()
    print(f"avg_bio {report.avg_bio:.4f}")
    print(f"avg_batch {report.avg_batch:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck
# --------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from .simulate import SimConfig, simulate
    from .trainer import TrainConfig, ablation_presets, build_model, gradcheck

    out = Path(args.out)
    presets = args.preset or ["proposed", "gaussian_likelihood", "linear_kernel", "learned_library"]
    for name in presets:
        ablation_presets(name)
    # M <= Q + 1 keeps the linear-kernel K_MM nonsingular at uniform pseudo-covariates
    cfg = TrainConfig(seed=args.seed, q_latent=2, n_inducing=3, hidden_dims=(6,), batch_size=5)
    sim = SimConfig(n_cells_per_batch=6, n_genes=7, n_groups=2, n_batches=2, lib_loc=float(np.log(200.0)), seed=args.seed)
    ds = simulate(sim)

    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out, "gradcheck", args.argv)
    manifest.data["seed"] = args.seed
    manifest.data["config"] = {"presets": presets, "tolerance": args.tol, "train": cfg.to_dict(), "sim": sim.to_dict()}
    manifest.write()

    results, worst = {}, 0.0
    for name in presets:
        model, data = build_model(ds, ablation_presets(name), cfg)
        errs = gradcheck(model, data, cfg, seed=args.seed)
        results[name] = errs
        worst = max([worst, *errs.values()])
        print(f"{name:20s} " + "  ".join(f"{g}={e:.2e}" for g, e in errs.items()))
    path = out / "gradcheck.json"
    atomic_write_text(path, json.dumps({"max_rel_error": results, "worst": worst, "tolerance": args.tol}, indent=2, sort_keys=True) + "\n")
    manifest.add_output("gradcheck", path)
    ok = worst < args.tol
    manifest.finish("ok" if ok else "failed")
    print(f"worst {worst:.3e} ({'ok' if ok else 'FAILED'} at tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, default=None, help="torch thread count (1 = bit-deterministic)")

    parser = argparse.ArgumentParser(prog="scgplvm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a count dataset")
    p.add_argument("--config", help="SimConfig JSON; flags override its entries")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-cells-per-batch", dest="n_cells_per_batch", type=int)
    p.add_argument("--n-genes", dest="n_genes", type=int)
    p.add_argument("--n-groups", dest="n_groups", type=int)
    p.add_argument("--n-batches", dest="n_batches", type=int)
    p.add_argument("--mean-shape", dest="mean_shape", type=float)
    p.add_argument("--mean-rate", dest="mean_rate", type=float)
    p.add_argument("--de-prob", dest="de_prob", type=float)
    p.add_argument("--de-logfc-sigma", dest="de_logfc_sigma", type=float)
    p.add_argument("--batch-logfc-sigma", dest="batch_logfc_sigma", type=float)
    p.add_argument("--lib-loc", dest="lib_loc", type=float)
    p.add_argument("--lib-scale", dest="lib_scale", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train a model and export the latent embedding")
    p.add_argument("--config", help="TrainConfig JSON (may also hold 'preset' and 'nb_dispersion')")
    p.add_argument("--data", required=True, help="count matrix")
    p.add_argument("--meta", help="metadata CSV (default: <stem>.meta.csv)")
    p.add_argument("--format", default="csv", choices=["csv", "mtx_triplet"])
    p.add_argument("--preset", help="proposed | simple_nn | gaussian_likelihood | linear_kernel | learned_library")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--q-latent", dest="q_latent", type=int)
    p.add_argument("--n-inducing", dest="n_inducing", type=int)
    p.add_argument("--n-mc", dest="n_mc", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--nb-scale", dest="nb_scale", type=float, help="library-size normalization target")
    p.add_argument("--nb-dispersion", dest="nb_dispersion", type=float, help="inverse dispersion r of count likelihoods")
    p.add_argument("--no-qc", dest="no_qc", action="store_true", help="skip cell/gene QC filtering")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score an embedding against labels")
    p.add_argument("--embedding", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--knn", type=int, default=15)
    p.add_argument("--resolution", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="autograd vs finite differences on a toy model")
    p.add_argument("--preset", action="append", help="repeatable; default: four ablation presets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    args.argv = argv
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        import torch

        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnknownPreset, PipelineMismatch, ShapeMismatch, LengthMismatch, SingleClass, ZeroRow) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, NotPositiveDefinite, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, json.JSONDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
