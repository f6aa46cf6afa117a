"""Adam training loop, ablation presets, checkpoints, and finite-difference gradient checks."""

from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .data import (
    LIBRARY_NORMALIZED,
    LOG_GAUSSIAN,
    RAW_COUNTS,
    CountDataset,
    ProcessedMatrix,
    gaussian_pipeline,
    library_normalize,
    one_hot_design,
    raw_counts,
)
from .encoder import EncoderForm, EncoderSpec
from .errors import ConfigError, NonFiniteLoss, PipelineMismatch, UnknownPreset
from .kernels import DTYPE, KernelForm, KernelSpec
from .likelihoods import LikelihoodForm, LikelihoodSpec
from .svgp import BGPLVM, Batch, ModelConfig, elbo_minibatch


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 300
    lr: float = 0.05
    epochs: int = 50
    seed: int = 0
    q_latent: int = 10
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    n_mc: int = 1
    checkpoint_every: int = 5
    n_inducing: int = 64
    hidden_dims: tuple = (128, 128)
    library_target: float = 5000.0

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if not self.lr >= 0:
            raise ConfigError("lr", "must be nonnegative")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if self.q_latent < 1:
            raise ConfigError("q_latent", "must be >= 1")
        if self.n_mc < 1:
            raise ConfigError("n_mc", "must be >= 1")
        if self.n_inducing < 1:
            raise ConfigError("n_inducing", "must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed", "must be unsigned")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["adam_betas"] = list(self.adam_betas)
        out["hidden_dims"] = list(self.hidden_dims)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(key, "unknown training option")
        return cls(**raw)


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Preset:
    name: str
    kernel_form: KernelForm
    likelihood: LikelihoodSpec
    encoder_form: EncoderForm
    pipeline: str


PRESET_NAMES = ("proposed", "simple_nn", "gaussian_likelihood", "linear_kernel", "learned_library")


def ablation_presets(name: str) -> Preset:
    """Model variant for one arm of the ablation: the proposed model, or the
    proposed model with exactly one component swapped out."""
    base = dict(
        kernel_form=KernelForm.SEARD_PLUS_LINEAR,
        likelihood=LikelihoodSpec(LikelihoodForm.APPROX_POISSON),
        encoder_form=EncoderForm.BATCH_AWARE_NN,
        pipeline=LIBRARY_NORMALIZED,
    )
    if name == "proposed":
        pass
    elif name == "simple_nn":
        base["encoder_form"] = EncoderForm.SIMPLE_NN
    elif name == "gaussian_likelihood":
        base["likelihood"] = LikelihoodSpec(LikelihoodForm.GAUSSIAN)
        base["pipeline"] = LOG_GAUSSIAN
    elif name == "linear_kernel":
        base["kernel_form"] = KernelForm.AUGMENTED_LINEAR
    elif name == "learned_library":
        base["likelihood"] = LikelihoodSpec(LikelihoodForm.NB_LEARNED_SCALE)
        base["pipeline"] = RAW_COUNTS
    else:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    return Preset(name=name, **base)


# --------------------------------------------------------------------------
# data and model assembly
# --------------------------------------------------------------------------


@dataclass
class TrainingData:
    processed: ProcessedMatrix
    y: torch.Tensor
    enc_in: torch.Tensor
    phi: torch.Tensor
    library_sizes: np.ndarray
    batch_levels: tuple

    @property
    def n_cells(self) -> int:
        return self.y.shape[0]

    def batch(self, index) -> Batch:
        index = torch.as_tensor(np.asarray(index), dtype=torch.long)
        return Batch(self.y[index], self.enc_in[index], self.phi[index], index)


def preprocess(ds: CountDataset, pipeline: str, target: float = 5000.0, standardize: bool = False) -> ProcessedMatrix:
    if pipeline == LIBRARY_NORMALIZED:
        return library_normalize(ds, target)
    if pipeline == LOG_GAUSSIAN:
        return gaussian_pipeline(ds, target, standardize=standardize)
    if pipeline == RAW_COUNTS:
        return raw_counts(ds)
    raise ValueError(f"unknown pipeline {pipeline!r}")


def prepare_data(ds: CountDataset, processed: ProcessedMatrix, target: float = 5000.0) -> TrainingData:
    """Bundle likelihood targets with encoder inputs (``log1p`` of library-normalized rows)."""
    design = one_hot_design(ds.batch_labels)
    enc_in = np.log1p(library_normalize(ds, target).values)
    return TrainingData(
        processed=processed,
        y=torch.as_tensor(processed.values, dtype=DTYPE),
        enc_in=torch.as_tensor(enc_in, dtype=DTYPE),
        phi=torch.as_tensor(design.phi, dtype=DTYPE),
        library_sizes=ds.counts.sum(axis=1).astype(np.float64),
        batch_levels=design.levels,
    )


def _batch_means(values: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """``D x D_covar`` per-batch column means."""
    return (phi.T @ values / phi.sum(axis=0)[:, None]).T


def init_mean_params(model: BGPLVM, data: TrainingData) -> None:
    """Start the covariate effects at per-batch gene means on the link scale."""
    phi = data.phi.numpy()
    y = data.processed.values
    form = model.likelihood.form
    if form is LikelihoodForm.GAUSSIAN:
        effects = _batch_means(y, phi)
    else:
        if form is LikelihoodForm.NB_LEARNED_SCALE:
            y = y / np.maximum(y.sum(axis=1, keepdims=True), 1.0)
        else:
            y = y / model.likelihood.spec.scale
        props = _batch_means(y, phi)
        effects = np.log(props + 1e-3 / y.shape[1])
        effects -= effects.mean()
    effects = torch.as_tensor(effects, dtype=DTYPE)
    with torch.no_grad():
        if model.kernel_spec.form is KernelForm.AUGMENTED_LINEAR:
            model.kernel.w[:, model.config.q_latent :] = effects
        else:
            model.kernel.zeta.copy_(effects)


def build_model(
    ds: CountDataset,
    preset: Preset,
    cfg: TrainConfig,
    standardize: bool = False,
    init_means: bool = True,
):
    """Construct ``(model, data)`` for a preset; the model seed is ``cfg.seed``."""
    processed = preprocess(ds, preset.pipeline, cfg.library_target, standardize)
    lik_spec = preset.likelihood
    if lik_spec.form is LikelihoodForm.APPROX_POISSON and lik_spec.scale != cfg.library_target:
        lik_spec = LikelihoodSpec(lik_spec.form, lik_spec.sigma_y2, cfg.library_target, lik_spec.r)
    data = prepare_data(ds, processed, cfg.library_target)
    d_covar = data.phi.shape[1]
    config = ModelConfig(
        kernel=KernelSpec(preset.kernel_form, cfg.q_latent, d_covar),
        likelihood=lik_spec,
        encoder=EncoderSpec(preset.encoder_form, ds.n_genes, cfg.q_latent, cfg.hidden_dims, d_covar),
        n_genes=ds.n_genes,
        n_cells=ds.n_cells,
        n_inducing=cfg.n_inducing,
        seed=cfg.seed,
    )
    model = BGPLVM(config, library_sizes=data.library_sizes)
    model.likelihood.check_pipeline(processed)
    if init_means:
        init_mean_params(model, data)
    return model, data


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    epoch: int
    elbo: float
    ell: float
    klx: float
    klu: float
    wall_ms: float


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)

    def epoch_means(self) -> np.ndarray:
        if not self.steps:
            return np.zeros(0)
        epochs = np.array([r.epoch for r in self.steps])
        elbos = np.array([r.elbo for r in self.steps])
        return np.array([elbos[epochs == e].mean() for e in np.unique(epochs)])

    def elbos(self) -> np.ndarray:
        return np.array([r.elbo for r in self.steps])

    def to_csv(self, path=None, include_timing: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = ["step", "epoch", "elbo", "ell", "klx", "klu"] + (["wall_ms"] if include_timing else [])
        writer.writerow(cols)
        for r in self.steps:
            row = [r.step, r.epoch, repr(r.elbo), repr(r.ell), repr(r.klx), repr(r.klu)]
            if include_timing:
                row.append(f"{r.wall_ms:.3f}")
            writer.writerow(row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(
    model: BGPLVM,
    data: TrainingData,
    cfg: TrainConfig,
    out_dir=None,
    progress: Optional[Callable[[int, float], None]] = None,
):
    """Maximize the ELBO with Adam over shuffled mini-batches.

    Returns ``(model, TrainLog)``. Checkpoints go to ``out_dir`` every
    ``cfg.checkpoint_every`` epochs when ``out_dir`` is given.
    """
    model.likelihood.check_pipeline(data.processed)
    if data.y.shape[1] != model.config.n_genes:
        raise PipelineMismatch("data and model disagree on the number of genes")
    N = data.n_cells
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)
    gen = torch.Generator().manual_seed(cfg.seed)
    log = TrainLog()
    model.train()
    step = 0
    for epoch in range(cfg.epochs):
        perm = epoch_permutation(cfg.seed, epoch, N)
        for start in range(0, N, cfg.batch_size):
            t0 = time.perf_counter()
            batch = data.batch(perm[start : start + cfg.batch_size])
            opt.zero_grad()
            elbo, parts = elbo_minibatch(model, batch, N, cfg.n_mc, gen)
            if not torch.isfinite(elbo):
                values = {k: float(v.detach()) for k, v in parts._asdict().items()}
                raise NonFiniteLoss(
                    f"non-finite ELBO at epoch {epoch}, step {step}: "
                    + ", ".join(f"{k}={v}" for k, v in values.items()),
                    values,
                )
            (-elbo).backward()
            opt.step()
            log.steps.append(
                StepRecord(
                    step,
                    epoch,
                    elbo.item(),
                    parts.ell.item(),
                    parts.klx.item(),
                    parts.klu.item(),
                    1e3 * (time.perf_counter() - t0),
                )
            )
            step += 1
        if progress is not None:
            progress(epoch, float(log.epoch_means()[-1]))
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, Path(out_dir) / f"ckpt_epoch{epoch + 1:04d}", step=step, epoch=epoch + 1)
    model.eval()
    return model, log


# --------------------------------------------------------------------------
# checkpoints: JSON manifest plus little-endian float64 blob
# --------------------------------------------------------------------------


def save_checkpoint(model: BGPLVM, stem, step: int = 0, epoch: int = 0, extra: Optional[dict] = None) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = {}
    chunks = []
    offset = 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f8")
        entries[name] = {"offset": offset, "shape": list(arr.shape), "dtype": str(tensor.dtype).replace("torch.", "")}
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size
    manifest = {
        "format": "scgplvm-checkpoint/1",
        "model": model.config.to_dict(),
        "step": step,
        "epoch": epoch,
        "blob": stem.name + ".bin",
        "arrays": entries,
    }
    if extra:
        manifest.update(extra)
    _atomic_write(stem.with_suffix(".bin"), b"".join(chunks))
    _atomic_write(stem.with_suffix(".json"), (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def load_checkpoint(stem) -> tuple:
    """Rebuild a model from ``<stem>.json`` + ``<stem>.bin``; returns ``(model, manifest)``."""
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    manifest = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    blob = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    model = BGPLVM(ModelConfig.from_dict(manifest["model"]))
    state = {}
    for name, meta in manifest["arrays"].items():
        size = int(np.prod(meta["shape"], dtype=np.int64))
        arr = blob[meta["offset"] : meta["offset"] + size].reshape(meta["shape"])
        dtype = getattr(torch, meta["dtype"])
        state[name] = torch.tensor(arr.copy(), dtype=dtype)
    model.load_state_dict(state)
    model.eval()
    return model, manifest


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# gradient checks
# --------------------------------------------------------------------------

PARAM_GROUPS = ("encoder", "kernel", "Z", "pseudo_phi", "m", "S_chol", "likelihood")


def param_group(name: str) -> str:
    if name.startswith("encoder."):
        return "encoder"
    if name.startswith("kernel."):
        return "kernel"
    if name.startswith("likelihood."):
        return "likelihood"
    return {"Z": "Z", "pseudo_phi_logits": "pseudo_phi", "m": "m", "raw_S_chol": "S_chol"}[name]


def gradcheck(
    model: BGPLVM,
    data: TrainingData,
    cfg: TrainConfig,
    n_params_sampled: int = 8,
    step: float = 1e-4,
    floor: float = 1e-3,
    batch_index=None,
    seed: int = 0,
) -> dict:
    """Compare reverse-mode ELBO gradients with fourth-order central differences.

    The ELBO estimate is frozen by reseeding the sampler for every
    evaluation. For each parameter group, ``n_params_sampled`` coordinates
    are drawn at random; the reported error per group is the max of
    ``|g - fd| / max(|g|, |fd|, floor)``.
    """
    model.train()
    if batch_index is None:
        batch_index = np.arange(min(cfg.batch_size, data.n_cells))
    batch = data.batch(batch_index)
    N = data.n_cells
    buffers = {k: v.clone() for k, v in model.named_buffers()}

    def restore():
        with torch.no_grad():
            for k, v in model.named_buffers():
                v.copy_(buffers[k])

    def evaluate():
        # batch-norm running stats move on every training-mode forward
        restore()
        gen = torch.Generator().manual_seed(seed)
        elbo, _ = elbo_minibatch(model, batch, N, cfg.n_mc, gen)
        return elbo

    model.zero_grad()
    evaluate().backward()

    rng = np.random.default_rng(seed)
    coords = {g: [] for g in PARAM_GROUPS}
    for name, p in model.named_parameters():
        for i in range(p.numel()):
            # strictly-upper entries of the raw Cholesky factor are masked out
            if name == "raw_S_chol" and (i % p.shape[-1]) > (i // p.shape[-1]) % p.shape[-2]:
                continue
            coords[param_group(name)].append((name, p, i))

    report = {}
    with torch.no_grad():
        for group, items in coords.items():
            if not items:
                continue
            picks = rng.choice(len(items), size=min(n_params_sampled, len(items)), replace=False)
            worst = 0.0
            for k in sorted(picks):
                name, p, i = items[k]
                flat = p.view(-1)
                orig = flat[i].item()
                vals = []
                for offset in (2, 1, -1, -2):
                    flat[i] = orig + offset * step
                    vals.append(evaluate().item())
                flat[i] = orig
                # fourth-order central difference
                fd = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * step)
                g = 0.0 if p.grad is None else p.grad.view(-1)[i].item()
                worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), floor))
            report[group] = worst
    restore()
    model.zero_grad()
    return report
