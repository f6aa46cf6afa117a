"""Amortized Gaussian posterior over latent positions.

Two wirings are supported: separate mean and variance networks (default), or
one shared trunk feeding two linear heads. ``BatchAwareNN`` appends the batch
one-hot to the input and puts batch normalization after every hidden linear
layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum
from typing import NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ShapeMismatch
from .kernels import DTYPE

VAR_FLOOR = 1e-6


class EncoderForm(str, Enum):
    SIMPLE_NN = "SimpleNN"
    BATCH_AWARE_NN = "BatchAwareNN"


@dataclass(frozen=True)
class EncoderSpec:
    form: EncoderForm
    input_dim: int
    q_latent: int = 10
    hidden_dims: tuple = (128, 128)
    d_covar: int = 1
    shared_trunk: bool = False

    def __post_init__(self):
        object.__setattr__(self, "form", EncoderForm(self.form))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.q_latent < 1 or self.input_dim < 1:
            raise ValueError("q_latent and input_dim must be >= 1")

    @property
    def batch_aware(self) -> bool:
        return self.form is EncoderForm.BATCH_AWARE_NN

    def to_dict(self) -> dict:
        out = asdict(self)
        out["form"] = self.form.value
        out["hidden_dims"] = list(self.hidden_dims)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "EncoderSpec":
        return cls(**raw)


class LatentPosterior(NamedTuple):
    mean: torch.Tensor
    var: torch.Tensor


class _BatchNorm(nn.BatchNorm1d):
    # a single-row batch has no batch variance; fall back to running statistics
    def forward(self, x):
        if self.training and x.shape[0] == 1:
            return F.batch_norm(
                x, self.running_mean, self.running_var, self.weight, self.bias, False, 0.0, self.eps
            )
        return super().forward(x)


def _mlp(in_dim, hidden_dims, out_dim, batch_norm):
    layers = []
    for h in hidden_dims:
        layers.append(nn.Linear(in_dim, h, dtype=DTYPE))
        if batch_norm:
            layers.append(_BatchNorm(h, dtype=DTYPE))
        layers.append(nn.Softplus())
        in_dim = h
    if out_dim is not None:
        layers.append(nn.Linear(in_dim, out_dim, dtype=DTYPE))
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    def __init__(self, spec: EncoderSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        in_dim = spec.input_dim + (spec.d_covar if spec.batch_aware else 0)
        bn = spec.batch_aware
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            if spec.shared_trunk:
                self.trunk = _mlp(in_dim, spec.hidden_dims, None, bn)
                width = spec.hidden_dims[-1] if spec.hidden_dims else in_dim
                self.mean_net = nn.Linear(width, spec.q_latent, dtype=DTYPE)
                self.var_net = nn.Linear(width, spec.q_latent, dtype=DTYPE)
            else:
                self.trunk = None
                self.mean_net = _mlp(in_dim, spec.hidden_dims, spec.q_latent, bn)
                self.var_net = _mlp(in_dim, spec.hidden_dims, spec.q_latent, bn)

    def forward(self, rows, phi=None) -> LatentPosterior:
        if rows.ndim != 2 or rows.shape[1] != self.spec.input_dim:
            raise ShapeMismatch(f"expected (B, {self.spec.input_dim}) rows, got {tuple(rows.shape)}")
        if self.spec.batch_aware:
            if phi is None or phi.shape != (rows.shape[0], self.spec.d_covar):
                raise ShapeMismatch(f"batch-aware encoder needs ({rows.shape[0]}, {self.spec.d_covar}) one-hots")
            h = torch.cat([rows, phi], dim=1)
        else:
            h = rows
        if self.trunk is not None:
            h = self.trunk(h)
        mean = self.mean_net(h)
        var = F.softplus(self.var_net(h)) + VAR_FLOOR
        return LatentPosterior(mean, var)


def encode(encoder: Encoder, rows, phi=None, mode: str = "eval") -> LatentPosterior:
    """Run ``encoder`` in ``mode`` ("train" or "eval"), restoring its previous mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    was_training = encoder.training
    encoder.train(mode == "train")
    try:
        return encoder(torch.as_tensor(rows, dtype=DTYPE), None if phi is None else torch.as_tensor(phi, dtype=DTYPE))
    finally:
        encoder.train(was_training)


def encoder_grad_check(
    encoder: Encoder, rows, phi=None, mode: str = "eval", step: float = 1e-6, floor: float = 1.0
) -> float:
    """Max error between autograd and central differences of
    ``sum(mean) + sum(var)`` over every encoder parameter entry.

    Errors are ``|g - fd| / max(|g|, |fd|, floor)``: relative for gradients
    larger than ``floor``, absolute below it.
    """
    rows = torch.as_tensor(rows, dtype=DTYPE)
    phi = None if phi is None else torch.as_tensor(phi, dtype=DTYPE)
    buffers = {k: v.clone() for k, v in encoder.named_buffers()}

    def loss():
        # training-mode forwards update running stats; start every evaluation from the same state
        with torch.no_grad():
            for k, v in encoder.named_buffers():
                v.copy_(buffers[k])
        post = encode(encoder, rows, phi, mode)
        return post.mean.sum() + post.var.sum()

    encoder.zero_grad()
    loss().backward()
    worst = 0.0
    with torch.no_grad():
        for p in encoder.parameters():
            grad = torch.zeros_like(p) if p.grad is None else p.grad
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss().item()
                flat[i] = orig - step
                down = loss().item()
                flat[i] = orig
                fd = (up - down) / (2 * step)
                g = grad.view(-1)[i].item()
                err = abs(g - fd) / max(abs(g), abs(fd), floor)
                worst = max(worst, err)
        for k, v in encoder.named_buffers():
            v.copy_(buffers[k])
    return worst
