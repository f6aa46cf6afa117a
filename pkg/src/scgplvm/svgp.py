"""Sparse variational GP decoder and the doubly-stochastic mini-batch ELBO.

Each gene ``d`` has inducing outputs ``u_d`` at shared locations ``Z`` with
prior ``N(mu_u_d, K_MM)``, where ``mu_u_d`` is the GP mean function evaluated
at ``(Z, pseudo_phi)``. The variational factor is
``q(u_d) = N(mu_u_d + m_d, S_d)``: ``m`` is stored as the offset from the
prior mean, so ``m_d = 0`` and ``S_d = K_MM`` reproduce the prior. Marginals
at a cell are then ``mean = mu(x, d) + k_xM K_MM^-1 m_d`` and
``var = k(x, x) - k_xM K_MM^-1 k_Mx + k_xM K_MM^-1 S_d K_MM^-1 k_Mx``.

Inducing points carry a learned simplex row of pseudo-covariates so that the
covariate term of the kernel is defined between cells and inducing points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .encoder import Encoder, EncoderSpec, LatentPosterior
from .kernels import (
    DTYPE,
    KernelParams,
    KernelSpec,
    gram,
    gram_diag,
    jittered_cholesky,
    mean_function,
    softplus_inverse,
)
from .likelihoods import Likelihood, LikelihoodForm, LikelihoodSpec

F_VAR_FLOOR = 1e-10


@dataclass(frozen=True)
class ModelConfig:
    kernel: KernelSpec
    likelihood: LikelihoodSpec
    encoder: EncoderSpec
    n_genes: int
    n_cells: int
    n_inducing: int = 64
    seed: int = 0

    @property
    def q_latent(self) -> int:
        return self.kernel.q_latent

    @property
    def d_covar(self) -> int:
        return self.kernel.d_covar

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel.to_dict(),
            "likelihood": self.likelihood.to_dict(),
            "encoder": self.encoder.to_dict(),
            "n_genes": self.n_genes,
            "n_cells": self.n_cells,
            "n_inducing": self.n_inducing,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        return cls(
            kernel=KernelSpec.from_dict(raw["kernel"]),
            likelihood=LikelihoodSpec.from_dict(raw["likelihood"]),
            encoder=EncoderSpec.from_dict(raw["encoder"]),
            n_genes=raw["n_genes"],
            n_cells=raw["n_cells"],
            n_inducing=raw.get("n_inducing", 64),
            seed=raw.get("seed", 0),
        )


class BGPLVM(nn.Module):
    """Amortized Bayesian GPLVM: encoder, kernel, inducing posterior, likelihood."""

    def __init__(
        self,
        config: ModelConfig,
        kernel_params: Optional[KernelParams] = None,
        library_sizes=None,
        s_init: float = 0.1,
    ):
        super().__init__()
        if config.encoder.q_latent != config.q_latent:
            raise ValueError("encoder and kernel disagree on q_latent")
        self.config = config
        M, Q, Dc, D = config.n_inducing, config.q_latent, config.d_covar, config.n_genes
        if M < 1:
            raise ValueError("need at least one inducing point")

        self.kernel = kernel_params if kernel_params is not None else KernelParams(config.kernel, D)
        if library_sizes is None and config.likelihood.form is LikelihoodForm.NB_LEARNED_SCALE:
            library_sizes = np.ones(config.n_cells)
        self.likelihood = Likelihood(config.likelihood, library_sizes)
        self.encoder = Encoder(config.encoder, seed=config.seed)

        gen = torch.Generator().manual_seed(config.seed)
        self.Z = nn.Parameter(torch.randn(M, Q, generator=gen, dtype=DTYPE))
        self.pseudo_phi_logits = nn.Parameter(torch.zeros(M, Dc, dtype=DTYPE))
        self.m = nn.Parameter(torch.zeros(D, M, dtype=DTYPE))
        raw = torch.zeros(D, M, M, dtype=DTYPE)
        raw.diagonal(dim1=-2, dim2=-1).fill_(float(softplus_inverse(math.sqrt(s_init))))
        self.raw_S_chol = nn.Parameter(raw)
        self.floor_events = 0
        self.floor_checks = 0

    # ------------------------------------------------------------------
    @property
    def kernel_spec(self) -> KernelSpec:
        return self.config.kernel

    @property
    def pseudo_phi(self):
        return torch.softmax(self.pseudo_phi_logits, dim=-1)

    @property
    def S_chol(self):
        raw = self.raw_S_chol
        diag = F.softplus(raw.diagonal(dim1=-2, dim2=-1))
        return torch.tril(raw, diagonal=-1) + torch.diag_embed(diag)

    @property
    def S(self):
        L = self.S_chol
        return L @ L.transpose(-1, -2)

    def set_S(self, S):
        """Overwrite the inducing covariances (``D x M x M`` or one ``M x M`` for all genes)."""
        S = torch.as_tensor(S, dtype=DTYPE)
        L = torch.linalg.cholesky(S).expand_as(self.raw_S_chol)
        with torch.no_grad():
            raw = torch.tril(L, diagonal=-1).clone()
            raw.diagonal(dim1=-2, dim2=-1).copy_(softplus_inverse(L.diagonal(dim1=-2, dim2=-1)))
            self.raw_S_chol.copy_(raw)

    def inducing_prior_mean(self):
        """``M x D`` prior mean of the inducing outputs."""
        return mean_function(self.kernel_spec, self.kernel, self.Z, self.pseudo_phi)

    def kmm_factor(self):
        Kmm = gram(self.kernel_spec, self.kernel, self.Z, self.pseudo_phi)
        return jittered_cholesky(Kmm)

    def kmm(self):
        L, jitter = self.kmm_factor()
        return L @ L.T


class FMarginal(NamedTuple):
    mean: torch.Tensor  # A x D
    var: torch.Tensor  # A x D
    raw_var: torch.Tensor  # before flooring


def predict_f(model: BGPLVM, X, Phi, L=None) -> FMarginal:
    """Marginal ``q(f_d(x))`` for every row of ``X`` and every gene."""
    spec, p = model.kernel_spec, model.kernel
    if L is None:
        L, _ = model.kmm_factor()
    Kmx = gram(spec, p, model.Z, model.pseudo_phi, X, Phi)
    A = torch.linalg.solve_triangular(L, Kmx, upper=False)
    W = torch.linalg.solve_triangular(L.T, A, upper=True)  # K_MM^-1 K_Mx
    mean = mean_function(spec, p, X, Phi) + W.T @ model.m.T
    T = model.S_chol.transpose(-1, -2) @ W  # D x M x A
    raw_var = gram_diag(spec, p, X, Phi)[:, None] - (A * A).sum(0)[:, None] + (T * T).sum(1).T
    var = raw_var.clamp_min(F_VAR_FLOOR)
    with torch.no_grad():
        model.floor_events += int((raw_var < F_VAR_FLOOR).sum())
        model.floor_checks += raw_var.numel()
    return FMarginal(mean, var, raw_var)


def q_f_marginal(model: BGPLVM, x, phi, d: int):
    """Mean and variance of ``q(f_d(x))`` for a single latent point."""
    if not 0 <= d < model.config.n_genes:
        raise IndexError(f"gene index {d} out of range")
    X = torch.as_tensor(x, dtype=DTYPE).reshape(1, -1)
    Phi = torch.as_tensor(phi, dtype=DTYPE).reshape(1, -1)
    out = predict_f(model, X, Phi)
    return out.mean[0, d], out.var[0, d]


def kl_qx(mean, var):
    """KL(N(mean, diag var) || N(0, I)) summed over the last axis."""
    mean = torch.as_tensor(mean, dtype=DTYPE)
    var = torch.as_tensor(var, dtype=DTYPE)
    return 0.5 * (var + mean * mean - 1.0 - torch.log(var)).sum(-1)


def kl_qu_all(model: BGPLVM, L=None):
    """Per-gene KL(q(u_d) || p(u_d | Z)) as a length-D vector."""
    if L is None:
        L, _ = model.kmm_factor()
    M = L.shape[0]
    Sc = model.S_chol
    LinvS = torch.linalg.solve_triangular(L.expand_as(Sc), Sc, upper=False)
    trace = (LinvS * LinvS).sum((-2, -1))
    alpha = torch.linalg.solve_triangular(L, model.m.T, upper=False)
    maha = (alpha * alpha).sum(0)
    logdet_K = 2.0 * torch.log(L.diagonal()).sum()
    logdet_S = 2.0 * torch.log(Sc.diagonal(dim1=-2, dim2=-1)).sum(-1)
    return 0.5 * (trace + maha - M + logdet_K - logdet_S)


def kl_qu(model: BGPLVM, d: int):
    if not 0 <= d < model.config.n_genes:
        raise IndexError(f"gene index {d} out of range")
    return kl_qu_all(model)[d]


# --------------------------------------------------------------------------
# ELBO
# --------------------------------------------------------------------------


@dataclass
class Batch:
    """Rows of one mini-batch: likelihood targets, encoder inputs, one-hots, cell indices."""

    y: torch.Tensor
    enc_in: torch.Tensor
    phi: torch.Tensor
    index: torch.Tensor

    @property
    def size(self) -> int:
        return self.y.shape[0]


def sample_latents(post: LatentPosterior, n_mc: int, generator: Optional[torch.Generator] = None):
    """Reparameterized draws ``mean + sqrt(var) * eps``, shape ``n_mc x B x Q``."""
    eps = torch.randn((n_mc, *post.mean.shape), generator=generator, dtype=DTYPE)
    return post.mean + torch.sqrt(post.var) * eps


class ElboParts(NamedTuple):
    ell: torch.Tensor
    klx: torch.Tensor
    klu: torch.Tensor


def elbo_minibatch(
    model: BGPLVM,
    batch: Batch,
    n_total: int,
    n_mc: int = 1,
    generator: Optional[torch.Generator] = None,
    analytic_gaussian: bool = False,
):
    """Unbiased estimate of the ELBO from one mini-batch.

    ``x`` and ``f`` are both drawn by reparameterization from ``generator``.
    With ``analytic_gaussian`` the Gaussian likelihood's expectation over
    ``f`` is taken in closed form instead of by sampling. Returns
    ``(elbo, ElboParts(ell, klx, klu))``.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    B = batch.size
    if B < 1:
        raise ValueError("empty batch")
    scale = n_total / B
    post = model.encoder(batch.enc_in, batch.phi)

    L, _ = model.kmm_factor()
    X = sample_latents(post, n_mc, generator).reshape(n_mc * B, -1)
    Phi = batch.phi.repeat(n_mc, 1)
    fm = predict_f(model, X, Phi, L)
    fmean = fm.mean.reshape(n_mc, B, -1)
    fvar = fm.var.reshape(n_mc, B, -1)

    lik = model.likelihood
    if analytic_gaussian and lik.form is LikelihoodForm.GAUSSIAN:
        s2 = lik.sigma_y2
        ll = (
            -0.5 * (math.log(2 * math.pi) + torch.log(s2) + ((batch.y - fmean) ** 2 + fvar) / s2)
        ).sum(-1)
    else:
        eps_f = torch.randn(fmean.shape, generator=generator, dtype=DTYPE)
        f = fmean + torch.sqrt(fvar) * eps_f
        ll = lik.log_prob(batch.y, f, batch.index)

    ell = scale * ll.mean(0).sum()
    klx = scale * kl_qx(post.mean, post.var).sum()
    klu = kl_qu_all(model, L).sum()
    return ell - klx - klu, ElboParts(ell, klx, klu)


def elbo_grad(model: BGPLVM, batch: Batch, n_total: int, n_mc: int = 1, seed: int = 0, **kw) -> dict:
    """Reverse-mode gradient of the ELBO estimate drawn with ``seed``, keyed by parameter name."""
    model.zero_grad()
    gen = torch.Generator().manual_seed(seed)
    elbo, _ = elbo_minibatch(model, batch, n_total, n_mc, gen, **kw)
    elbo.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }


@torch.no_grad()
def export_latents(model: BGPLVM, enc_in, phi, chunk_size: int = 1024) -> LatentPosterior:
    """Eval-mode posterior for every cell, encoded in chunks."""
    enc_in = torch.as_tensor(enc_in, dtype=DTYPE)
    phi = torch.as_tensor(phi, dtype=DTYPE)
    was_training = model.encoder.training
    model.encoder.eval()
    try:
        means, variances = [], []
        for start in range(0, enc_in.shape[0], chunk_size):
            post = model.encoder(enc_in[start : start + chunk_size], phi[start : start + chunk_size])
            means.append(post.mean)
            variances.append(post.var)
    finally:
        model.encoder.train(was_training)
    return LatentPosterior(torch.cat(means), torch.cat(variances))
