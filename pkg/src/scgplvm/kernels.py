"""Covariance functions with covariate correction, GP mean functions, and jittered Cholesky.

All tensors are float64 torch tensors so that reverse-mode gradients can be
checked against finite differences. Latent inputs are ``A x Q`` matrices and
covariate rows are ``A x D_covar`` (one-hot for cells, simplex rows for
inducing points).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F

from .errors import NotPositiveDefinite, ShapeMismatch

DTYPE = torch.float64


class KernelForm(str, Enum):
    SEARD_PLUS_LINEAR = "SEARD_plus_Linear"
    PERSEARD_PLUS_LINEAR = "PerSEARD_plus_Linear"
    AUGMENTED_LINEAR = "AugmentedLinear"


@dataclass(frozen=True)
class KernelSpec:
    form: KernelForm
    q_latent: int
    d_covar: int
    # drop latent dim 0 from the SE factor of the periodic kernel
    exclude_periodic_dim: bool = False

    def __post_init__(self):
        object.__setattr__(self, "form", KernelForm(self.form))
        if self.q_latent < 1:
            raise ValueError("q_latent must be >= 1")
        if self.d_covar < 1:
            raise ValueError("d_covar must be >= 1")
        if self.exclude_periodic_dim and self.q_latent < 2 and self.form is KernelForm.PERSEARD_PLUS_LINEAR:
            raise ValueError("exclude_periodic_dim needs q_latent >= 2")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["form"] = self.form.value
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "KernelSpec":
        return cls(**raw)


def softplus_inverse(y):
    y = torch.as_tensor(y, dtype=DTYPE)
    if torch.any(y <= 0):
        raise ValueError("softplus_inverse needs positive input")
    return y + torch.log(-torch.expm1(-y))


def _positive(raw):
    return F.softplus(raw)


class KernelParams(nn.Module):
    """Kernel and mean-function hyperparameters.

    Positive quantities are stored unconstrained and mapped through softplus.
    ``zeta`` holds one covariate-effect row per gene; ``w`` (augmented linear
    form only) holds one linear-mean row of length ``Q + D_covar`` per gene.
    """

    def __init__(
        self,
        spec: KernelSpec,
        n_genes: int,
        sigma_f2: float = 1.0,
        lengthscales=1.0,
        nu: float = 0.1,
        period_lengthscale: float = 1.0,
        mu_f: float = 0.0,
        zeta=None,
        w=None,
    ):
        super().__init__()
        self.spec = spec
        self.n_genes = n_genes
        Q, Dc = spec.q_latent, spec.d_covar
        ls = torch.as_tensor(lengthscales, dtype=DTYPE).expand(Q).clone()
        self.raw_sigma_f2 = nn.Parameter(softplus_inverse(sigma_f2))
        self.raw_lengthscales = nn.Parameter(softplus_inverse(ls))
        self.raw_nu = nn.Parameter(softplus_inverse(nu))
        self.raw_period_lengthscale = nn.Parameter(softplus_inverse(period_lengthscale))
        self.mu_f = nn.Parameter(torch.as_tensor(float(mu_f), dtype=DTYPE))
        zeta = torch.zeros(n_genes, Dc, dtype=DTYPE) if zeta is None else torch.as_tensor(zeta, dtype=DTYPE).clone()
        if zeta.shape != (n_genes, Dc):
            raise ShapeMismatch(f"zeta must be {(n_genes, Dc)}, got {tuple(zeta.shape)}")
        self.zeta = nn.Parameter(zeta)
        if spec.form is KernelForm.AUGMENTED_LINEAR:
            w = torch.zeros(n_genes, Q + Dc, dtype=DTYPE) if w is None else torch.as_tensor(w, dtype=DTYPE).clone()
            if w.shape != (n_genes, Q + Dc):
                raise ShapeMismatch(f"w must be {(n_genes, Q + Dc)}, got {tuple(w.shape)}")
            self.w = nn.Parameter(w)
        else:
            self.w = None

    @property
    def sigma_f2(self):
        return _positive(self.raw_sigma_f2)

    @property
    def lengthscales(self):
        return _positive(self.raw_lengthscales)

    @property
    def nu(self):
        return _positive(self.raw_nu)

    @property
    def period_lengthscale(self):
        return _positive(self.raw_period_lengthscale)


# --------------------------------------------------------------------------
# kernel pieces (block form; the scalar ops below are thin wrappers)
# --------------------------------------------------------------------------


def se_ard_factor(X, X2, lengthscales):
    """``exp(-sum_q (x_q - x2_q)^2 / (2 l_q^2))`` for every row pair."""
    diff = (X[:, None, :] - X2[None, :, :]) / lengthscales
    return torch.exp(-0.5 * (diff * diff).sum(-1))


def periodic_factor(x1, x1b, period_lengthscale):
    """``exp(-2 sin^2(|x1 - x1b| / 2) / l^2)`` for column vectors ``x1``, ``x1b``."""
    s = torch.sin(torch.abs(x1[:, None] - x1b[None, :]) / 2.0)
    return torch.exp(-2.0 * s * s / period_lengthscale**2)


def k_se_ard(x, x2, p: KernelParams):
    x, x2 = torch.as_tensor(x, dtype=DTYPE), torch.as_tensor(x2, dtype=DTYPE)
    return p.sigma_f2 * se_ard_factor(x.reshape(1, -1), x2.reshape(1, -1), p.lengthscales)[0, 0]


def k_linear_covariates(phi_i, phi_j, p: KernelParams):
    phi_i, phi_j = torch.as_tensor(phi_i, dtype=DTYPE), torch.as_tensor(phi_j, dtype=DTYPE)
    return p.nu * torch.dot(phi_i, phi_j)


def k_periodic(x1, x1b, p: KernelParams):
    x1 = torch.as_tensor(x1, dtype=DTYPE).reshape(1)
    x1b = torch.as_tensor(x1b, dtype=DTYPE).reshape(1)
    return periodic_factor(x1, x1b, p.period_lengthscale)[0, 0]


def k_augmented_linear(xt_i, xt_j, p: KernelParams):
    xt_i, xt_j = torch.as_tensor(xt_i, dtype=DTYPE), torch.as_tensor(xt_j, dtype=DTYPE)
    return p.nu * torch.dot(xt_i, xt_j)


def _check_shapes(spec, X, Phi, name):
    if X.ndim != 2 or X.shape[1] != spec.q_latent:
        raise ShapeMismatch(f"{name}: expected (*, {spec.q_latent}) latents, got {tuple(X.shape)}")
    if Phi.ndim != 2 or Phi.shape != (X.shape[0], spec.d_covar):
        raise ShapeMismatch(f"{name}: expected ({X.shape[0]}, {spec.d_covar}) covariates, got {tuple(Phi.shape)}")


def gram(spec: KernelSpec, p: KernelParams, X, PhiA, X2=None, PhiB=None, jitter: float = 0.0):
    """Composite covariance block between ``(X, PhiA)`` and ``(X2, PhiB)``.

    With ``X2`` omitted the square block is returned and ``jitter`` is added
    to its diagonal.
    """
    square = X2 is None
    if square:
        X2, PhiB = X, PhiA
    elif jitter:
        raise ValueError("jitter only applies to square blocks")
    _check_shapes(spec, X, PhiA, "X")
    _check_shapes(spec, X2, PhiB, "X2")

    if spec.form is KernelForm.AUGMENTED_LINEAR:
        K = p.nu * (torch.cat([X, PhiA], dim=1) @ torch.cat([X2, PhiB], dim=1).T)
    else:
        lin = p.nu * (PhiA @ PhiB.T)
        if spec.form is KernelForm.SEARD_PLUS_LINEAR:
            K = p.sigma_f2 * se_ard_factor(X, X2, p.lengthscales) + lin
        else:
            if spec.exclude_periodic_dim:
                se = se_ard_factor(X[:, 1:], X2[:, 1:], p.lengthscales[1:])
            else:
                se = se_ard_factor(X, X2, p.lengthscales)
            per = periodic_factor(X[:, 0], X2[:, 0], p.period_lengthscale)
            K = p.sigma_f2 * per * se + lin
    if square and jitter:
        K = K + jitter * torch.eye(K.shape[0], dtype=K.dtype)
    return K


def gram_diag(spec: KernelSpec, p: KernelParams, X, Phi):
    """Diagonal of ``gram(X, X)`` without forming the full block."""
    _check_shapes(spec, X, Phi, "X")
    if spec.form is KernelForm.AUGMENTED_LINEAR:
        return p.nu * ((X * X).sum(1) + (Phi * Phi).sum(1))
    return p.sigma_f2 + p.nu * (Phi * Phi).sum(1)


def mean_function(spec: KernelSpec, p: KernelParams, X, Phi, d: Optional[int] = None):
    """GP prior mean: ``mu_f + Phi zeta_d`` (or ``mu_f + [X Phi] w_d`` for the
    augmented linear form). Returns ``A x D`` for all genes when ``d`` is None."""
    _check_shapes(spec, X, Phi, "X")
    if d is not None and not 0 <= d < p.n_genes:
        raise IndexError(f"gene index {d} out of range for {p.n_genes} genes")
    if spec.form is KernelForm.AUGMENTED_LINEAR:
        Xt = torch.cat([X, Phi], dim=1)
        if d is None:
            return p.mu_f + Xt @ p.w.T
        return p.mu_f + Xt @ p.w[d]
    if d is None:
        return p.mu_f + Phi @ p.zeta.T
    return p.mu_f + Phi @ p.zeta[d]


def jittered_cholesky(K, start: float = 1e-6, stop: float = 1e-2, sym_tol: float = 1e-8):
    """Lower Cholesky factor of ``K + jitter * I`` with escalating jitter.

    Jitter starts at ``start * mean(diag K)`` and grows tenfold up to
    ``stop * mean(diag K)``. Returns ``(L, jitter)``.
    """
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got {tuple(K.shape)}")
    asym = (K - K.T).abs().max().item() if K.numel() else 0.0
    if asym > sym_tol * max(1.0, K.abs().max().item()):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    # the scale stays on the graph so gradients see the jitter move with K
    scale = K.diagonal().mean().abs()
    if scale.item() == 0:
        scale = torch.ones((), dtype=K.dtype)
    eye = torch.eye(K.shape[0], dtype=K.dtype)
    n_levels = int(round(math.log10(stop / start))) + 1
    for level in range(n_levels):
        jitter = start * 10.0**level * scale
        L, info = torch.linalg.cholesky_ex(K + jitter * eye)
        if int(info) == 0:
            return L, jitter.item()
    raise NotPositiveDefinite(f"Cholesky failed with jitter up to {jitter.item():.3g}")
