"""Observation models: Gaussian, fixed-scale negative binomial ("ApproxPoisson"),
and negative binomial with a learned per-cell scale.

The negative binomial is parameterized by mean ``mu`` and inverse dispersion
``r`` so that ``Var[y] = mu + mu^2 / r``; ``r -> inf`` recovers the Poisson.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import LIBRARY_NORMALIZED, LOG_GAUSSIAN, RAW_COUNTS, ProcessedMatrix
from .errors import DomainError, PipelineMismatch
from .kernels import DTYPE, softplus_inverse


class LikelihoodForm(str, Enum):
    GAUSSIAN = "Gaussian"
    APPROX_POISSON = "ApproxPoisson"
    NB_LEARNED_SCALE = "NBLearnedScale"


@dataclass(frozen=True)
class LikelihoodSpec:
    form: LikelihoodForm = LikelihoodForm.APPROX_POISSON
    sigma_y2: float = 1.0
    scale: float = 5000.0
    r: float = 1e6

    def __post_init__(self):
        object.__setattr__(self, "form", LikelihoodForm(self.form))
        for name in ("sigma_y2", "scale", "r"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def expected_pipeline(self) -> str:
        return {
            LikelihoodForm.GAUSSIAN: LOG_GAUSSIAN,
            LikelihoodForm.APPROX_POISSON: LIBRARY_NORMALIZED,
            LikelihoodForm.NB_LEARNED_SCALE: RAW_COUNTS,
        }[self.form]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["form"] = self.form.value
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "LikelihoodSpec":
        return cls(**raw)


# --------------------------------------------------------------------------
# densities
# --------------------------------------------------------------------------


_STIRLING_MIN_R = 100.0


def _stirling_tail(x):
    # lgamma(x) - [(x - 1/2) log x - x + log(2 pi)/2]; truncation error < 1/(1680 x^7)
    inv = 1.0 / x
    inv2 = inv * inv
    return inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))


def lgamma_ratio(y, r):
    """``lgamma(y + r) - lgamma(r) - y log r`` without cancellation at large ``r``."""
    r_big = torch.clamp(r, min=_STIRLING_MIN_R)
    stirling = (r_big + y - 0.5) * torch.log1p(y / r_big) - y + _stirling_tail(r_big + y) - _stirling_tail(r_big)
    direct = torch.lgamma(y + r) - torch.lgamma(r) - y * torch.log(r)
    return torch.where(r >= _STIRLING_MIN_R, stirling, direct)


def nb_logpmf_logmu(y, log_mu, r):
    """NB log-pmf with the mean given on the log scale (no underflow for tiny means).

    Written as ``lgamma_ratio(y, r) - lgamma(y + 1) - (r + y) log(1 + mu/r)
    + y log mu`` so the large-``r`` (near-Poisson) regime keeps full precision.
    """
    y = torch.as_tensor(y, dtype=DTYPE)
    log_mu = torch.as_tensor(log_mu, dtype=DTYPE)
    r = torch.as_tensor(r, dtype=DTYPE)
    log1p_ratio = torch.logaddexp(log_mu - torch.log(r), torch.zeros((), dtype=DTYPE))  # log(1 + mu/r)
    return lgamma_ratio(y, r) - torch.lgamma(y + 1.0) - (r + y) * log1p_ratio + y * log_mu


def nb_logpmf(y, mu, r):
    mu_t = torch.as_tensor(mu, dtype=DTYPE)
    r_t = torch.as_tensor(r, dtype=DTYPE)
    if torch.any(mu_t <= 0) or not torch.all(torch.isfinite(mu_t)):
        raise DomainError("NB mean must be positive and finite")
    if torch.any(r_t <= 0):
        raise DomainError("NB inverse dispersion must be positive")
    return nb_logpmf_logmu(y, torch.log(mu_t), r_t)


def poisson_logpmf(y, mu):
    y = torch.as_tensor(y, dtype=DTYPE)
    mu = torch.as_tensor(mu, dtype=DTYPE)
    return y * torch.log(mu) - mu - torch.lgamma(y + 1.0)


def gaussian_logpdf(y, f, sigma2):
    return -0.5 * (math.log(2 * math.pi) + torch.log(sigma2) + (y - f) ** 2 / sigma2)


def softmax_link(f_row, scale: float = 5000.0):
    f_row = torch.as_tensor(f_row, dtype=DTYPE)
    return scale * torch.softmax(f_row, dim=-1)


def nb_poisson_limit_check(mu: float, y: int, rs: Sequence[float] = (1e2, 1e4, 1e6)) -> list:
    """``|nb_logpmf - poisson_logpmf|`` at each inverse dispersion in ``rs``."""
    if not mu > 0:
        raise DomainError("mu must be positive")
    pois = poisson_logpmf(y, mu)
    return [abs(float(nb_logpmf(y, mu, r) - pois)) for r in rs]


def nb_sample(mu, r, size, rng: np.random.Generator):
    """Gamma-Poisson draws with mean ``mu`` and inverse dispersion ``r``."""
    rates = rng.gamma(r, mu / r, size=size)
    return rng.poisson(rates)


# --------------------------------------------------------------------------
# likelihood module
# --------------------------------------------------------------------------


class Likelihood(nn.Module):
    """Holds the trainable parameters of a :class:`LikelihoodSpec`.

    ``log_scale`` (one entry per cell) exists only for the learned-scale form
    and is initialized at the log of each cell's total count.
    """

    def __init__(self, spec: LikelihoodSpec, library_sizes: Optional[np.ndarray] = None):
        super().__init__()
        self.spec = spec
        if spec.form is LikelihoodForm.GAUSSIAN:
            self.raw_sigma_y2 = nn.Parameter(softplus_inverse(spec.sigma_y2))
        if spec.form is LikelihoodForm.NB_LEARNED_SCALE:
            if library_sizes is None:
                raise ValueError("learned-scale likelihood needs per-cell library sizes")
            self.log_scale = nn.Parameter(torch.log(torch.as_tensor(library_sizes, dtype=DTYPE)).clone())

    @property
    def form(self) -> LikelihoodForm:
        return self.spec.form

    @property
    def sigma_y2(self):
        return F.softplus(self.raw_sigma_y2)

    def check_pipeline(self, processed: ProcessedMatrix) -> None:
        expected = self.spec.expected_pipeline
        if processed.pipeline_tag != expected:
            raise PipelineMismatch(
                f"{self.form.value} likelihood expects {expected} data, got {processed.pipeline_tag}"
            )
        if expected == LIBRARY_NORMALIZED and processed.target != self.spec.scale:
            raise PipelineMismatch(
                f"rows normalized to {processed.target} but likelihood scale is {self.spec.scale}"
            )

    def log_prob(self, y, f, cell_index=None):
        """Per-row log-likelihood summed over genes.

        ``y`` is ``B x D``; ``f`` is ``B x D`` or ``S x B x D`` (leading sample
        dims broadcast). ``cell_index`` selects the per-cell scales of the
        learned-scale form.
        """
        if self.form is LikelihoodForm.GAUSSIAN:
            return gaussian_logpdf(y, f, self.sigma_y2).sum(-1)
        log_softmax = torch.log_softmax(f, dim=-1)
        if self.form is LikelihoodForm.APPROX_POISSON:
            log_mu = math.log(self.spec.scale) + log_softmax
        else:
            if cell_index is None:
                raise ValueError("learned-scale likelihood needs cell indices")
            log_mu = self.log_scale[torch.as_tensor(cell_index)][:, None] + log_softmax
        return nb_logpmf_logmu(y, log_mu, self.spec.r).sum(-1)


def loglik_row(lik: Likelihood, y_row, f_row, n: Optional[int] = None, pipeline_tag: Optional[str] = None):
    """Log-likelihood of one cell's row; ``n`` is the cell index (learned-scale form).

    When ``pipeline_tag`` is given it must match the likelihood's expected input.
    """
    if pipeline_tag is not None and pipeline_tag != lik.spec.expected_pipeline:
        raise PipelineMismatch(f"{lik.form.value} likelihood expects {lik.spec.expected_pipeline} data, got {pipeline_tag}")
    y = torch.as_tensor(y_row, dtype=DTYPE).reshape(1, -1)
    f = torch.as_tensor(f_row, dtype=DTYPE).reshape(1, -1)
    return lik.log_prob(y, f, None if n is None else [n])[0]
