"""Dense multivariate-normal algebra.

Every routine here works on explicit mean vectors and covariance matrices and
factors covariances through :func:`chol_logdet`, which retries with a small
diagonal jitter before giving up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import NotPositiveDefinite

LOG_2PI = math.log(2.0 * math.pi)
JITTER_LADDER = (1e-8, 1e-6)
SYMMETRY_RTOL = 1e-10


def symmetrize(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + a.T)


def _check_symmetric(cov: np.ndarray) -> None:
    scale = max(1.0, float(np.max(np.abs(cov)))) if cov.size else 1.0
    if not np.allclose(cov, cov.T, rtol=0.0, atol=SYMMETRY_RTOL * scale):
        gap = float(np.max(np.abs(cov - cov.T)))
        raise NotPositiveDefinite(f"covariance is not symmetric (max |A - A^T| = {gap:.3e})")


def chol_logdet(cov: np.ndarray, jitter: float = 0.0) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor and log-determinant of ``cov + jitter * I``.

    If the first attempt fails the jitter is raised to 1e-8 and then 1e-6
    before :class:`NotPositiveDefinite` is raised.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1]:
        raise NotPositiveDefinite(f"covariance must be square, got shape {cov.shape}")
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    if not np.all(np.isfinite(cov)):
        raise NotPositiveDefinite("covariance has non-finite entries")
    _check_symmetric(cov)
    eye = np.eye(cov.shape[0])
    tried = []
    for eps in (jitter, *[j for j in JITTER_LADDER if j > jitter]):
        tried.append(eps)
        try:
            factor = np.linalg.cholesky(cov + eps * eye if eps else cov)
        except np.linalg.LinAlgError:
            continue
        logdet = 2.0 * float(np.sum(np.log(np.diag(factor))))
        return factor, logdet
    raise NotPositiveDefinite(
        f"Cholesky failed for {cov.shape[0]}x{cov.shape[0]} matrix with jitter {tried}"
    )


def spd_inverse(cov: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    factor, _ = chol_logdet(cov, jitter)
    return cho_solve((factor, True), np.eye(factor.shape[0]))


@dataclass(frozen=True)
class Gaussian:
    """``N(mean, cov)``; ``cov`` is symmetrized on construction."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        cov = symmetrize(np.atleast_2d(self.cov))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError(f"mean {mean.shape} and cov {cov.shape} do not match")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class JointGaussian:
    """Gaussian over ``[z_c, z_t]`` stored as context/target blocks."""

    mean_c: np.ndarray
    mean_t: np.ndarray
    cov_cc: np.ndarray
    cov_ct: np.ndarray
    cov_tt: np.ndarray

    def __post_init__(self) -> None:
        mc = np.atleast_1d(np.asarray(self.mean_c, dtype=float)).copy()
        mt = np.atleast_1d(np.asarray(self.mean_t, dtype=float)).copy()
        cc = symmetrize(np.atleast_2d(self.cov_cc))
        tt = symmetrize(np.atleast_2d(self.cov_tt))
        ct = np.asarray(self.cov_ct, dtype=float).reshape(mc.size, mt.size).copy()
        if cc.shape != (mc.size, mc.size) or tt.shape != (mt.size, mt.size):
            raise ValueError("block shapes do not match the mean partition")
        for name, val in (("mean_c", mc), ("mean_t", mt), ("cov_cc", cc), ("cov_ct", ct), ("cov_tt", tt)):
            object.__setattr__(self, name, val)

    @classmethod
    def from_full(cls, mean: np.ndarray, cov: np.ndarray, d_c: int) -> "JointGaussian":
        mean = np.asarray(mean, dtype=float)
        cov = symmetrize(cov)
        return cls(mean[:d_c], mean[d_c:], cov[:d_c, :d_c], cov[:d_c, d_c:], cov[d_c:, d_c:])

    @property
    def cov_tc(self) -> np.ndarray:
        return self.cov_ct.T

    @property
    def d_c(self) -> int:
        return self.mean_c.size

    @property
    def d_t(self) -> int:
        return self.mean_t.size

    @property
    def mean(self) -> np.ndarray:
        return np.concatenate([self.mean_c, self.mean_t])

    @property
    def cov(self) -> np.ndarray:
        return np.block([[self.cov_cc, self.cov_ct], [self.cov_tc, self.cov_tt]])

    def as_gaussian(self) -> Gaussian:
        return Gaussian(self.mean, self.cov)


@dataclass(frozen=True)
class PrecisionBlocks:
    lambda_cc: np.ndarray
    lambda_ct: np.ndarray
    lambda_tc: np.ndarray
    lambda_tt: np.ndarray

    def assemble(self) -> np.ndarray:
        return np.block([[self.lambda_cc, self.lambda_ct], [self.lambda_tc, self.lambda_tt]])


def _conditional_cov(joint: JointGaussian) -> tuple[np.ndarray, np.ndarray]:
    # returns (Sigma_tc Sigma_cc^{-1}, Schur complement); independent of z_c
    factor, _ = chol_logdet(joint.cov_cc)
    gain = cho_solve((factor, True), joint.cov_ct).T
    schur = symmetrize(joint.cov_tt - gain @ joint.cov_ct)
    return gain, schur


def condition(joint: JointGaussian, observed_zc: np.ndarray) -> Gaussian:
    """``p(z_t | z_c = observed_zc)``."""
    zc = np.atleast_1d(np.asarray(observed_zc, dtype=float))
    if zc.shape != joint.mean_c.shape:
        raise ValueError(f"observed_zc has shape {zc.shape}, expected {joint.mean_c.shape}")
    gain, schur = _conditional_cov(joint)
    return Gaussian(joint.mean_t + gain @ (zc - joint.mean_c), schur)


def marginalize(joint: JointGaussian, block: Literal["context", "target"]) -> Gaussian:
    if block == "context":
        return Gaussian(joint.mean_c, joint.cov_cc)
    if block == "target":
        return Gaussian(joint.mean_t, joint.cov_tt)
    raise ValueError(f"block must be 'context' or 'target', got {block!r}")


def mvn_logpdf(x: np.ndarray, g: Gaussian) -> np.ndarray | float:
    """Log-density at one point (1-D ``x``) or at each row of a 2-D ``x``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    rows = np.atleast_2d(x)
    if rows.shape[1] != g.dim:
        raise ValueError(f"x has dimension {rows.shape[1]}, Gaussian has {g.dim}")
    factor, logdet = chol_logdet(g.cov)
    white = solve_triangular(factor, (rows - g.mean).T, lower=True)
    with np.errstate(over="ignore"):  # far-off points give -inf, not a warning
        maha = np.sum(white**2, axis=0)
    out = -0.5 * (logdet + maha + g.dim * LOG_2PI)
    return float(out[0]) if single else out


def mvn_nll(x: np.ndarray, g: Gaussian) -> np.ndarray | float:
    return -mvn_logpdf(x, g)


def sample(g: Gaussian, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` rows of ``mean + L @ eps``."""
    factor, _ = chol_logdet(g.cov)
    eps = rng.standard_normal((n, g.dim))
    return g.mean + eps @ factor.T


def entropy(g: Gaussian) -> float:
    """Differential entropy in nats."""
    _, logdet = chol_logdet(g.cov)
    return 0.5 * g.dim * (1.0 + LOG_2PI) + 0.5 * logdet


def mutual_information(joint: JointGaussian) -> float:
    """``I(z_c; z_t)`` in nats, via the target block and its Schur complement."""
    _, schur = _conditional_cov(joint)
    _, ld_tt = chol_logdet(joint.cov_tt)
    _, ld_schur = chol_logdet(schur)
    return 0.5 * (ld_tt - ld_schur)


def kl_divergence(g0: Gaussian, g1: Gaussian) -> float:
    """``KL(g0 || g1)`` in nats. Divide by ``ln 2`` for bits."""
    if g0.dim != g1.dim:
        raise ValueError("dimension mismatch")
    l0, ld0 = chol_logdet(g0.cov)
    l1, ld1 = chol_logdet(g1.cov)
    trace_term = float(np.sum(solve_triangular(l1, l0, lower=True) ** 2))
    diff = solve_triangular(l1, g1.mean - g0.mean, lower=True)
    return 0.5 * (trace_term + float(diff @ diff) - g0.dim + ld1 - ld0)


def nats_to_bits(value: float) -> float:
    return value / math.log(2.0)


def block_invert(joint: JointGaussian, form: Literal[1, 2] = 1) -> PrecisionBlocks:
    """Precision blocks via the Schur complement of ``cov_cc`` (form 1) or ``cov_tt`` (form 2)."""
    if form == 1:
        inv_cc = spd_inverse(joint.cov_cc)
        _, schur = _conditional_cov(joint)
        lam_tt = spd_inverse(schur)
        lam_ct = -inv_cc @ joint.cov_ct @ lam_tt
        lam_cc = inv_cc + inv_cc @ joint.cov_ct @ lam_tt @ joint.cov_tc @ inv_cc
    elif form == 2:
        inv_tt = spd_inverse(joint.cov_tt)
        schur_c = symmetrize(joint.cov_cc - joint.cov_ct @ inv_tt @ joint.cov_tc)
        lam_cc = spd_inverse(schur_c)
        lam_ct = -lam_cc @ joint.cov_ct @ inv_tt
        lam_tt = inv_tt + inv_tt @ joint.cov_tc @ lam_cc @ joint.cov_ct @ inv_tt
    else:
        raise ValueError("form must be 1 or 2")
    return PrecisionBlocks(symmetrize(lam_cc), lam_ct, lam_ct.T.copy(), symmetrize(lam_tt))
