"""Single-Gaussian joint-embedding objectives in feature and sample space."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial.distance import pdist

from .errors import RankDeficient
from .gaussian import Gaussian, JointGaussian, chol_logdet, condition


@dataclass(frozen=True)
class BatchEmbeddings:
    z_c: np.ndarray
    z_t: np.ndarray

    def __post_init__(self) -> None:
        zc = np.asarray(self.z_c, dtype=float)
        zt = np.asarray(self.z_t, dtype=float)
        zc = zc[:, None] if zc.ndim == 1 else zc
        zt = zt[:, None] if zt.ndim == 1 else zt
        if zc.shape[0] != zt.shape[0]:
            raise ValueError(f"row counts differ: {zc.shape[0]} vs {zt.shape[0]}")
        if zc.shape[0] < 2:
            raise ValueError("a batch needs at least 2 rows")
        if not (np.all(np.isfinite(zc)) and np.all(np.isfinite(zt))):
            raise ValueError("batch has non-finite entries")
        object.__setattr__(self, "z_c", zc)
        object.__setattr__(self, "z_t", zt)

    @property
    def z(self) -> np.ndarray:
        return np.hstack([self.z_c, self.z_t])

    @property
    def n(self) -> int:
        return self.z_c.shape[0]

    @property
    def d_c(self) -> int:
        return self.z_c.shape[1]

    @property
    def d_t(self) -> int:
        return self.z_t.shape[1]

    @property
    def d(self) -> int:
        return self.d_c + self.d_t


@dataclass(frozen=True)
class KernelSpec:
    """``noise`` is the sigma^2 added to the Gram diagonal."""

    kind: Literal["linear", "rbf"] = "rbf"
    length_scale: float = 1.0
    noise: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf" and not self.length_scale > 0:
            raise ValueError("rbf length_scale must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    def gram(self, a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
        a = np.atleast_2d(a)
        b = a if b is None else np.atleast_2d(b)
        if self.kind == "linear":
            return a @ b.T
        sq = np.sum(a**2, 1)[:, None] + np.sum(b**2, 1)[None, :] - 2.0 * a @ b.T
        return np.exp(-0.5 * np.maximum(sq, 0.0) / self.length_scale**2)

    def diag(self, a: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(a)
        if self.kind == "linear":
            return np.sum(a**2, 1)
        return np.ones(a.shape[0])


def median_rbf(x: np.ndarray) -> KernelSpec:
    """RBF kernel with the median pairwise distance as length scale."""
    dists = pdist(np.atleast_2d(np.asarray(x, dtype=float)))
    med = float(np.median(dists)) if dists.size else 0.0
    return KernelSpec("rbf", length_scale=med if med > 0 else 1.0)


# ---------------------------------------------------------------- primal


def empirical_joint_cov(batch: BatchEmbeddings) -> JointGaussian:
    """Zero-mean joint with ``C = Z^T Z / N``."""
    z = batch.z
    c = z.T @ z / batch.n
    return JointGaussian.from_full(np.zeros(batch.d), c, batch.d_c)


def _datafit(z: np.ndarray, cov: np.ndarray, jitter: float) -> tuple[float, float]:
    factor, logdet = chol_logdet(cov, jitter)
    white = solve_triangular(factor, z.T, lower=True)
    return float(np.sum(white**2)) / (2.0 * z.shape[0]), logdet


def primal_joint_nll(batch: BatchEmbeddings, jitter: float = 0.0) -> float:
    """Mean joint NLL of the batch under its own second-moment matrix (no 2pi term)."""
    z = batch.z
    fit, logdet = _datafit(z, z.T @ z / batch.n, jitter)
    return fit + 0.5 * logdet


def trace_trap_datafit(batch: BatchEmbeddings) -> float:
    """Mahalanobis term ``(1/2N) sum z_i^T C^{-1} z_i`` with no jitter.

    Algebraically this is ``d/2`` for any full-rank batch.
    """
    z = batch.z
    if batch.n <= batch.d or np.linalg.matrix_rank(z) < batch.d:
        raise RankDeficient(f"need a full-rank batch with N > d (N={batch.n}, d={batch.d})")
    # C = R^T R / N from Z = QR, so z_i^T C^{-1} z_i = N |R^{-T} z_i|^2; avoids squaring cond(Z)
    r = np.linalg.qr(z, mode="r")
    white = solve_triangular(r, z.T, trans="T")
    return float(np.sum(white**2)) / 2.0


def entropy_max_loss(batch: BatchEmbeddings, jitter: float = 0.0) -> float:
    """``-1/2 logdet(C + jitter I)``."""
    z = batch.z
    _, logdet = chol_logdet(z.T @ z / batch.n, jitter)
    return -0.5 * logdet


def entropy_max_grad(batch: BatchEmbeddings, jitter: float = 0.0) -> np.ndarray:
    """Gradient of :func:`entropy_max_loss` w.r.t. the joint rows ``Z`` (N x d)."""
    z = batch.z
    factor, _ = chol_logdet(z.T @ z / batch.n, jitter)
    return -cho_solve((factor, True), z.T).T / batch.n


def primal_predict(cov: JointGaussian, zc_star: np.ndarray) -> Gaussian:
    """Linear predictor ``C_tc C_cc^{-1} z_c*`` with the Schur-complement covariance."""
    return condition(cov, zc_star)


# ---------------------------------------------------------------- dual


def gram_nll(gram: np.ndarray, z_t: np.ndarray) -> float:
    """``1/2 Tr(Z_t^T K^{-1} Z_t) + (d_t/2) logdet K`` for a ready Gram matrix."""
    z_t = np.asarray(z_t, dtype=float)
    z_t = z_t[:, None] if z_t.ndim == 1 else z_t
    factor, logdet = chol_logdet(gram)
    white = solve_triangular(factor, z_t, lower=True)
    return 0.5 * float(np.sum(white**2)) + 0.5 * z_t.shape[1] * logdet


def dual_gram(batch: BatchEmbeddings, kernel: KernelSpec, jitter: float = 0.0) -> np.ndarray:
    k = kernel.gram(batch.z_c)
    k[np.diag_indices_from(k)] += kernel.noise + jitter
    return k


def dual_nll(batch: BatchEmbeddings, kernel: KernelSpec, jitter: float = 0.0) -> float:
    return gram_nll(dual_gram(batch, kernel, jitter), batch.z_t)


def dual_nll_grad_zt(batch: BatchEmbeddings, kernel: KernelSpec, jitter: float = 0.0) -> np.ndarray:
    """``dL/dZ_t = K^{-1} Z_t``: a descent step shrinks targets toward zero."""
    factor, _ = chol_logdet(dual_gram(batch, kernel, jitter))
    return cho_solve((factor, True), batch.z_t)


def dual_predict(
    train: BatchEmbeddings, kernel: KernelSpec, zc_star: np.ndarray, jitter: float = 0.0
) -> Gaussian:
    """GP posterior at ``zc_star``; the scalar variance is shared by all target channels."""
    zs = np.atleast_2d(np.asarray(zc_star, dtype=float))
    factor, _ = chol_logdet(dual_gram(train, kernel, jitter))
    k_sc = kernel.gram(zs, train.z_c)[0]
    alpha = cho_solve((factor, True), train.z_t)
    v = solve_triangular(factor, k_sc, lower=True)
    var = max(float(kernel.diag(zs)[0] - v @ v), 0.0)  # clamp round-off below zero
    return Gaussian(k_sc @ alpha, var * np.eye(train.d_t))


def linear_dual_loss(batch: BatchEmbeddings, jitter: float = 1e-6) -> float:
    """``1/2 Tr(Z^T K^{-1} Z) + 1/2 logdet K`` with ``K = Z Z^T + eps I_N``."""
    if jitter <= 0:
        raise ValueError("jitter must be positive")
    z = batch.z
    k_fac, k_logdet = chol_logdet(z @ z.T + jitter * np.eye(batch.n))
    white = solve_triangular(k_fac, z, lower=True)
    return 0.5 * float(np.sum(white**2)) + 0.5 * k_logdet


def linear_primal_loss(batch: BatchEmbeddings, jitter: float = 1e-6) -> float:
    """Closed form of :func:`linear_dual_loss` using only ``C = Z^T Z + eps I_d``.

    ``1/2 (logdet C - eps tr C^{-1}) + d/2 + (N - d)/2 log eps``.
    """
    if jitter <= 0:
        raise ValueError("jitter must be positive")
    z = batch.z
    n, d = z.shape
    if n <= d:
        raise RankDeficient(f"need N > d (N={n}, d={d})")
    c_fac, c_logdet = chol_logdet(z.T @ z + jitter * np.eye(d))
    c_inv_trace = float(np.sum(solve_triangular(c_fac, np.eye(d), lower=True) ** 2))
    return 0.5 * (c_logdet - jitter * c_inv_trace) + 0.5 * d + 0.5 * (n - d) * float(np.log(jitter))


def primal_dual_residual(batch: BatchEmbeddings, jitter: float = 1e-6) -> float:
    return abs(linear_dual_loss(batch, jitter) - linear_primal_loss(batch, jitter))


def ema_update(target: list[np.ndarray], online: list[np.ndarray], momentum: float = 0.99) -> list[np.ndarray]:
    """Slow target-branch parameters: ``theta' <- m theta' + (1 - m) theta``."""
    return [momentum * t + (1.0 - momentum) * o for t, o in zip(target, online)]


# ---------------------------------------------------------------- RFF


@dataclass(frozen=True)
class RffProjection:
    frequencies: np.ndarray
    phases: np.ndarray
    length_scale: float

    def __post_init__(self) -> None:
        freq = np.atleast_2d(np.asarray(self.frequencies, dtype=float))
        ph = np.asarray(self.phases, dtype=float).ravel()
        if ph.size < 1 or freq.shape[1] != ph.size:
            raise ValueError("frequencies must be (d_c, D) with D = len(phases) >= 1")
        if np.any(ph < 0) or np.any(ph >= 2 * np.pi):
            raise ValueError("phases must lie in [0, 2pi)")
        object.__setattr__(self, "frequencies", freq)
        object.__setattr__(self, "phases", ph)

    @property
    def feature_count(self) -> int:
        return self.phases.size


def make_rff(d_in: int, n_features: int, length_scale: float, rng: np.random.Generator) -> RffProjection:
    """RBF spectral draw: ``omega ~ N(0, l^-2 I)``, ``b ~ U[0, 2pi)``."""
    omega = rng.standard_normal((d_in, n_features)) / length_scale
    phases = rng.uniform(0.0, 2.0 * np.pi, n_features)
    return RffProjection(omega, phases, length_scale)


def rff_features(z_c: np.ndarray, proj: RffProjection) -> np.ndarray:
    z_c = np.atleast_2d(np.asarray(z_c, dtype=float))
    if z_c.shape[1] != proj.frequencies.shape[0]:
        raise ValueError("input width does not match the projection")
    d = proj.feature_count
    return np.sqrt(2.0 / d) * np.cos(z_c @ proj.frequencies + proj.phases)


def rff_woodbury_inverse(features: np.ndarray, epsilon: float) -> np.ndarray:
    """``(Psi Psi^T + eps I_N)^{-1}`` through the D x D system."""
    psi = np.atleast_2d(np.asarray(features, dtype=float))
    n, d_feat = psi.shape
    factor, _ = chol_logdet(psi.T @ psi + epsilon * np.eye(d_feat))
    half = solve_triangular(factor, psi.T, lower=True)
    return (np.eye(n) - half.T @ half) / epsilon


def rff_logdet(features: np.ndarray, epsilon: float) -> float:
    """``logdet(Psi Psi^T + eps I_N) = logdet(Psi^T Psi + eps I_D) + (N - D) log eps``."""
    psi = np.atleast_2d(np.asarray(features, dtype=float))
    n, d_feat = psi.shape
    _, c_logdet = chol_logdet(psi.T @ psi + epsilon * np.eye(d_feat))
    return c_logdet + (n - d_feat) * float(np.log(epsilon))


def rff_dual_nll(features: np.ndarray, z_t: np.ndarray, epsilon: float, max_features: int = 4096) -> float:
    """Dual loss with ``K = Psi Psi^T + eps I`` using only D x D algebra.

    ``K^{-1} = (I - Psi C^{-1} Psi^T) / eps`` and
    ``logdet K = logdet C + (N - D) log eps`` with ``C = Psi^T Psi + eps I_D``.
    """
    psi = np.atleast_2d(np.asarray(features, dtype=float))
    z_t = np.asarray(z_t, dtype=float)
    z_t = z_t[:, None] if z_t.ndim == 1 else z_t
    n, d_feat = psi.shape
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if d_feat > max_features:
        raise ValueError(f"feature count {d_feat} exceeds cap {max_features}")
    factor, c_logdet = chol_logdet(psi.T @ psi + epsilon * np.eye(d_feat))
    proj = solve_triangular(factor, psi.T @ z_t, lower=True)
    trace = (float(np.sum(z_t**2)) - float(np.sum(proj**2))) / epsilon
    k_logdet = c_logdet + (n - d_feat) * np.log(epsilon)
    return 0.5 * trace + 0.5 * z_t.shape[1] * k_logdet


# ---------------------------------------------------------------- HSIC


def _centered(k: np.ndarray) -> np.ndarray:
    return k - k.mean(0, keepdims=True) - k.mean(1, keepdims=True) + k.mean()


def hsic(
    z_c: np.ndarray,
    z_t: np.ndarray,
    kernel_c: KernelSpec | None = None,
    kernel_t: KernelSpec | None = None,
) -> float:
    """Biased empirical HSIC ``Tr(K_c H K_t H) / (N-1)^2``; linear kernels by default."""
    z_c = np.asarray(z_c, dtype=float)
    z_t = np.asarray(z_t, dtype=float)
    z_c = z_c[:, None] if z_c.ndim == 1 else z_c
    z_t = z_t[:, None] if z_t.ndim == 1 else z_t
    n = z_c.shape[0]
    if n < 2 or z_t.shape[0] != n:
        raise ValueError("need N >= 2 paired rows")
    kc = (kernel_c or KernelSpec("linear")).gram(z_c)
    kt = (kernel_t or KernelSpec("linear")).gram(z_t)
    return float(np.sum(_centered(kc) * kt)) / (n - 1) ** 2
