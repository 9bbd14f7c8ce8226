"""Joint Gaussian mixtures: conditioning, prototype losses, EM and sampling."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import solve_triangular
from scipy.special import log_softmax, logsumexp

from .errors import AllZeroLikelihood, DegenerateComponent, NotNormalized
from .gaussian import (
    LOG_2PI,
    Gaussian,
    JointGaussian,
    chol_logdet,
    condition,
    marginalize,
    mvn_logpdf,
    symmetrize,
)

WEIGHT_TOL = 1e-10
UNIT_TOL = 1e-8


def _check_simplex(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float).ravel()
    if w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
        raise ValueError(f"weights must be a simplex (sum={w.sum() if w.size else 0})")
    return w


@dataclass(frozen=True)
class JointMixture:
    weights: np.ndarray
    components: tuple[JointGaussian, ...]

    def __post_init__(self) -> None:
        w = _check_simplex(self.weights)
        comps = tuple(self.components)
        if len(comps) != w.size:
            raise ValueError("one weight per component is required")
        dims = {(c.d_c, c.d_t) for c in comps}
        if len(dims) != 1:
            raise ValueError(f"components disagree on (d_c, d_t): {sorted(dims)}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @classmethod
    def from_arrays(cls, weights, means, covs, d_c: int) -> "JointMixture":
        comps = tuple(JointGaussian.from_full(m, c, d_c) for m, c in zip(np.asarray(means), np.asarray(covs)))
        return cls(np.asarray(weights, dtype=float), comps)

    @property
    def k(self) -> int:
        return self.weights.size

    @property
    def d_c(self) -> int:
        return self.components[0].d_c

    @property
    def d_t(self) -> int:
        return self.components[0].d_t

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    @property
    def covs(self) -> np.ndarray:
        return np.stack([c.cov for c in self.components])

    def joint_gaussians(self) -> list[Gaussian]:
        return [c.as_gaussian() for c in self.components]

    def logpdf(self, z: np.ndarray) -> np.ndarray | float:
        """Joint log-density at a point or at each row."""
        return mixture_logpdf(self.weights, self.joint_gaussians(), z)

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": [c.ravel().tolist() for c in self.covs],
            "dims": {"d_c": self.d_c, "d_t": self.d_t},
        }

    @classmethod
    def from_json(cls, obj: dict | str) -> "JointMixture":
        if isinstance(obj, str):
            obj = json.loads(obj)
        d_c, d_t = int(obj["dims"]["d_c"]), int(obj["dims"]["d_t"])
        d = d_c + d_t
        covs = [np.asarray(c, dtype=float).reshape(d, d) for c in obj["covariances"]]
        return cls.from_arrays(obj["weights"], obj["means"], covs, d_c)


@dataclass(frozen=True)
class ConditionalMixture:
    responsibilities: np.ndarray
    cond_means: tuple[np.ndarray, ...]
    cond_covs: tuple[np.ndarray, ...]

    def gaussians(self) -> list[Gaussian]:
        return [Gaussian(m, c) for m, c in zip(self.cond_means, self.cond_covs)]

    def logpdf(self, z_t: np.ndarray) -> np.ndarray | float:
        return mixture_logpdf(self.responsibilities, self.gaussians(), z_t)


def mixture_logpdf(weights: np.ndarray, gaussians: Sequence[Gaussian], x: np.ndarray) -> np.ndarray | float:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    rows = np.atleast_2d(x)
    with np.errstate(divide="ignore"):
        logw = np.log(np.asarray(weights, dtype=float))
    parts = np.stack([lw + np.atleast_1d(mvn_logpdf(rows, g)) for lw, g in zip(logw, gaussians)])
    out = logsumexp(parts, axis=0)
    return float(out[0]) if single else out


def conditional_mixture(mix: JointMixture, zc: np.ndarray) -> ConditionalMixture:
    """Responsibilities ``gamma_k(z_c)`` in log-space plus per-component conditionals."""
    zc = np.atleast_1d(np.asarray(zc, dtype=float))
    with np.errstate(divide="ignore"):
        logw = np.log(mix.weights)
    log_r = np.array(
        [lw + mvn_logpdf(zc, marginalize(c, "context")) for lw, c in zip(logw, mix.components)]
    )
    norm = logsumexp(log_r)
    if not np.isfinite(norm):
        raise AllZeroLikelihood(f"every component has zero likelihood at z_c={zc}")
    resp = np.exp(log_r - norm)
    conds = [condition(c, zc) for c in mix.components]
    return ConditionalMixture(resp, tuple(g.mean for g in conds), tuple(g.cov for g in conds))


def marginal_mixture(
    mix: JointMixture, block: Literal["context", "target"]
) -> tuple[np.ndarray, list[Gaussian]]:
    return mix.weights.copy(), [marginalize(c, block) for c in mix.components]


def total_variance(cm: ConditionalMixture) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the mixture: local noise plus between-mode spread."""
    g = cm.responsibilities
    means = np.stack(cm.cond_means)
    mu = g @ means
    dev = means - mu
    within = np.einsum("k,kij->ij", g, np.stack(cm.cond_covs))
    between = (dev * g[:, None]).T @ dev
    return mu, symmetrize(within + between)


# ------------------------------------------------------------ prototypes


@dataclass(frozen=True)
class PrototypeSet:
    """``K`` joint means with a shared covariance or one covariance per prototype."""

    prototypes: np.ndarray
    log_weights: np.ndarray
    shared_cov: np.ndarray | None = None
    per_component_covs: np.ndarray | None = None

    def __post_init__(self) -> None:
        protos = np.atleast_2d(np.asarray(self.prototypes, dtype=float))
        lw = np.asarray(self.log_weights, dtype=float).ravel()
        if lw.size != protos.shape[0]:
            raise ValueError("one log-weight per prototype is required")
        object.__setattr__(self, "prototypes", protos)
        object.__setattr__(self, "log_weights", lw)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(log_softmax(self.log_weights))


def _shifted_nll(logits: np.ndarray) -> float:
    c = float(np.max(logits))
    return -c - float(np.log(np.sum(np.exp(logits - c))))


def proto_nll_shared(z_joint: np.ndarray, protos: PrototypeSet) -> float:
    """Prototype NLL with one shared covariance; additive ``2pi`` constants dropped."""
    if protos.shared_cov is None:
        raise ValueError("prototype set has no shared covariance")
    factor, logdet = chol_logdet(protos.shared_cov)
    white = solve_triangular(factor, (np.asarray(z_joint, dtype=float) - protos.prototypes).T, lower=True)
    logits = log_softmax(protos.log_weights) - 0.5 * np.sum(white**2, axis=0)
    return 0.5 * logdet + _shifted_nll(logits)


def proto_nll_full(z_joint: np.ndarray, protos: PrototypeSet) -> float:
    """Prototype NLL with per-component covariances; ``2pi`` constants dropped."""
    covs = protos.per_component_covs
    if covs is None:
        raise ValueError("prototype set has no per-component covariances")
    z = np.asarray(z_joint, dtype=float)
    logits = log_softmax(protos.log_weights).copy()
    for k, (mu, cov) in enumerate(zip(protos.prototypes, covs)):
        factor, logdet = chol_logdet(cov)
        w = solve_triangular(factor, z - mu, lower=True)
        logits[k] -= 0.5 * float(w @ w) + 0.5 * logdet
    return _shifted_nll(logits)


# ------------------------------------------------------------ EM


@dataclass
class EmTrace:
    mixture: JointMixture
    log_likelihoods: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _component_logpdfs(data: np.ndarray, weights, means, covs) -> np.ndarray:
    out = np.empty((data.shape[0], weights.size))
    for k in range(weights.size):
        factor, logdet = chol_logdet(covs[k])
        w = solve_triangular(factor, (data - means[k]).T, lower=True)
        out[:, k] = np.log(weights[k]) - 0.5 * (logdet + np.sum(w**2, 0) + data.shape[1] * LOG_2PI)
    return out


def _kmeans_init(data: np.ndarray, k: int, rng: np.random.Generator):
    if k == 1:
        labels = np.zeros(data.shape[0], dtype=int)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, labels = kmeans2(data, k, minit="++", seed=rng)
    glob = np.cov(data, rowvar=False, bias=True).reshape(data.shape[1], data.shape[1])
    weights = np.empty(k)
    means = np.empty((k, data.shape[1]))
    covs = np.empty((k, data.shape[1], data.shape[1]))
    for j in range(k):
        pts = data[labels == j]
        if pts.shape[0] < data.shape[1] + 1:
            pts = data[rng.choice(data.shape[0], size=max(data.shape[1] + 1, 2), replace=False)]
            covs[j] = glob
        else:
            covs[j] = np.cov(pts, rowvar=False, bias=True).reshape(glob.shape)
        weights[j] = max(np.mean(labels == j), 1.0 / data.shape[0])
        means[j] = pts.mean(0)
    return weights / weights.sum(), means, covs


def em_fit_trace(
    data: np.ndarray,
    k: int,
    max_iters: int = 200,
    tol: float = 1e-7,
    rng: np.random.Generator | None = None,
    d_c: int | None = None,
    var_floor: float = 1e-6,
) -> EmTrace:
    """Full-covariance EM from a k-means start, keeping the log-likelihood history."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n, d = data.shape
    if n < k:
        raise ValueError(f"need at least k={k} rows, got {n}")
    d_c = d // 2 if d_c is None else d_c
    rng = rng if rng is not None else np.random.default_rng(0)
    weights, means, covs = _kmeans_init(data, k, rng)
    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        logp = _component_logpdfs(data, weights, means, covs)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.sum())
        resp = np.exp(logp - norm[:, None])
        if history and abs(ll - history[-1]) < tol * abs(history[-1]):
            history.append(ll)
            converged = True
            break
        history.append(ll)
        nk = resp.sum(0)
        weights = nk / n
        means = (resp.T @ data) / nk[:, None]
        for j in range(k):
            dev = data - means[j]
            covs[j] = symmetrize((resp[:, j, None] * dev).T @ dev / nk[j])
            low = float(np.min(np.diag(covs[j])))
            if not low >= var_floor:
                raise DegenerateComponent(f"component {j} variance {low:.3e} fell below floor {var_floor}")
    mix = JointMixture.from_arrays(weights / weights.sum(), means, covs, d_c)
    return EmTrace(mix, history, it, converged)


def em_fit(
    data: np.ndarray,
    k: int,
    max_iters: int = 200,
    tol: float = 1e-7,
    rng: np.random.Generator | None = None,
    d_c: int | None = None,
) -> JointMixture:
    return em_fit_trace(data, k, max_iters, tol, rng, d_c).mixture


def responsibilities(mix: JointMixture, data: np.ndarray) -> np.ndarray:
    """Posterior component probabilities for each joint row."""
    logp = _component_logpdfs(np.atleast_2d(data), mix.weights, mix.means, mix.covs)
    return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))


# ------------------------------------------------------------ sampling


def sample_mixture(
    weights: np.ndarray,
    components: Sequence[Gaussian],
    n: int,
    rng: np.random.Generator,
    return_labels: bool = False,
):
    """Categorical draw on ``weights`` (first CDF entry above ``u``), then a Cholesky draw."""
    w = _check_simplex(weights)
    cdf = np.cumsum(w)
    labels = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), w.size - 1)
    dim = components[0].dim
    eps = rng.standard_normal((n, dim))
    out = np.empty((n, dim))
    for k, g in enumerate(components):
        sel = labels == k
        if np.any(sel):
            factor, _ = chol_logdet(g.cov)
            out[sel] = g.mean + eps[sel] @ factor.T
    return (out, labels) if return_labels else out


# ------------------------------------------------------------ InfoNCE bridge


def _require_unit(*arrays: np.ndarray) -> None:
    for a in arrays:
        norms = np.linalg.norm(np.atleast_2d(a), axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise NotNormalized(f"expected unit vectors, got norms in [{norms.min():.6g}, {norms.max():.6g}]")


def dam_conditional_nll(zc: np.ndarray, zt: np.ndarray, bank: np.ndarray, tau: float) -> float:
    """InfoNCE value ``-log[exp(zc.zt/tau) / sum_m exp(zc.bank_m/tau)]``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    zc, zt, bank = (np.asarray(a, dtype=float) for a in (zc, zt, bank))
    _require_unit(zc, zt, bank)
    return -float(zc @ zt) / tau + float(logsumexp(np.atleast_2d(bank) @ zc / tau))


def kde_conditional_nll(zc: np.ndarray, zt: np.ndarray, bank: np.ndarray, tau: float) -> float:
    """Exact ``-log p(zt | zc)`` of the KDE mixture with centres ``(bank_m, bank_m)`` and cov ``tau I``."""
    zc, zt, bank = (np.asarray(a, dtype=float) for a in (zc, zt, bank))
    bank = np.atleast_2d(bank)
    d = bank.shape[1]
    lc = -0.5 * np.sum((zc - bank) ** 2, 1) / tau
    lt = -0.5 * np.sum((zt - bank) ** 2, 1) / tau
    log_norm = -0.5 * d * (LOG_2PI + np.log(tau))
    return -float(logsumexp(lc + lt) - logsumexp(lc)) - log_norm
