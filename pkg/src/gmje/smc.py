"""Weighted particle memory bank, its FIFO baseline, and a paired stream simulation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import NotNormalized
from .gaussian import chol_logdet

UNIT_TOL = 1e-6
Scheme = Literal["systematic", "multinomial"]


def _check_simplex(w: np.ndarray) -> None:
    if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-10:
        raise ValueError("weights must be a simplex")


def _require_unit(x: np.ndarray, tol: float = UNIT_TOL) -> None:
    norms = np.linalg.norm(np.atleast_2d(x), axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise NotNormalized(f"expected unit vectors, norms span [{norms.min():.6g}, {norms.max():.6g}]")


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@dataclass
class ParticleBank:
    particles: np.ndarray
    weights: np.ndarray
    tau: float = 0.1
    mode: Literal["isotropic", "full_cov"] = "isotropic"
    shared_cov: np.ndarray | None = None
    labels: np.ndarray | None = None  # optional bookkeeping, e.g. class ids

    def __post_init__(self) -> None:
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.weights.size != self.particles.shape[0]:
            raise ValueError("one weight per particle is required")
        _check_simplex(self.weights)
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.mode == "isotropic":
            _require_unit(self.particles)
        elif self.mode == "full_cov":
            if self.shared_cov is None:
                raise ValueError("full_cov mode needs shared_cov")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def uniform(cls, particles: np.ndarray, tau: float = 0.1, **kw) -> "ParticleBank":
        m = np.atleast_2d(particles).shape[0]
        return cls(particles, np.full(m, 1.0 / m), tau, **kw)

    @property
    def size(self) -> int:
        return self.particles.shape[0]


@dataclass
class WeightedPool:
    """Bank plus incoming batch with normalized posterior weights (before resampling)."""

    particles: np.ndarray
    weights: np.ndarray
    log_weights: np.ndarray
    labels: np.ndarray | None = None

    @property
    def ess(self) -> float:
        return ess(self.weights)


def weighted_infonce(zc: np.ndarray, zt_pos: np.ndarray, bank: ParticleBank) -> float:
    """``-log[exp(zc.zt/tau) / sum_m W_m exp(zc.z_m/tau)]`` in log-space."""
    if bank.mode != "isotropic":
        raise ValueError("weighted InfoNCE needs an isotropic bank")
    zc = np.asarray(zc, dtype=float)
    zt_pos = np.asarray(zt_pos, dtype=float)
    _require_unit(zc)
    _require_unit(zt_pos)
    with np.errstate(divide="ignore"):
        logw = np.log(bank.weights)
    return -float(zc @ zt_pos) / bank.tau + float(logsumexp(logw + bank.particles @ zc / bank.tau))


def _pool_prior(m: int, b: int, old_weights: np.ndarray) -> np.ndarray:
    # old weights scaled by M/(M+B); new entries get 1/(M+B)
    with np.errstate(divide="ignore"):
        return np.concatenate([np.log(old_weights * (m / (m + b))), np.full(b, -np.log(m + b))])


def _finish_pool(bank: ParticleBank, incoming: np.ndarray, log_lik: np.ndarray,
                 incoming_labels: np.ndarray | None) -> WeightedPool:
    m, b = bank.size, incoming.shape[0]
    logw = _pool_prior(m, b, bank.weights) + log_lik
    logw = logw - logsumexp(logw)
    labels = None
    if bank.labels is not None and incoming_labels is not None:
        labels = np.concatenate([bank.labels, incoming_labels])
    return WeightedPool(np.vstack([bank.particles, incoming]), np.exp(logw), logw, labels)


def importance_update(bank: ParticleBank, incoming: np.ndarray, queries: np.ndarray | None = None,
                      incoming_labels: np.ndarray | None = None) -> WeightedPool:
    """Pool the bank with ``incoming`` targets and reweight by ``mean_q exp(q . z_m / tau)``.

    ``queries`` are the batch contexts; they default to ``incoming``.
    """
    incoming = np.atleast_2d(np.asarray(incoming, dtype=float))
    queries = incoming if queries is None else np.atleast_2d(np.asarray(queries, dtype=float))
    _require_unit(incoming)
    _require_unit(queries)
    pool = np.vstack([bank.particles, incoming])
    log_lik = logsumexp(queries @ pool.T / bank.tau, axis=0) - np.log(queries.shape[0])
    return _finish_pool(bank, incoming, log_lik, incoming_labels)


def general_importance_update(bank: ParticleBank, incoming: np.ndarray, queries: np.ndarray | None = None,
                              incoming_labels: np.ndarray | None = None) -> WeightedPool:
    """Full-covariance variant: likelihood ``mean_q exp(-1/2 (q - mu_m)^T Sigma^{-1} (q - mu_m))``.

    The ``logdet Sigma`` factor is shared by every particle and cancels on normalization,
    so it is never evaluated.
    """
    if bank.mode != "full_cov" or bank.shared_cov is None:
        raise ValueError("general update needs a full_cov bank")
    incoming = np.atleast_2d(np.asarray(incoming, dtype=float))
    queries = incoming if queries is None else np.atleast_2d(np.asarray(queries, dtype=float))
    factor, _ = chol_logdet(bank.shared_cov)
    pool = np.vstack([bank.particles, incoming])
    wq = solve_triangular(factor, queries.T, lower=True).T
    wp = solve_triangular(factor, pool.T, lower=True).T
    sq = np.sum(wq**2, 1)[:, None] + np.sum(wp**2, 1)[None, :] - 2.0 * wq @ wp.T
    log_lik = logsumexp(-0.5 * sq, axis=0) - np.log(queries.shape[0])
    return _finish_pool(bank, incoming, log_lik, incoming_labels)


def ess(weights: np.ndarray) -> float:
    w = np.asarray(weights, dtype=float)
    return 1.0 / float(np.sum(w**2))


def resample_indices(weights: np.ndarray, target_size: int, rng: np.random.Generator,
                     scheme: Scheme = "systematic") -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    if scheme == "systematic":
        u = (rng.random() + np.arange(target_size)) / target_size
    elif scheme == "multinomial":
        u = rng.random(target_size)
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    return np.minimum(np.searchsorted(cdf, u, side="right"), w.size - 1)


def resample(pool: WeightedPool, target_size: int, rng: np.random.Generator, scheme: Scheme = "systematic",
             tau: float = 0.1, mode: Literal["isotropic", "full_cov"] = "isotropic",
             shared_cov: np.ndarray | None = None) -> ParticleBank:
    """Draw ``target_size`` particles in proportion to the pool weights; weights reset to uniform."""
    if pool.weights.size < 1:
        raise ValueError("empty pool")
    idx = resample_indices(pool.weights, target_size, rng, scheme)
    labels = None if pool.labels is None else pool.labels[idx]
    return ParticleBank(pool.particles[idx], np.full(target_size, 1.0 / target_size), tau, mode,
                        shared_cov, labels)


@dataclass
class FifoBank:
    queue: np.ndarray
    head: int = 0
    labels: np.ndarray | None = None

    @property
    def capacity(self) -> int:
        return self.queue.shape[0]

    def ordered(self) -> np.ndarray:
        """Contents from oldest to newest."""
        return np.roll(self.queue, -self.head, axis=0)


def fifo_push(bank: FifoBank, incoming: np.ndarray, incoming_labels: np.ndarray | None = None) -> FifoBank:
    """Overwrite the oldest rows with ``incoming`` (returns a new bank)."""
    incoming = np.atleast_2d(np.asarray(incoming, dtype=float))
    m = bank.capacity
    if incoming.shape[0] > m:
        raise ValueError("incoming batch larger than the queue")
    slots = (bank.head + np.arange(incoming.shape[0])) % m
    queue = bank.queue.copy()
    queue[slots] = incoming
    labels = None
    if bank.labels is not None and incoming_labels is not None:
        labels = bank.labels.copy()
        labels[slots] = incoming_labels
    return FifoBank(queue, int((bank.head + incoming.shape[0]) % m), labels)


# ---------------------------------------------------------------- simulation


@dataclass(frozen=True)
class StreamConfig:
    n_classes: int = 10
    dim: int = 16
    rare_class: int = 0
    rare_frequency: float = 0.01
    batch_size: int = 32
    spread: float = 0.3
    view_noise: float = 0.3

    def class_probs(self) -> np.ndarray:
        if self.n_classes == 1:
            return np.ones(1)
        p = np.full(self.n_classes, (1.0 - self.rare_frequency) / (self.n_classes - 1))
        p[self.rare_class] = self.rare_frequency
        return p


@dataclass(frozen=True)
class BankConfig:
    size: int = 256
    tau: float = 0.1
    scheme: Scheme = "systematic"
    ess_threshold: float | None = None  # resample only when ESS/pool < threshold; None = every step


class ClusterStream:
    """Unit vectors drawn as normalized Gaussian perturbations of fixed class directions.

    Each draw yields a target view and a context view of the same underlying sample.
    """

    def __init__(self, cfg: StreamConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.directions = normalize_rows(rng.standard_normal((cfg.n_classes, cfg.dim)))
        self.probs = cfg.class_probs()

    def draw(self, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        c = self.cfg
        labels = self.rng.choice(c.n_classes, size=n, p=self.probs)
        scale = 1.0 / np.sqrt(c.dim)
        base = self.directions[labels] + c.spread * scale * self.rng.standard_normal((n, c.dim))
        zt = normalize_rows(base)
        zc = normalize_rows(base + c.view_noise * scale * self.rng.standard_normal((n, c.dim)))
        return zc, zt, labels


@dataclass
class SimulationResult:
    steps: np.ndarray
    ess: np.ndarray
    post_resample_ess: np.ndarray
    smc_counts: np.ndarray  # (T, n_classes)
    fifo_counts: np.ndarray
    smc_retention: np.ndarray
    fifo_retention: np.ndarray
    pool_size: int
    resampled: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def smc_rare_occupancy(self) -> float:
        return float(self.smc_retention.mean())

    @property
    def fifo_rare_occupancy(self) -> float:
        return float(self.fifo_retention.mean())


def smc_simulation(stream_cfg: StreamConfig, bank_cfg: BankConfig, steps: int,
                   rng: np.random.Generator) -> SimulationResult:
    """Run the gradient-free bank update against a FIFO queue on one shared stream.

    ``*_retention`` is the fraction of bank slots holding the rare class after each step.
    """
    stream = ClusterStream(stream_cfg, rng)
    m, b = bank_cfg.size, stream_cfg.batch_size
    _, init, init_labels = stream.draw(m)
    bank = ParticleBank.uniform(init, bank_cfg.tau, labels=init_labels)
    fifo = FifoBank(init.copy(), 0, init_labels.copy())
    k = stream_cfg.n_classes
    ess_t = np.empty(steps)
    post = np.empty(steps)
    resampled = np.zeros(steps, dtype=bool)
    smc_counts = np.empty((steps, k), dtype=int)
    fifo_counts = np.empty((steps, k), dtype=int)
    for t in range(steps):
        zc, zt, lab = stream.draw(b)
        pool = importance_update(bank, zt, zc, lab)
        ess_t[t] = pool.ess
        if bank_cfg.ess_threshold is None or pool.ess < bank_cfg.ess_threshold * pool.weights.size:
            bank = resample(pool, m, rng, bank_cfg.scheme, bank_cfg.tau)
            resampled[t] = True
        else:
            # no resample: keep the M heaviest pooled particles and renormalize
            keep = np.sort(np.argsort(-pool.weights, kind="stable")[:m])
            w = pool.weights[keep] / pool.weights[keep].sum()
            bank = ParticleBank(pool.particles[keep], w, bank_cfg.tau, labels=pool.labels[keep])
        post[t] = ess(bank.weights)
        fifo = fifo_push(fifo, zt, lab)
        smc_counts[t] = np.bincount(bank.labels, minlength=k)
        fifo_counts[t] = np.bincount(fifo.labels, minlength=k)
    rare = stream_cfg.rare_class
    return SimulationResult(
        np.arange(1, steps + 1), ess_t, post, smc_counts, fifo_counts,
        smc_counts[:, rare] / m, fifo_counts[:, rare] / m, m + b, resampled,
    )


def write_metrics_csv(result: SimulationResult, path: str | Path, which: Literal["smc", "fifo"]) -> None:
    counts = result.smc_counts if which == "smc" else result.fifo_counts
    retention = result.smc_retention if which == "smc" else result.fifo_retention
    # FIFO slots carry uniform weight, so their ESS is the capacity
    ess_col = result.ess if which == "smc" else np.full(result.steps.size, float(counts[0].sum()))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "ess", *[f"class_{i}" for i in range(counts.shape[1])], "rare_retention"])
        for i in range(result.steps.size):
            w.writerow([int(result.steps[i]), f"{ess_col[i]:.10g}", *counts[i].tolist(), f"{retention[i]:.10g}"])

