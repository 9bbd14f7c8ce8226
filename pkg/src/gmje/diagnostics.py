"""Numerical contract checks reported by ``gmje diagnostics``."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .gje import (
    BatchEmbeddings,
    primal_dual_residual,
    rff_dual_nll,
    rff_logdet,
    rff_woodbury_inverse,
    trace_trap_datafit,
)
from .mixture import dam_conditional_nll, kde_conditional_nll
from .neural import (
    EmaCovariance,
    gmje_mdn_loss,
    init_mdn,
    init_mlp,
    mdn_backward,
    mdn_forward,
    mdn_nll,
    mdn_nll_grads,
    mlp_backward,
    mlp_forward,
)
from .smc import normalize_rows


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool

    def __post_init__(self) -> None:
        self.value = float(self.value)
        self.passed = bool(self.passed)


def central_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at every entry of ``x`` (``x`` is restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_gap(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over entries."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def random_batch(rng: np.random.Generator, n: int, d_c: int, d_t: int) -> BatchEmbeddings:
    mix = rng.standard_normal((d_c + d_t, d_c + d_t))
    z = rng.standard_normal((n, d_c + d_t)) @ mix
    return BatchEmbeddings(z[:, :d_c], z[:, d_c:])


def dense_dual_nll(psi: np.ndarray, z_t: np.ndarray, eps: float) -> float:
    n = psi.shape[0]
    k = psi @ psi.T + eps * np.eye(n)
    _, logdet = np.linalg.slogdet(k)
    return 0.5 * float(np.trace(z_t.T @ np.linalg.solve(k, z_t))) + 0.5 * z_t.shape[1] * logdet


def check_trace_trap(rng: np.random.Generator, batches: int = 20, n: int = 64, d: int = 8) -> list[CheckResult]:
    worst_val, worst_grad = 0.0, 0.0
    for _ in range(batches):
        b = random_batch(rng, n, d // 2, d - d // 2)
        z = b.z.copy()
        worst_val = max(worst_val, abs(trace_trap_datafit(b) - d / 2))
        f = lambda zz: trace_trap_datafit(BatchEmbeddings(zz[:, : d // 2], zz[:, d // 2:]))  # noqa: E731
        worst_grad = max(worst_grad, float(np.max(np.abs(central_gradient(f, z)))))
    return [CheckResult("trace_trap_value", worst_val, 1e-8, worst_val <= 1e-8),
            CheckResult("trace_trap_gradient", worst_grad, 1e-5, worst_grad <= 1e-5)]


def check_primal_dual(rng: np.random.Generator, batches: int = 20, n: int = 64, d: int = 8) -> CheckResult:
    worst = max(primal_dual_residual(random_batch(rng, n, d // 2, d - d // 2), 1e-6) for _ in range(batches))
    return CheckResult("primal_dual_residual", worst, 1e-6, worst <= 1e-6)


def check_rff(rng: np.random.Generator) -> list[CheckResult]:
    inv_gap, logdet_gap, nll_gap = 0.0, 0.0, 0.0
    for n, dfeat in ((64, 16), (256, 32)):
        psi = rng.standard_normal((n, dfeat)) * np.sqrt(2.0 / dfeat)
        zt = rng.standard_normal((n, 3))
        dense = psi @ psi.T + 0.1 * np.eye(n)
        inv_gap = max(inv_gap, float(np.max(np.abs(rff_woodbury_inverse(psi, 0.1) - np.linalg.inv(dense)))))
        logdet_gap = max(logdet_gap, abs(rff_logdet(psi, 0.1) - np.linalg.slogdet(dense)[1]))
        nll_gap = max(nll_gap, abs(rff_dual_nll(psi, zt, 0.1) - dense_dual_nll(psi, zt, 0.1)))
    return [CheckResult("woodbury_inverse_residual", inv_gap, 1e-8, inv_gap <= 1e-8),
            CheckResult("weinstein_aronszajn_logdet_residual", logdet_gap, 1e-8, logdet_gap <= 1e-8),
            CheckResult("rff_dual_nll_residual", nll_gap, 1e-8, nll_gap <= 1e-8)]


def check_infonce_bridge(rng: np.random.Generator, pairs: int = 50, m: int = 16, d: int = 32,
                         tau: float = 0.01) -> CheckResult:
    gaps = []
    for _ in range(pairs):
        bank = normalize_rows(rng.standard_normal((m, d)))
        zt = bank[rng.integers(m)]
        zc = normalize_rows(zt + 0.3 * rng.standard_normal(d) / np.sqrt(d))[0]
        gaps.append(kde_conditional_nll(zc, zt, bank, tau) - dam_conditional_nll(zc, zt, bank, tau))
    spread = float(np.ptp(gaps))
    return CheckResult("infonce_bridge_spread", spread, 1e-6, spread <= 1e-6)


def check_gradients(rng: np.random.Generator, instances: int = 10) -> list[CheckResult]:
    """MLP, MDN and full-loss gradients (parameters and inputs) against central differences."""
    mlp_gap, mdn_gap, loss_gap = 0.0, 0.0, 0.0
    for i in range(instances):
        # random biases keep every pre-activation off the ReLU kink
        net = init_mlp([3, 5, 4, 2], rng)
        net.biases = [0.1 * rng.standard_normal(b.shape) for b in net.biases]
        x = rng.standard_normal((6, 3))
        y = rng.standard_normal((6, 2))
        out, cache = mlp_forward(net, x)
        grads = mlp_backward(cache, 2 * (out - y) / y.size)
        f = lambda _a: float(np.mean((mlp_forward(net, x)[0] - y) ** 2))  # noqa: E731
        for arr, g in zip(net.params() + [x], grads.params() + [grads.input]):
            mlp_gap = max(mlp_gap, relative_gap(g, central_gradient(f, arr)))

        trunk, head = init_mdn(1, 2, 3, (6, 5), rng)
        trunk.biases = [0.1 * rng.standard_normal(b.shape) for b in trunk.biases]
        xc = rng.standard_normal((7, 1))
        t = rng.standard_normal((7, 2))
        p = mdn_forward(trunk, head, xc)
        agrads, g_in = mdn_backward(trunk, head, p, *mdn_nll_grads(p, t))
        f = lambda _a: mdn_nll(mdn_forward(trunk, head, xc), t)  # noqa: E731
        for arr, g in zip(trunk.params() + head.params() + [xc], agrads + [g_in]):
            mdn_gap = max(mdn_gap, relative_gap(g, central_gradient(f, arr)))

        ema = EmaCovariance(np.array([[1.3]]))
        flip = bool(i % 2)
        res = gmje_mdn_loss(trunk, head, xc, t, ema, entropy_max=flip)
        f = lambda _a: gmje_mdn_loss(trunk, head, xc, t, ema, entropy_max=flip).value  # noqa: E731
        for arr, g in zip(trunk.params() + head.params() + [xc], res.param_grads + [res.zc_grad]):
            loss_gap = max(loss_gap, relative_gap(g, central_gradient(f, arr)))
    return [CheckResult("mlp_gradient_gap", mlp_gap, 1e-4, mlp_gap <= 1e-4),
            CheckResult("mdn_gradient_gap", mdn_gap, 1e-4, mdn_gap <= 1e-4),
            CheckResult("gmje_loss_gradient_gap", loss_gap, 1e-4, loss_gap <= 1e-4)]


def run_all(rng: np.random.Generator) -> dict:
    checks = [*check_trace_trap(rng), check_primal_dual(rng), *check_rff(rng),
              check_infonce_bridge(rng), *check_gradients(rng)]
    return {"checks": [asdict(c) for c in checks], "all_passed": all(c.passed for c in checks)}
