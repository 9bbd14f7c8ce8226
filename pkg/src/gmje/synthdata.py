"""Ambiguous one-to-many regression datasets and their evaluation grid."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Literal

import numpy as np

from .rng import DEFAULT_SEED, make_rng

DEFAULT_N = 3000
DEFAULT_NOISE = 0.05
GRID_SIZE = 300

Branch = Callable[[np.ndarray], np.ndarray]

BRANCHES: dict[str, tuple[Branch, ...]] = {
    "A": (
        lambda x: x**2 + 0.5,
        lambda x: -(x**2) - 0.5,
        lambda x: x**3,
    ),
    "B": (
        lambda x: np.sin(3 * x),
        lambda x: -np.sin(3 * x),
        lambda x: np.zeros_like(x),
    ),
}


@dataclass(frozen=True)
class SyntheticDataset:
    x_c: np.ndarray
    x_t: np.ndarray
    branch_id: np.ndarray
    dataset_kind: Literal["A", "B"]
    noise_sigma: float
    seed: int | None = None

    def __len__(self) -> int:
        return self.x_c.size

    @property
    def joint(self) -> np.ndarray:
        return np.column_stack([self.x_c, self.x_t])

    def branch_values(self, x: np.ndarray) -> np.ndarray:
        """Noise-free branch curves evaluated at ``x``; shape (3, len(x))."""
        return branch_values(self.dataset_kind, x)


def branch_values(kind: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.stack([f(x) for f in BRANCHES[kind]])


def conditional_mean(kind: str, x: np.ndarray) -> np.ndarray:
    return branch_values(kind, x).mean(0)


def _generate(kind: str, n: int, noise: float, rng: np.random.Generator, seed: int | None) -> SyntheticDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    x_c = rng.uniform(-1.0, 1.0, n)
    branch = rng.integers(0, 3, n)
    curves = branch_values(kind, x_c)
    x_t = curves[branch, np.arange(n)] + noise * rng.standard_normal(n)
    return SyntheticDataset(x_c, x_t, branch, kind, noise, seed)  # type: ignore[arg-type]


def gen_dataset_a(n: int = DEFAULT_N, noise: float = DEFAULT_NOISE, rng: np.random.Generator | None = None,
                  seed: int | None = None) -> SyntheticDataset:
    """Branches ``x^2 + 0.5``, ``-x^2 - 0.5`` and ``x^3``; they never meet."""
    rng = rng if rng is not None else make_rng(DEFAULT_SEED if seed is None else seed)
    return _generate("A", n, noise, rng, seed)


def gen_dataset_b(n: int = DEFAULT_N, noise: float = DEFAULT_NOISE, rng: np.random.Generator | None = None,
                  seed: int | None = None) -> SyntheticDataset:
    """Branches ``sin 3x``, ``-sin 3x`` and ``0``; all three cross at the origin."""
    rng = rng if rng is not None else make_rng(DEFAULT_SEED if seed is None else seed)
    return _generate("B", n, noise, rng, seed)


def gen_dataset(kind: str, n: int = DEFAULT_N, noise: float = DEFAULT_NOISE, seed: int = DEFAULT_SEED) -> SyntheticDataset:
    if kind not in BRANCHES:
        raise ValueError(f"dataset kind must be 'A' or 'B', got {kind!r}")
    return _generate(kind, n, noise, make_rng(seed), seed)


def eval_grid(count: int = GRID_SIZE) -> np.ndarray:
    if count < 2:
        raise ValueError("grid needs at least 2 points")
    return np.linspace(-1.0, 1.0, count)


def write_csv(ds: SyntheticDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_c", "x_t", "branch_id"])
        for xc, xt, b in zip(ds.x_c, ds.x_t, ds.branch_id):
            w.writerow([repr(float(xc)), repr(float(xt)), int(b)])


def read_csv(path: str | Path, kind: str = "A", noise: float = float("nan")) -> SyntheticDataset:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return SyntheticDataset(data[:, 0], data[:, 1], data[:, 2].astype(int), kind, noise)  # type: ignore[arg-type]
