import numpy as np
import pytest

from gmje.gaussian import JointGaussian


def random_spd(rng: np.random.Generator, d: int, floor: float = 0.5) -> np.ndarray:
    a = rng.standard_normal((d, d))
    return a @ a.T / d + floor * np.eye(d)


def random_joint(rng: np.random.Generator, d_c: int, d_t: int) -> JointGaussian:
    d = d_c + d_t
    return JointGaussian.from_full(rng.standard_normal(d), random_spd(rng, d), d_c)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


class Timed:
    def __init__(self, value, seconds: float):
        self.value = value
        self.seconds = seconds


def _timed(fn, *args):
    import time

    t0 = time.perf_counter()
    out = fn(*args)
    return Timed(out, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def dataset_a():
    from gmje.synthdata import gen_dataset

    return gen_dataset("A", n=3000, noise=0.05, seed=111)


@pytest.fixture(scope="session")
def dataset_b():
    from gmje.synthdata import gen_dataset

    return gen_dataset("B", n=3000, noise=0.05, seed=111)


@pytest.fixture(scope="session")
def jepa_a(dataset_a):
    from gmje.neural import TrainConfig, jepa_mse_train
    from gmje.rng import make_rng

    return _timed(jepa_mse_train, dataset_a.x_c, dataset_a.x_t, TrainConfig(), make_rng(111))


@pytest.fixture(scope="session")
def mdn_a(dataset_a):
    from gmje.neural import TrainConfig, train_gmje_mdn
    from gmje.rng import make_rng

    return _timed(train_gmje_mdn, dataset_a.x_c, dataset_a.x_t, TrainConfig(), make_rng(111))


@pytest.fixture(scope="session")
def mdn_b(dataset_b):
    from gmje.neural import TrainConfig, train_gmje_mdn
    from gmje.rng import make_rng

    return _timed(train_gmje_mdn, dataset_b.x_c, dataset_b.x_t, TrainConfig(), make_rng(111))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
