import numpy as np

DEFAULT_SEED = 111


def make_rng(seed: int | None = DEFAULT_SEED) -> np.random.Generator:
    """Counter-based Philox generator; every sampling API takes one explicitly."""
    return np.random.Generator(np.random.Philox(seed))
