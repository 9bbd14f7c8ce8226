import numpy as np
import pytest
from scipy.stats import chisquare

from gmje.rng import make_rng
from gmje.synthdata import (
    branch_values,
    conditional_mean,
    eval_grid,
    gen_dataset,
    gen_dataset_a,
    gen_dataset_b,
    read_csv,
    write_csv,
)


class TestDatasetA:
    def test_defaults(self):
        ds = gen_dataset_a()
        assert len(ds) == 3000 and ds.noise_sigma == 0.05
        np.testing.assert_array_equal(ds.x_c, gen_dataset("A", 3000, 0.05, 111).x_c)

    def test_noise_free_on_curves(self):
        ds = gen_dataset("A", n=500, noise=0.0)
        curves = [ds.x_c**2 + 0.5, -(ds.x_c**2) - 0.5, ds.x_c**3]
        for b in range(3):
            sel = ds.branch_id == b
            np.testing.assert_array_equal(ds.x_t[sel], curves[b][sel])

    def test_branch_frequencies(self):
        ds = gen_dataset("A", n=30000)
        assert chisquare(np.bincount(ds.branch_id, minlength=3)).pvalue > 0.01

    def test_context_range(self):
        ds = gen_dataset("A")
        assert ds.x_c.min() >= -1.0 and ds.x_c.max() < 1.0

    def test_noise_level(self):
        ds = gen_dataset("A", n=20000, noise=0.05)
        resid = ds.x_t - branch_values("A", ds.x_c)[ds.branch_id, np.arange(len(ds))]
        assert resid.std() == pytest.approx(0.05, rel=0.03)

    def test_conditional_mean(self):
        x = np.linspace(-1, 1, 11)
        np.testing.assert_allclose(conditional_mean("A", x), x**3 / 3, atol=1e-15)


class TestDatasetB:
    def test_intersection(self):
        np.testing.assert_array_equal(branch_values("B", np.zeros(1))[:, 0], 0.0)

    def test_noise_free_curves(self):
        ds = gen_dataset_b(n=300, noise=0.0)
        curves = np.stack([np.sin(3 * ds.x_c), -np.sin(3 * ds.x_c), np.zeros(300)])
        np.testing.assert_array_equal(ds.x_t, curves[ds.branch_id, np.arange(300)])

    def test_zero_conditional_mean(self):
        rng = make_rng(3)
        n = 10**5
        branch = rng.integers(0, 3, n)
        draws = branch_values("B", np.full(n, 0.5))[branch, np.arange(n)] + 0.05 * rng.standard_normal(n)
        assert abs(draws.mean()) <= 3 * draws.std() / np.sqrt(n)
        assert conditional_mean("B", np.array([0.5]))[0] == pytest.approx(0.0, abs=1e-15)


class TestGrid:
    def test_two(self):
        np.testing.assert_array_equal(eval_grid(2), [-1.0, 1.0])

    def test_three(self):
        np.testing.assert_array_equal(eval_grid(3), [-1.0, 0.0, 1.0])

    def test_default_spacing(self):
        g = eval_grid()
        assert g.size == 300
        np.testing.assert_allclose(np.diff(g), 2 / 299)

    def test_too_small(self):
        with pytest.raises(ValueError):
            eval_grid(1)


def test_csv_round_trip(tmp_path):
    ds = gen_dataset("B", n=50)
    write_csv(ds, tmp_path / "d.csv")
    back = read_csv(tmp_path / "d.csv", "B")
    np.testing.assert_array_equal(back.x_c, ds.x_c)
    np.testing.assert_array_equal(back.x_t, ds.x_t)
    np.testing.assert_array_equal(back.branch_id, ds.branch_id)
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "x_c,x_t,branch_id"


def test_unknown_kind():
    with pytest.raises(ValueError):
        gen_dataset("C")
