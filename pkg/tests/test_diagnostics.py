from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, strategies as st

from autopnp.denoisers import Denoiser
from autopnp.diagnostics import (BenchmarkReport, blom_positions, inv_normal_cdf, iteration_noise, pairs_csv,
                                 probplot_r2, run_benchmark)
from autopnp.phantoms import PhantomSpec, generate_phantoms
from autopnp.policies import ParamGrid, oracle_search
from autopnp.problems import csmri_forward, radial_mask
from autopnp.solvers import IterationTrace, run_solver

TV = Denoiser("tv-prox")
SMALL_GRID = ParamGrid(sigma=[10 / 255, 25 / 255], mu=[0.3, 1.0])


@pytest.fixture(scope="module")
def dataset():
    imgs = generate_phantoms(PhantomSpec(size=16, seed=8), 2)
    mask = radial_mask(16, 16, 0.35, seed=0)
    rng = np.random.default_rng(3)
    return [(csmri_forward(x, mask, 10 / 255, rng), x) for x in imgs]


# -- normal quantiles ------------------------------------------------------

def _phi_decimal(x: Decimal) -> Decimal:
    # Phi(x) = (1 + erf(x / sqrt 2)) / 2, erf by its Maclaurin series at 90 digits; fine for |x| < 7
    x = x / Decimal(2).sqrt()
    s, term, n = Decimal(0), x, 0
    while True:
        add = term / (2 * n + 1)
        s += add
        if abs(add) < Decimal(10) ** -70:
            break
        n += 1
        term = -term * x * x / n
    return (1 + 2 / _PI.sqrt() * s) / 2


def _pi_decimal():
    getcontext().prec = 90
    # Machin: pi = 16 atan(1/5) - 4 atan(1/239)
    def atan_inv(k):
        x, s, n, t = Decimal(1) / k, Decimal(0), 0, Decimal(1) / k
        while t != 0:
            s += t / (2 * n + 1) * (-1) ** n
            n += 1
            t = x ** (2 * n + 1)
            if t < Decimal(10) ** -88:
                break
        return s
    return 16 * atan_inv(5) - 4 * atan_inv(239)


_PI = _pi_decimal()


def ndtri_oracle(p: float) -> float:
    getcontext().prec = 90
    p = Decimal(p)
    x = Decimal(float(inv_normal_cdf(float(p))))  # start close, refine by Newton
    for _ in range(6):
        pdf = (-(x * x) / 2).exp() / (2 * _PI).sqrt()
        x -= (_phi_decimal(x) - p) / pdf
    return float(x)


@pytest.mark.parametrize("p", [1e-6, 1e-3, 0.02, 0.25, 0.5, 0.6, 0.9, 0.999, 1 - 1e-6])
def test_ndtri_matches_high_precision(p):
    assert abs(inv_normal_cdf(p) - ndtri_oracle(p)) <= 1e-8


def test_blom_positions():
    b = blom_positions(4)
    np.testing.assert_allclose(b, (np.arange(1, 5) - 0.375) / 4.25)
    np.testing.assert_allclose(b + b[::-1], 1.0)


# -- probability plots -----------------------------------------------------

def test_exact_quantiles_are_straight():
    q = inv_normal_cdf(blom_positions(200))
    pairs, r2 = probplot_r2(q)
    assert r2 >= 0.999
    np.testing.assert_allclose(pairs[:, 0], q)


def test_gaussian_sample_high_r2(rng):
    assert probplot_r2(rng.standard_normal(4096))[1] >= 0.99


def test_laplace_below_gaussian(rng):
    g = probplot_r2(rng.standard_normal(4096))[1]
    lap = probplot_r2(rng.laplace(size=4096))[1]
    assert lap < g


@given(a=st.floats(0.1, 50), b=st.floats(-10, 10))
def test_r2_affine_invariant(a, b):
    s = np.random.default_rng(0).standard_normal(300)
    assert abs(probplot_r2(a * s + b)[1] - probplot_r2(s)[1]) <= 1e-9


def test_subsampling_deterministic(rng):
    s = rng.standard_normal(20000)
    p1, r1 = probplot_r2(s, max_points=1000, seed=4)
    p2, r2 = probplot_r2(s, max_points=1000, seed=4)
    assert p1.shape == (1000, 2) and r1 == r2


@pytest.mark.parametrize("bad", [np.full(64, 3.0), np.arange(5.0), np.r_[np.zeros(30), np.nan]])
def test_probplot_rejects(bad):
    with pytest.raises(ValueError):
        probplot_r2(bad)


def test_pairs_csv_format():
    txt = pairs_csv(np.array([[0.0, 1.0], [-1.5, 2.25]]))
    assert txt.splitlines() == ["theoretical,ordered", "0.00000000,1.00000000", "-1.50000000,2.25000000"]


# -- iteration noise -------------------------------------------------------

def test_iteration_noise_trivial():
    truth = np.arange(16.0).reshape(4, 4)
    tr = IterationTrace(xbar=[truth + 1.0, truth.copy()])
    eps = iteration_noise(tr, truth, "admm")
    assert [e.k for e in eps] == [1, 2]
    np.testing.assert_array_equal(eps[0].values, np.ones(16))
    assert eps[1].norm == 0.0


def test_iteration_noise_errors():
    with pytest.raises(ValueError):
        iteration_noise(IterationTrace(), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        iteration_noise(IterationTrace(xbar=[np.zeros((3, 3))]), np.zeros((2, 2)))


def test_oracle_run_shrinks_noise(dataset):
    model, truth = dataset[0]
    pol = oracle_search(model, truth, SMALL_GRID, "admm", TV)
    tr = run_solver(model, "admm", pol, TV, truth=truth)
    eps = iteration_noise(tr, truth, "admm")
    assert len(eps) == 30
    assert eps[-1].norm <= eps[0].norm


# -- benchmark -------------------------------------------------------------

def test_benchmark_star_dominates_and_is_deterministic(dataset):
    args = (dataset, ["admm", "pgm"], ["fixed", "fixed-optimal", "oracle"], TV)
    rep = run_benchmark(*args, grid=SMALL_GRID)
    assert len(rep.rows) == 12
    for r in rep.rows:
        if not r.policy.endswith("*"):
            star = rep.row(r.scheme, r.policy + "*")
            assert all(b >= a - 1e-12 for a, b in zip(r.psnr, star.psnr))
            assert r.failed == 0
    for s in ("admm", "pgm"):
        assert rep.row(s, "oracle").mean_psnr >= rep.row(s, "fixed-optimal").mean_psnr - 1e-9
    assert run_benchmark(*args, grid=SMALL_GRID).to_csv() == rep.to_csv()
    assert "oracle*" in rep.to_text()


def test_benchmark_callable_policy_and_errors(dataset):
    from autopnp.policies import fixed_policy
    rep = run_benchmark(dataset, ["hqs"], [("mine", lambda s, m, t: fixed_policy(s, m))], TV, star=False)
    assert [r.policy for r in rep.rows] == ["mine"]
    with pytest.raises(ValueError):
        run_benchmark([], ["admm"], ["fixed"], TV)
    with pytest.raises(ValueError):
        run_benchmark(dataset, ["admm"], ["learned"], TV)
    with pytest.raises(KeyError):
        BenchmarkReport([]).row("admm", "fixed")
