from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from autopnp.phantoms import PhantomSpec, generate_phantoms
from autopnp.problems import (CsMriModel, cartesian_mask, cdp_fidelity_grad, cdp_forward, cdp_init, csmri_forward,
                              csmri_init, csmri_prox, load_model, make_problem, qis_data_term, qis_forward,
                              qis_init, qis_prox, QisModel, radial_mask, save_model, stack_models)
from autopnp.tensor import dft2, make_rng, psnr
from helpers import cg_solve, direct_dft2, direct_idft2


# -- CS-MRI ----------------------------------------------------------------

def test_csmri_forward_contracts(rng):
    x = rng.random((8, 8))
    full = np.ones((8, 8))
    np.testing.assert_array_equal(csmri_forward(x, full, 0.0, rng).y, dft2(x))
    assert not np.any(csmri_forward(np.zeros((8, 8)), full, 0.0, rng).y)
    mask = radial_mask(32, 32, 0.25, seed=0)
    m = csmri_forward(rng.random((32, 32)), mask, 15 / 255, rng)
    assert np.linalg.norm(m.y[mask == 0]) == 0
    with pytest.raises(ValueError):
        csmri_forward(x, np.zeros((8, 8)), 0.1, rng)


@pytest.mark.parametrize("maker", [radial_mask, cartesian_mask])
@pytest.mark.parametrize("ratio", [0.5, 0.25, 0.125])
def test_mask_ratio(maker, ratio):
    m = maker(32, 32, ratio, seed=1)
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert abs(m.mean() - ratio) < 0.05
    np.testing.assert_array_equal(m, maker(32, 32, ratio, seed=1))


def test_csmri_init(rng):
    x = rng.random((8, 8))
    m = csmri_forward(x, np.ones((8, 8)), 0.0, rng)
    np.testing.assert_allclose(csmri_init(m, clip=False), x, atol=1e-10)
    # half-plane mask keeping DC: oracle by explicit DFT matrices
    half = np.zeros((8, 8))
    half[:4] = 1
    c = np.full((8, 8), 0.6)
    mh = csmri_forward(c, half, 0.0, rng)
    want = np.real(direct_idft2(half * direct_dft2(c)))
    np.testing.assert_allclose(csmri_init(mh, clip=False), want, atol=1e-12)
    np.testing.assert_allclose(want, 0.6, atol=1e-12)
    z = CsMriModel(half, 0.0, np.zeros((8, 8), complex))
    assert not np.any(csmri_init(z))


def test_csmri_prox_closed_forms(rng):
    v = rng.random((8, 8))
    empty = SimpleNamespace(y=np.zeros((8, 8), complex), mask=np.zeros((8, 8)))
    np.testing.assert_allclose(csmri_prox(v, empty, 0.3), v, atol=1e-14)
    xs = rng.random((8, 8))
    m = csmri_forward(xs, np.ones((8, 8)), 0.0, rng)
    np.testing.assert_allclose(csmri_prox(v, m, 1.0), (xs + v) / 2, atol=1e-14)
    with pytest.raises(ValueError):
        csmri_prox(v, m, 0.0)


def test_csmri_prox_matches_cg_oracle():
    for seed in range(20):
        r = np.random.default_rng(seed)
        mask = (r.random((16, 16)) < 0.4).astype(float)
        mask[0, 0] = 1
        m = csmri_forward(r.random((16, 16)), mask, 0.05, r)
        v = r.random((16, 16)) + 1j * r.random((16, 16))
        mu = r.uniform(0.01, 2)
        op = lambda x: direct_idft2(mask * direct_dft2(x)) + mu * x
        ref = cg_solve(op, direct_idft2(m.y) + mu * v)
        assert np.abs(csmri_prox(v, m, mu) - ref).max() <= 1e-6


def test_csmri_prox_first_order_optimality(rng):
    mask = radial_mask(16, 16, 0.3)
    m = csmri_forward(rng.random((16, 16)), mask, 0.05, rng)
    v = rng.random((16, 16))
    mu = 0.2
    x = csmri_prox(v, m, mu)
    obj = lambda z: 0.5 * np.sum(np.abs(m.y - mask * dft2(z)) ** 2) + 0.5 * mu * np.sum(np.abs(z - v) ** 2)
    h = 1e-6
    g = np.zeros((16, 16), complex)
    for idx in np.ndindex(16, 16):
        for part in (1.0, 1j):
            e = np.zeros((16, 16), complex)
            e[idx] = part * h
            d = (obj(x + e) - obj(x - e)) / (2 * h)
            g[idx] += d if part == 1.0 else 1j * d
    assert np.linalg.norm(g) <= 1e-5 * (1 + np.linalg.norm(v))


# -- QIS -------------------------------------------------------------------

def test_qis_forward_contracts(rng):
    m0 = qis_forward(np.zeros((16, 16)), 8, rng)
    assert not np.any(m0.ones)
    m1 = qis_forward(np.ones((64, 64)), 8, rng)
    assert abs((m1.ones / 64).mean() - (1 - np.exp(-1))) <= 0.02
    mx = qis_forward(rng.random((16, 16)), 4, rng)
    np.testing.assert_array_equal(mx.ones + mx.zeros, 16)
    assert np.all(mx.ones >= 0) and np.all(mx.ones == np.round(mx.ones))


def test_qis_init():
    K = 8
    zeros = np.array([[64.0, round(64 * np.exp(-1)), 0.0]])
    m = QisModel(K, 64 - zeros, zeros)
    raw = -np.log(np.where(zeros == 0, 0.5, zeros) / 64)
    x = qis_init(m)
    assert x[0, 0] == 0
    assert abs(raw[0, 1] - 1) < 0.03
    assert np.isfinite(raw[0, 2]) and x[0, 2] > 0


def test_qis_prox_no_ones_is_closed_form():
    zeros = np.array([[16.0, 16.0, 16.0]])
    m = QisModel(4, np.zeros_like(zeros), zeros)
    v = np.array([[0.1, 1.0, 1.8]])
    mu = 20.0
    want = np.clip(v - m.rate * zeros / mu, 0, 2)
    np.testing.assert_allclose(qis_prox(v, m, mu), want, atol=2e-3)


def _grid_prox(v, ones, zeros, K, mu):
    m = QisModel(K, np.array([[ones]], float), np.array([[zeros]], float))
    xs = np.arange(1, 20001) * 1e-4
    f = qis_data_term(xs[:, None, None], m)[:, 0, 0] + 0.5 * mu * (xs - v) ** 2
    return xs[np.argmin(f)]


def test_qis_prox_generic_pixel():
    m = QisModel(4, np.array([[12.0]]), np.array([[4.0]]))
    out = qis_prox(np.array([[0.5]]), m, 10.0)[0, 0]
    assert abs(out - _grid_prox(0.5, 12, 4, 4, 10.0)) <= 2e-3


def test_qis_prox_grid_oracle_many():
    r = np.random.default_rng(7)
    for _ in range(20):
        K = int(r.integers(2, 6))
        ones = float(r.integers(1, K * K))
        v, mu = r.uniform(0, 1.5), r.uniform(0.5, 50)
        m = QisModel(K, np.array([[ones]]), np.array([[K * K - ones]]))
        assert abs(qis_prox(np.array([[v]]), m, mu)[0, 0] - _grid_prox(v, ones, K * K - ones, K, mu)) <= 2e-3


def test_qis_prox_large_mu_and_errors(rng):
    m = qis_forward(rng.random((8, 8)), 4, rng)
    v = rng.uniform(0.1, 1.0, (8, 8))
    np.testing.assert_allclose(qis_prox(v, m, 1e6), v, atol=1e-3)
    with pytest.raises(ValueError):
        qis_prox(v, m, -1.0)


def test_qis_prox_not_beaten_by_perturbation(rng):
    m = qis_forward(rng.random((6, 6)), 4, rng)
    v = rng.random((6, 6))
    mu = 5.0
    x = qis_prox(v, m, mu, iters=40)
    f = lambda z: qis_data_term(z, m) + 0.5 * mu * (z - v) ** 2
    base = f(x)
    for _ in range(100):
        z = np.clip(x + rng.uniform(-1e-2, 1e-2, x.shape), 1e-6, 2)
        assert np.all(f(z) >= base - 1e-9)


# -- CDP -------------------------------------------------------------------

def test_cdp_forward_contracts(rng):
    x = rng.random((8, 8))
    m = cdp_forward(x, rng, 0.0)
    np.testing.assert_allclose(np.abs(m.masks), 1.0, atol=1e-12)
    np.testing.assert_allclose(m.y, np.abs(dft2(m.masks * x)), atol=1e-14)
    assert abs((m.y ** 2).sum() - 4 * (x ** 2).sum()) < 1e-10
    assert not np.any(cdp_forward(np.zeros((8, 8)), rng, 0.5).y)
    assert np.all(cdp_forward(x, rng, 0.5).y >= 0)


def test_cdp_gradient(rng):
    x = rng.random((8, 8))
    m = cdp_forward(x, rng, 0.0)
    assert np.abs(cdp_fidelity_grad(x, m)).max() < 1e-10
    z = rng.random((8, 8))
    g = cdp_fidelity_grad(z, m)
    h = 1e-6
    fd = np.zeros_like(z)
    for idx in np.ndindex(8, 8):
        e = np.zeros_like(z)
        e[idx] = h
        fd[idx] = (m.fidelity(z + e) - m.fidelity(z - e)) / (2 * h)
    assert np.linalg.norm(fd - g) / np.linalg.norm(fd) <= 1e-5
    assert not np.any(cdp_fidelity_grad(np.zeros((8, 8)), m))


def test_cdp_init(rng):
    x = generate_phantoms(PhantomSpec(size=16, seed=3), 1)[0]
    m = cdp_forward(x, rng, 0.0)
    assert psnr(cdp_init(m, 50), x) >= psnr(cdp_init(m, 0), x)
    np.testing.assert_array_equal(cdp_init(m, 0), cdp_init(m, 0))
    m.y = np.zeros_like(m.y)
    assert not np.any(cdp_init(m, 10))


# -- shared ----------------------------------------------------------------

@given(st.sampled_from(["csmri", "qis", "cdp"]), st.integers(0, 1000))
def test_forward_deterministic(kind, seed):
    x = np.random.default_rng(seed).random((8, 8))
    mask = radial_mask(8, 8, 0.5)
    a = make_problem(kind, x, make_rng(seed), mask=mask, cdp_alpha=0.1)
    b = make_problem(kind, x, make_rng(seed), mask=mask, cdp_alpha=0.1)
    np.testing.assert_array_equal(a.init(), b.init())


def test_stack_select_round_trip(rng):
    xs = rng.random((3, 8, 8))
    mask = radial_mask(8, 8, 0.5)
    singles = [make_problem("csmri", x, rng, mask=mask) for x in xs]
    batch = stack_models(singles)
    for i, s in enumerate(singles):
        np.testing.assert_array_equal(batch.select(i).y, s.y)
        np.testing.assert_allclose(batch.init()[i], s.init())


@pytest.mark.parametrize("kind", ["csmri", "qis", "cdp"])
def test_model_bundle_round_trip(kind, tmp_path, rng):
    m = make_problem(kind, rng.random((8, 8)), rng, mask=radial_mask(8, 8, 0.5), cdp_alpha=0.2)
    save_model(tmp_path / "m.tft", m)
    back = load_model(tmp_path / "m.tft")
    assert back.kind == kind
    np.testing.assert_array_equal(back.init(), m.init())
