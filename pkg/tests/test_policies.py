import numpy as np
import pytest
from hypothesis import given, strategies as st

from autopnp import micrograd as mg
from autopnp.denoisers import Denoiser
from autopnp.env import EnvConfig, encode_observation, observation_channels
from autopnp.phantoms import PhantomSpec, generate_phantoms
from autopnp.policies import (ACTION_SPECS, FIXED_MU, FIXED_SIGMA, GreedyPolicy, LearnedPolicy, ParamGrid,
                              fixed_optimal_search, fixed_policy, grid_final_psnr, greedy_step, handcrafted_policy,
                              handcrafted_sigmas, learned_policy_act, map_action, oracle_search, singleton_grid)
from autopnp.problems import csmri_forward, radial_mask
from autopnp.solvers import Context, init_state, run_block, run_solver
from autopnp.tensor import SIGMA_MAX, psnr

TV = Denoiser("tv-prox")
SMALL = ParamGrid(sigma=np.geomspace(5 / 255, 40 / 255, 4), mu=np.geomspace(0.03, 1.0, 3))


@pytest.fixture(scope="module")
def inst():
    x = generate_phantoms(PhantomSpec(size=16, seed=8), 1)[0]
    return csmri_forward(x, radial_mask(16, 16, 0.3, seed=2), 15 / 255, np.random.default_rng(1)), x


def _ctx(m, block=0):
    return Context(init_state(m), m, block, 6, "admm", TV, 5)


def test_fixed_policy(inst):
    m, _ = inst
    pol = fixed_policy()
    a0, a5 = pol.act(_ctx(m, 0)), pol.act(_ctx(m, 5))
    assert a0.params == a5.params
    assert a0.params.sigma == 15 / 255 and a0.params.mu == 0.1
    assert a0.stop is False and a5.stop is False


def test_handcrafted_schedule():
    s = handcrafted_sigmas(40 / 255, 5 / 255, 30)
    assert s[0] == pytest.approx(40 / 255, abs=1e-15)
    assert abs(s[29] - 5 / 255) <= 1e-12
    assert np.all(np.diff(s) < 0)
    k = np.arange(30)
    np.testing.assert_allclose(s, (40 / 255) * (1 / 8) ** (k / 29), rtol=1e-12)
    with pytest.raises(ValueError):
        handcrafted_sigmas(5 / 255, 40 / 255, 30)


def test_handcrafted_policy_emits_schedule(inst):
    m, x = inst
    tr = run_solver(m, "admm", handcrafted_policy(40 / 255, 5 / 255, 30), TV, 30, truth=x)
    np.testing.assert_allclose([p.sigma for p in tr.params], handcrafted_sigmas(40 / 255, 5 / 255, 30))
    assert all(p.mu == FIXED_MU for p in tr.params)


def test_grid_ordering():
    g = ParamGrid()
    assert len(g.sigma) == 12 and len(g.mu) == 8
    assert g.sigma[0] == pytest.approx(1 / 255) and g.sigma[-1] == pytest.approx(SIGMA_MAX)
    pts = g.points("admm")
    assert pts.sigma[0] == g.sigma[0] and pts.mu[1] == g.mu[1]
    with pytest.raises(ValueError):
        ParamGrid(sigma=[0.2, 0.1])


def test_oracle_singleton_and_dominance(inst):
    m, x = inst
    one = singleton_grid(0.05, 0.2)
    p = oracle_search(m, x, one, "admm", TV).params
    assert p.sigma == 0.05 and p.mu == 0.2
    vals, pts = grid_final_psnr(m, x, SMALL, "admm", TV)
    pol = oracle_search(m, x, SMALL, "admm", TV)
    assert pol.psnr >= vals.max()
    final = run_solver(m, "admm", pol, TV, 30, truth=x).final_psnr
    assert final == pytest.approx(pol.psnr, abs=1e-9)
    again = oracle_search(m, x, SMALL, "admm", TV)
    assert again.params == pol.params


def test_oracle_tie_breaks_small():
    x = np.full((8, 8), 0.5)
    m = csmri_forward(x, np.ones((8, 8)), 0.0, np.random.default_rng(0))
    g = ParamGrid(sigma=[0.01, 0.02], mu=[0.1, 0.2])
    p = oracle_search(m, x, g, "admm", TV).params
    assert p.sigma == 0.01 and p.mu == 0.1


def test_fixed_optimal(inst):
    m, x = inst
    single = fixed_optimal_search([(m, x)], SMALL, "admm", TV)
    assert single.params == oracle_search(m, x, SMALL, "admm", TV).params
    with pytest.raises(ValueError):
        fixed_optimal_search([], SMALL, "admm", TV)


def test_greedy(inst):
    m, x = inst
    assert greedy_step(init_state(m), m, x, singleton_grid(0.1, 0.3), "admm", TV).sigma == 0.1
    st0 = init_state(m)
    g = greedy_step(st0, m, x, SMALL, "admm", TV)
    best = psnr(run_block(st0, g, m, "admm", TV, 5).estimate(), x)
    pts = SMALL.points("admm")
    for i in range(len(pts.sigma)):
        assert best >= psnr(run_block(st0, pts.select(i), m, "admm", TV, 5).estimate(), x) - 1e-12
    with pytest.raises(ValueError):
        GreedyPolicy(SMALL).act(_ctx(m))


def _zero_heads(net):
    for o in net.outputs:
        dense = net.nodes[o].inputs[0]
        net.params[f"{dense}.W"][...] = 0
        net.params[f"{dense}.b"][...] = 0
    return net


def test_learned_zero_logits(inst):
    m, _ = inst
    net = _zero_heads(mg.policy_net(observation_channels(True), 2, seed=1))
    obs = encode_observation(init_state(m), m.noise_level, 0, 6)
    a = learned_policy_act(net, obs, "train", np.random.default_rng(0))
    assert a.p_stop == pytest.approx(0.5)
    ev = learned_policy_act(net, obs, "eval")
    assert ev.stop is False
    assert ev.params.sigma == pytest.approx(25 / 255)
    assert ev.params.mu == pytest.approx(np.sqrt(1e-3))
    ev2 = learned_policy_act(net, obs, "eval")
    assert ev2.params == ev.params and np.array_equal(ev2.u, ev.u)
    with pytest.raises(ValueError):
        learned_policy_act(net, obs[:3], "eval")


@given(st.lists(st.floats(-30, 30), min_size=3, max_size=3))
def test_map_action_bounds_and_monotone(logits):
    u = 1 / (1 + np.exp(-np.asarray(logits)))
    for scheme, spec in ACTION_SPECS.items():
        p = map_action(u[: len(spec)], scheme)
        for name, lo, hi, _ in spec:
            assert lo - 1e-15 <= getattr(p, name) <= hi + 1e-15
    lo_p, hi_p = map_action([0.2, 0.5], "admm"), map_action([0.7, 0.5], "admm")
    assert hi_p.sigma >= lo_p.sigma


def test_learned_bounds_many_observations():
    net = mg.policy_net(5, 3, seed=2)
    rng = np.random.default_rng(0)
    obs = rng.standard_normal((10_000, 5, 8, 8)) * 3
    a = learned_policy_act(net, obs, "train", rng, "apgm")
    assert np.all((a.params.sigma >= 0) & (a.params.sigma <= SIGMA_MAX))
    assert np.all((a.params.gamma >= 1e-3) & (a.params.gamma <= 1))
    assert np.all((a.params.qbar >= 0) & (a.params.qbar < 1))


def test_learned_policy_in_solver(inst):
    m, x = inst
    net = mg.policy_net(observation_channels(True), 2, seed=3)
    tr = run_solver(m, "admm", LearnedPolicy(net, "eval", env_config=EnvConfig()), TV, 30, truth=x)
    assert len(tr) <= 30 and len(tr) % 5 == 0
