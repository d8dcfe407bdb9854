"""Parameter-selection policies: fixed, handcrafted, fixed-optimal, greedy, oracle, learned."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import micrograd as mg
from .problems import stack_models
from .solvers import Context, StepParams, init_state, run_block
from .tensor import SIGMA_MAX, psnr

FIXED_SIGMA = 15.0 / 255.0
FIXED_MU = 0.1
FIXED_EXTRAS = {"gamma": 1.0, "lam": 1.0, "delta": 1.0}

SIGMA_RANGE = (1.0 / 255.0, SIGMA_MAX)
MU_RANGE = (1e-3, 1.0)
LAM_RANGE = (1e-2, 1e2)
DELTA_RANGE = (0.1, 10.0)
QBAR_RANGE = (0.0, 0.99)

# continuous action coordinates per scheme: (field, low, high, law)
ACTION_SPECS = {
    "admm": [("sigma", 0.0, SIGMA_MAX, "lin"), ("mu", *MU_RANGE, "geo")],
    "hqs": [("sigma", 0.0, SIGMA_MAX, "lin"), ("mu", *MU_RANGE, "geo")],
    "pgm": [("sigma", 0.0, SIGMA_MAX, "lin"), ("gamma", *MU_RANGE, "geo")],
    "apgm": [("sigma", 0.0, SIGMA_MAX, "lin"), ("gamma", *MU_RANGE, "geo"), ("qbar", *QBAR_RANGE, "lin")],
    "red": [("sigma", 0.0, SIGMA_MAX, "lin"), ("mu", *MU_RANGE, "geo"), ("lam", *LAM_RANGE, "geo")],
    "damp": [("delta", *DELTA_RANGE, "geo")],
}


def penalty_scale(model) -> float:
    """QIS penalties live on the jot-count scale of its data term."""
    return float(model.jots) if getattr(model, "kind", "") == "qis" else 1.0


def action_spec(scheme: str, model=None):
    spec = ACTION_SPECS[scheme]
    if model is None:
        return spec
    c = penalty_scale(model)
    return [(n, lo * c, hi * c, law) if n == "mu" else (n, lo, hi, law) for n, lo, hi, law in spec]


def map_action(u, scheme: str, model=None) -> StepParams:
    """Map sigmoid outputs in [0, 1] (last axis) to StepParams."""
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    kw = {}
    for j, (name, lo, hi, law) in enumerate(action_spec(scheme, model)):
        uj = u[..., j]
        kw[name] = lo + (hi - lo) * uj if law == "lin" else lo * (hi / lo) ** uj
    if scheme != "damp" and "sigma" not in kw:
        kw["sigma"] = FIXED_SIGMA
    if scheme == "damp":
        kw["sigma"] = None
    return StepParams(**kw)


@dataclass
class Action:
    stop: bool | np.ndarray
    params: StepParams | list
    u: np.ndarray | None = None
    p_stop: np.ndarray | None = None


# -- grid ------------------------------------------------------------------

def geomspace(lo, hi, n):
    return np.exp(np.linspace(np.log(lo), np.log(hi), n))


@dataclass
class ParamGrid:
    sigma: np.ndarray = field(default_factory=lambda: geomspace(*SIGMA_RANGE, 12))
    mu: np.ndarray = field(default_factory=lambda: geomspace(*MU_RANGE, 8))
    lam: np.ndarray = field(default_factory=lambda: geomspace(1e-1, 1e1, 3))
    delta: np.ndarray = field(default_factory=lambda: geomspace(*DELTA_RANGE, 12))

    def __post_init__(self):
        for name in ("sigma", "mu", "lam", "delta"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if np.any(v <= 0) or np.any(np.diff(v) <= 0):
                raise ValueError(f"grid axis {name} must be positive and strictly increasing")
            setattr(self, name, v)

    def points(self, scheme: str, model=None) -> StepParams:
        """All grid points as one StepParams of equal-length vectors.

        Ordering is sigma-major then the penalty/step axis, ascending, so the
        first maximiser is the smallest sigma, then the smallest mu.
        """
        c = penalty_scale(model) if model is not None else 1.0
        if scheme == "damp":
            return StepParams(sigma=None, delta=self.delta.copy())
        axes = [self.sigma, self.mu * c]
        if scheme == "red":
            axes.append(self.lam)
        mesh = [a.ravel() for a in np.meshgrid(*axes, indexing="ij")]
        second = "gamma" if scheme in ("pgm", "apgm") else "mu"
        kw = {"sigma": mesh[0], second: mesh[1]}
        if scheme == "red":
            kw["lam"] = mesh[2]
        return StepParams(**kw)

    def size(self, scheme: str) -> int:
        p = self.points(scheme)
        return len(p.delta if scheme == "damp" else p.sigma)


def singleton_grid(sigma, mu, lam=1.0, delta=1.0) -> ParamGrid:
    return ParamGrid(sigma=[sigma], mu=[mu], lam=[lam], delta=[delta])


# -- constant policies -----------------------------------------------------

class Policy:
    kind = "base"

    def act(self, ctx: Context) -> Action:
        raise NotImplementedError


class ConstantPolicy(Policy):
    def __init__(self, params: StepParams, kind: str = "fixed"):
        self.params = params
        self.kind = kind

    def act(self, ctx):
        return Action(False, self.params)


def default_params(scheme: str, sigma=FIXED_SIGMA, mu=FIXED_MU, model=None) -> StepParams:
    c = penalty_scale(model) if model is not None else 1.0
    if scheme == "damp":
        return StepParams(sigma=None, delta=FIXED_EXTRAS["delta"])
    if scheme in ("pgm", "apgm"):
        return StepParams(sigma=sigma, gamma=FIXED_EXTRAS["gamma"])
    if scheme == "red":
        return StepParams(sigma=sigma, mu=mu * c, lam=FIXED_EXTRAS["lam"])
    return StepParams(sigma=sigma, mu=mu * c)


def fixed_policy(scheme: str = "admm", model=None) -> ConstantPolicy:
    return ConstantPolicy(default_params(scheme, model=model), "fixed")


class HandcraftedPolicy(Policy):
    kind = "handcrafted"

    def __init__(self, sigmas, mu=FIXED_MU, scheme="admm"):
        self.sigmas = np.asarray(sigmas, dtype=float)
        self.mu = mu
        self.scheme = scheme

    def schedule(self):
        return [default_params(self.scheme, sigma=s, mu=self.mu) for s in self.sigmas]

    def act(self, ctx):
        lo = ctx.block * ctx.m
        sig = self.sigmas[min(lo, len(self.sigmas) - 1):lo + ctx.m]
        sig = np.concatenate([sig, np.full(ctx.m - len(sig), self.sigmas[-1])])
        base = default_params(ctx.scheme, mu=self.mu, model=ctx.model)
        return Action(False, [StepParams(**{**base.__dict__, "sigma": s}) for s in sig])


def handcrafted_sigmas(sigma_start, sigma_end, total_iters) -> np.ndarray:
    if not sigma_start > sigma_end > 0:
        raise ValueError("need sigma_start > sigma_end > 0")
    if total_iters < 2:
        raise ValueError("need at least two iterations")
    k = np.arange(total_iters)
    return sigma_start * (sigma_end / sigma_start) ** (k / (total_iters - 1))


def handcrafted_policy(sigma_start=40.0 / 255.0, sigma_end=15.0 / 255.0, total_iters=30,
                       scheme="admm", mu=FIXED_MU) -> HandcraftedPolicy:
    return HandcraftedPolicy(handcrafted_sigmas(sigma_start, sigma_end, total_iters), mu, scheme)


# -- searches --------------------------------------------------------------

def _replicate(model, n):
    return stack_models([model] * n)


def grid_final_psnr(model, truth, grid: ParamGrid, scheme, d, max_steps=30, m=5, best=False):
    """Final (or best-over-iterations) PSNR for every grid point on one instance."""
    pts = grid.points(scheme, model)
    n = len(pts.delta if scheme == "damp" else pts.sigma)
    bm = _replicate(model, n)
    st = init_state(bm, scheme)
    top = np.full(n, -np.inf)
    for _ in range(max_steps):
        st = run_block(st, pts, bm, scheme, d, 1, check=False)
        val = np.nan_to_num(np.asarray(psnr(st.estimate(), truth)), nan=-np.inf)
        top = np.maximum(top, val)
    return (top if best else val), pts


def oracle_search(model, truth, grid: ParamGrid, scheme, d, max_steps=30, m=5) -> ConstantPolicy:
    """Per-image constant parameters maximising final PSNR."""
    vals, pts = grid_final_psnr(model, truth, grid, scheme, d, max_steps, m)
    i = int(np.argmax(vals))
    pol = ConstantPolicy(pts.select(i), "oracle")
    pol.psnr = float(vals[i])
    return pol


def fixed_optimal_search(dataset, grid: ParamGrid, scheme, d, max_steps=30, m=5) -> ConstantPolicy:
    """One grid point maximising mean final PSNR over ``[(model, truth), ...]``."""
    if not dataset:
        raise ValueError("empty dataset")
    total = None
    for model, truth in dataset:
        vals, pts = grid_final_psnr(model, truth, grid, scheme, d, max_steps, m)
        total = vals if total is None else total + vals
    mean = total / len(dataset)
    i = int(np.argmax(mean))
    pol = ConstantPolicy(pts.select(i), "fixed-optimal")
    pol.psnr = float(mean[i])
    return pol


def greedy_step(state, model, truth, grid: ParamGrid, scheme, d, m=5) -> StepParams:
    """Grid point with the best PSNR after the next ``m`` iterations from ``state``."""
    pts = grid.points(scheme, model)
    n = len(pts.delta if scheme == "damp" else pts.sigma)
    bm = _replicate(model, n)
    bst = state.__class__.stack([state] * n)
    out = run_block(bst, pts, bm, scheme, d, m, check=False)
    vals = np.nan_to_num(np.asarray(psnr(out.estimate(), truth)), nan=-np.inf)
    return pts.select(int(np.argmax(vals)))


class GreedyPolicy(Policy):
    kind = "greedy"

    def __init__(self, grid: ParamGrid):
        self.grid = grid

    def act(self, ctx):
        if ctx.truth is None:
            raise ValueError("greedy policy needs ground truth")
        return Action(False, greedy_step(ctx.state, ctx.model, ctx.truth, self.grid, ctx.scheme, ctx.denoiser, ctx.m))


class OraclePolicy(Policy):
    """Runs the per-image grid search lazily on the first block of each instance."""

    kind = "oracle"

    def __init__(self, grid: ParamGrid, max_steps=30):
        self.grid = grid
        self.max_steps = max_steps
        self._cache = {}

    def act(self, ctx):
        if ctx.truth is None:
            raise ValueError("oracle policy needs ground truth")
        key = id(ctx.model)
        if ctx.block == 0 or key not in self._cache:
            self._cache = {key: oracle_search(ctx.model, ctx.truth, self.grid, ctx.scheme,
                                              ctx.denoiser, self.max_steps, ctx.m).params}
        return Action(False, self._cache[key])


# -- learned ---------------------------------------------------------------

def learned_policy_act(net: mg.Net, obs, mode: str = "eval", rng=None, scheme="admm", model=None) -> Action:
    """Stop decision from the softmax head (index 1 = stop), parameters from the sigmoid head.

    ``train`` samples the stop decision; ``eval`` takes the argmax, breaking
    ties toward continuing.
    """
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 3
    batch = obs[None] if single else obs
    (probs, u), _ = mg.net_forward(net, batch)
    p_stop = probs[:, 1]
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng")
        stop = rng.uniform(size=p_stop.shape) < p_stop
    elif mode == "eval":
        stop = probs[:, 1] > probs[:, 0]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    params = map_action(u, scheme, model)
    if single:
        return Action(bool(stop[0]), params.select(0), u[0], p_stop[0])
    return Action(stop, params, u, p_stop)


class LearnedPolicy(Policy):
    kind = "learned"

    def __init__(self, net: mg.Net, mode: str = "eval", rng=None, env_config=None):
        from .env import EnvConfig
        self.net = net
        self.mode = mode
        self.rng = rng
        self.cfg = env_config or EnvConfig()

    def act(self, ctx):
        from .env import encode_observation
        obs = encode_observation(ctx.state, ctx.model.noise_level, ctx.block, ctx.n_blocks)
        return learned_policy_act(self.net, obs, self.mode, self.rng, ctx.scheme, ctx.model)


POLICY_KINDS = ("fixed", "handcrafted", "fixed-optimal", "greedy", "oracle", "learned")
