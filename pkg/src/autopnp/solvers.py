"""PnP-type iteration schemes as pure single-step updates, plus a policy driver.

All steps take and return a :class:`SolverState`; nothing is mutated in place.
Images may carry a leading batch axis, in which case every ``StepParams``
field may be a per-sample vector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .denoisers import Denoiser, denoise
from .tensor import SIGMA_MAX, bcast, psnr

log = logging.getLogger(__name__)

SCHEMES = ("admm", "pgm", "apgm", "hqs", "red", "damp")
DIV_PROBE_SCALE = 1e-3


class NumericalAbort(FloatingPointError):
    """A solver state became non-finite; ``trace`` holds what ran before."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass
class SolverState:
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    s: np.ndarray
    q: float | np.ndarray = 1.0
    amp_z: np.ndarray | None = None
    xbar: np.ndarray | None = None
    k: int = 0

    def estimate(self) -> np.ndarray:
        return np.clip(np.real(self.x), 0.0, 1.0)

    def is_finite(self) -> bool:
        arrs = [self.x, self.z, self.u, self.s]
        if self.amp_z is not None:
            arrs.append(self.amp_z)
        return all(np.all(np.isfinite(a)) for a in arrs)

    def select(self, idx) -> "SolverState":
        def sel(v):
            if v is None or np.ndim(v) == 0:
                return v
            return v[idx]
        return replace(self, **{f.name: sel(getattr(self, f.name)) for f in fields(self) if f.name != "k"})

    @staticmethod
    def stack(states) -> "SolverState":
        def stk(name):
            vals = [getattr(s, name) for s in states]
            if vals[0] is None:
                return None
            return np.stack([np.broadcast_to(v, np.shape(vals[0])) for v in vals]) if np.ndim(vals[0]) else np.array(vals, dtype=float)
        kw = {f.name: stk(f.name) for f in fields(SolverState) if f.name != "k"}
        return SolverState(k=min(s.k for s in states), **kw)

    def merge(self, other: "SolverState", take) -> "SolverState":
        """Per-sample choice: entries where ``take`` is true come from ``other``."""
        take = np.asarray(take, dtype=bool)

        def pick(a, b):
            if a is None or b is None:
                return b if a is None else a
            if np.ndim(a) == 0 and np.ndim(b) == 0:
                return b
            t = take.reshape(take.shape + (1,) * (max(np.ndim(a), np.ndim(b)) - take.ndim))
            return np.where(t, b, a)
        kw = {f.name: pick(getattr(self, f.name), getattr(other, f.name)) for f in fields(self) if f.name != "k"}
        return SolverState(k=max(self.k, other.k), **kw)

    def repeat(self, n: int) -> "SolverState":
        """Tile a batched state n times along the batch axis (block-major)."""
        def rep(v):
            if v is None:
                return None
            if np.ndim(v) == 0:
                return v
            return np.concatenate([v] * n, axis=0)
        return replace(self, **{f.name: rep(getattr(self, f.name)) for f in fields(self) if f.name != "k"})


@dataclass
class StepParams:
    sigma: float | np.ndarray = 15.0 / 255.0
    mu: float | np.ndarray | None = None
    gamma: float | np.ndarray | None = None
    qbar: float | np.ndarray | None = None
    lam: float | np.ndarray | None = None
    delta: float | np.ndarray | None = None

    def select(self, idx) -> "StepParams":
        return StepParams(**{f.name: (v[idx] if np.ndim(v) else v)
                             for f in fields(self) for v in [getattr(self, f.name)]})

    def as_row(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = float(np.mean(v))
        return out


def init_state(model, scheme: str = "admm", x0=None) -> SolverState:
    x0 = model.init() if x0 is None else x0
    dtype = complex if getattr(model, "complex_state", False) else float
    x = np.asarray(x0, dtype=float)
    z = x.astype(dtype)
    amp_z = None
    if scheme == "damp":
        _require_linear(model)
        amp_z = model.y - model.A(x)
    return SolverState(x=x, z=z, u=np.zeros_like(z), s=x.copy(), q=1.0, amp_z=amp_z, xbar=None, k=0)


def _den(d: Denoiser, v, sigma):
    return denoise(d, np.real(v), sigma)


def _need(p: StepParams, *names):
    for n in names:
        v = getattr(p, n)
        if v is None or np.any(np.asarray(v) <= 0):
            raise ValueError(f"step parameter {n} must be positive, got {v}")


def pnp_admm_step(st: SolverState, p: StepParams, model, d: Denoiser) -> SolverState:
    _need(p, "mu")
    xbar = st.z - st.u
    x = _den(d, xbar, p.sigma)
    z = model.prox(x + st.u, p.mu)
    u = st.u + x - z
    return replace(st, x=x, z=z, u=u, s=x, xbar=xbar, k=st.k + 1)


def pnp_pgm_step(st: SolverState, p: StepParams, model, d: Denoiser) -> SolverState:
    _need(p, "gamma")
    z = st.s - bcast(p.gamma) * model.grad(st.s)
    x = _den(d, z, p.sigma)
    return replace(st, x=x, z=z, s=x, xbar=z, k=st.k + 1)


def fista_next(q):
    """(q_next, qbar) for the FISTA momentum recurrence."""
    q_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * np.asarray(q, dtype=float) ** 2))
    return q_next, (q - 1.0) / q_next


def pnp_apgm_step(st: SolverState, p: StepParams, model, d: Denoiser) -> SolverState:
    _need(p, "gamma")
    z = st.s - bcast(p.gamma) * model.grad(st.s)
    x = _den(d, z, p.sigma)
    q = st.q
    if p.qbar is None:
        q, qbar = fista_next(st.q)
    else:
        qbar = p.qbar
        if np.any(np.asarray(qbar) < 0) or np.any(np.asarray(qbar) >= 1):
            raise ValueError("qbar must lie in [0, 1)")
    s = x + bcast(qbar) * (x - st.x)
    return replace(st, x=x, z=z, s=s, q=q, xbar=z, k=st.k + 1)


def pnp_hqs_step(st: SolverState, p: StepParams, model, d: Denoiser) -> SolverState:
    _need(p, "mu")
    x = _den(d, st.z, p.sigma)
    z = model.prox(x, p.mu)
    return replace(st, x=x, z=z, s=x, xbar=st.z, k=st.k + 1)


def red_admm_step(st: SolverState, p: StepParams, model, d: Denoiser) -> SolverState:
    _need(p, "mu", "lam")
    mu, lam = bcast(p.mu), bcast(p.lam)
    v = _den(d, st.x, p.sigma)
    x = (lam * v + mu * (st.z - st.u)) / (mu + lam)
    z = model.prox(x + st.u, p.mu)
    u = st.u + x - z
    return replace(st, x=x, z=z, u=u, s=x, xbar=st.x, k=st.k + 1)


def _require_linear(model):
    if not getattr(model, "linear", False):
        raise ValueError(f"D-AMP needs a linear forward operator; {model.kind} is not supported")


def amp_sigma_hat(z, delta=1.0, denom: int | None = None) -> np.ndarray:
    """delta * ||z||_2 / sqrt(denom) over the last two axes."""
    z = np.asarray(z)
    n = z.shape[-2] * z.shape[-1] if denom is None else denom
    return np.asarray(delta) * np.sqrt(np.sum(np.abs(z) ** 2, axis=(-2, -1))) / np.sqrt(n)


def mc_divergence(f, v, rng, scale: float = DIV_PROBE_SCALE, probes: int = 1) -> np.ndarray:
    """Monte-Carlo divergence of ``f`` at ``v`` (per batch entry), averaged over Rademacher probes."""
    if probes < 1:
        raise ValueError("probes must be >= 1")
    vmax = np.max(np.abs(v), axis=(-2, -1), keepdims=True)
    eps = scale * (1.0 + vmax)
    fv = f(v)
    total = 0.0
    for _ in range(probes):
        b = rng.choice([-1.0, 1.0], size=np.shape(v))
        total = total + np.sum(b * (f(v + eps * b) - fv) / eps, axis=(-2, -1))
    return total / probes


def damp_step(st: SolverState, p, model, d: Denoiser, sqrt_m: bool = False) -> SolverState:
    """D-AMP with an Onsager correction; ``p`` is StepParams or the delta factor."""
    _require_linear(model)
    delta = p.delta if isinstance(p, StepParams) else p
    if delta is None or np.any(np.asarray(delta) <= 0):
        raise ValueError("delta must be positive")
    z = st.amp_z
    M = model.n_measurements
    H, W = z.shape[-2:]
    v = np.real(st.x + model.AH(z))
    sig = np.clip(amp_sigma_hat(z, delta, M if sqrt_m else H * W), 0.0, SIGMA_MAX)
    x = denoise(d, v, sig)
    rng = np.random.default_rng(st.k)
    div = mc_divergence(lambda w: denoise(d, w, sig), v, rng)
    o = z * bcast(div) / M
    z_new = model.y - model.A(x) + model.mask * o
    return replace(st, x=x, z=v.astype(st.z.dtype), amp_z=z_new, s=x, xbar=v, k=st.k + 1)


STEP_FNS = {
    "admm": pnp_admm_step,
    "pgm": pnp_pgm_step,
    "apgm": pnp_apgm_step,
    "hqs": pnp_hqs_step,
    "red": red_admm_step,
    "damp": damp_step,
}


def step(scheme: str, st, p, model, d):
    try:
        fn = STEP_FNS[scheme]
    except KeyError:
        raise ValueError(f"unknown scheme {scheme!r}") from None
    return fn(st, p, model, d)


def run_block(st, params, model, scheme, d, m: int, check: bool = True, record=None):
    """Apply ``m`` steps; ``params`` is one StepParams or a per-iteration list."""
    plist = params if isinstance(params, (list, tuple)) else [params] * m
    for p in plist:
        st = step(scheme, st, p, model, d)
        if record is not None:
            record(st, p)
        if check and not st.is_finite():
            raise NumericalAbort(f"non-finite state at iteration {st.k}")
    return st


# -- trajectories ----------------------------------------------------------

@dataclass
class IterationTrace:
    x: list = field(default_factory=list)
    xbar: list = field(default_factory=list)
    params: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    stop: list = field(default_factory=list)
    init_psnr: float | None = None
    init_x: np.ndarray | None = None
    blocks: int = 0
    stopped_early: bool = False

    def __len__(self):
        return len(self.x)

    @property
    def final_psnr(self):
        return self.psnr[-1] if self.psnr else self.init_psnr

    @property
    def best_psnr(self):
        vals = ([self.init_psnr] if self.init_psnr is not None else []) + list(self.psnr)
        return max(vals) if vals else None

    def to_csv(self) -> str:
        lines = ["iteration,sigma,mu_or_gamma,psnr,stop"]
        for i, (p, ps, stp) in enumerate(zip(self.params, self.psnr, self.stop), start=1):
            mg = p.mu if p.mu is not None else p.gamma if p.gamma is not None else p.delta
            mgv = "" if mg is None else f"{float(np.mean(mg)):.6g}"
            sg = "" if p.sigma is None else f"{float(np.mean(p.sigma)):.6g}"
            ps_s = "" if ps is None else f"{ps:.4f}"
            lines.append(f"{i},{sg},{mgv},{ps_s},{int(stp)}")
        return "\n".join(lines) + "\n"


@dataclass
class Context:
    state: SolverState
    model: object
    block: int
    n_blocks: int
    scheme: str
    denoiser: Denoiser
    m: int
    truth: np.ndarray | None = None


def run_solver(model, scheme, policy, d, max_steps: int = 30, m: int = 5,
               truth=None, state=None) -> IterationTrace:
    """Run ``policy``-chosen parameters in blocks of ``m`` until stop or ``max_steps``."""
    st = init_state(model, scheme) if state is None else state
    n_blocks = max_steps // m
    tr = IterationTrace(init_x=st.estimate())
    if truth is not None:
        tr.init_psnr = float(psnr(st.estimate(), truth))

    def record(s, p):
        tr.x.append(s.estimate())
        tr.xbar.append(None if s.xbar is None else np.real(s.xbar))
        tr.params.append(p)
        tr.psnr.append(float(psnr(s.estimate(), truth)) if truth is not None else None)
        tr.stop.append(False)

    for b in range(n_blocks):
        action = policy.act(Context(st, model, b, n_blocks, scheme, d, m, truth))
        if bool(np.any(action.stop)):
            tr.stopped_early = True
            if tr.stop:
                tr.stop[-1] = True
            break
        try:
            st = run_block(st, action.params, model, scheme, d, m, record=record)
        except NumericalAbort as exc:
            exc.trace = tr
            raise
        tr.blocks += 1
    if tr.stop and not tr.stopped_early:
        tr.stop[-1] = True
    return tr
