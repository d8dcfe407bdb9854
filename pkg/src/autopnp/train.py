"""Actor-critic training of the parameter policy.

The stop head is trained with a likelihood-ratio gradient weighted by a
bootstrapped advantage; the continuous head follows the deterministic policy
gradient, where the action-gradient of ``r(s, a) + rho * V(p(s, a))`` is taken
by central differences through the solver itself.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import micrograd as mg
from .env import EnvConfig, ReplayBuffer, TransitionRecord, encode_observation, observation_channels
from .policies import ACTION_SPECS, learned_policy_act, map_action
from .problems import csmri_forward, make_problem, stack_models
from .solvers import SolverState, init_state, run_block
from .tensor import make_rng, psnr

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    iterations: int = 300
    batch_size: int = 16
    grad_steps: int = 10
    rollout_batch: int = 4
    lr_policy: float = 1e-4
    lr_value: float = 5e-5
    lr_decay_at: float = 0.64
    beta: float = 1e-3
    m: int = 5
    N: int = 6
    eta: float = 0.05
    rho: float = 0.99
    buffer_capacity: int = 500
    fd_h: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "grad_steps", "rollout_batch", "lr_policy", "lr_value",
                     "m", "N", "buffer_capacity", "fd_h"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")

    @property
    def env(self) -> EnvConfig:
        return EnvConfig(self.m, self.N, self.eta, self.rho)


@dataclass
class ActorCritic:
    policy: mg.Net
    value: mg.Net
    target: mg.Net
    scheme: str = "admm"


def make_actor_critic(scheme: str, complex_state: bool, seed: int = 0) -> ActorCritic:
    c = observation_channels(complex_state)
    policy = mg.policy_net(c, len(ACTION_SPECS[scheme]), seed=seed)
    value = mg.value_net(c, seed=seed + 1)
    return ActorCritic(policy, value, value.copy(), scheme)


def soft_update(phi_hat: mg.Net, phi: mg.Net, beta: float) -> mg.Net:
    """phi_hat <- beta * phi + (1 - beta) * phi_hat, block by block."""
    if not phi_hat.same_topology(phi):
        raise ValueError("target and online networks differ in topology")
    for k, p in phi.params.items():
        phi_hat.params[k] *= 1.0 - beta
        phi_hat.params[k] += beta * p
    phi_hat.version += 1
    return phi_hat


@dataclass
class Env:
    """Transition/reward machinery shared by rollouts and updates."""
    scheme: str
    denoiser: object
    cfg: EnvConfig = field(default_factory=EnvConfig)

    def observe(self, st, model, step_index):
        return encode_observation(st, model.noise_level, step_index, self.cfg.N)

    def advance(self, st, params, model):
        return run_block(st, params, model, self.scheme, self.denoiser, self.cfg.m)

    def reward(self, st, nxt, truth):
        return np.asarray(psnr(nxt.estimate(), truth)) - np.asarray(psnr(st.estimate(), truth)) - self.cfg.eta


# -- problem suites --------------------------------------------------------

@dataclass
class ProblemSuite:
    """Ground-truth images plus the degradation used to draw initial states."""
    images: np.ndarray
    kind: str = "csmri"
    mask: np.ndarray | None = None
    noise_levels: tuple = (15.0 / 255.0,)
    jots: int = 8
    cdp_alpha: float = 0.0
    cdp_masks: np.ndarray | None = None

    def simulate(self, x, rng, noise=None):
        if self.kind == "csmri":
            if noise is None:
                noise = rng.choice(np.asarray(self.noise_levels), size=x.shape[:-2]) if x.ndim > 2 else self.noise_levels[0]
            return csmri_forward(x, self.mask, noise, rng)
        return make_problem(self.kind, x, rng, jots=self.jots, cdp_alpha=self.cdp_alpha, cdp_masks_=self.cdp_masks)

    def sample(self, rng, n):
        idx = rng.integers(0, len(self.images), size=n)
        truths = self.images[idx]
        return self.simulate(truths, rng), truths

    def instances(self, seed=0, noise=None):
        """One (model, truth) pair per image, deterministic in ``seed``."""
        rng = make_rng(seed)
        return [(self.simulate(x, rng, noise), x) for x in self.images]


# -- gradient estimators ---------------------------------------------------

@dataclass
class UpdateBatch:
    state: SolverState
    model: object
    truth: np.ndarray
    step: np.ndarray
    obs: np.ndarray
    p_stop: np.ndarray
    u: np.ndarray
    stop: np.ndarray
    reward: np.ndarray
    next_state: SolverState
    terminal: np.ndarray
    target_next: np.ndarray
    stop_value: float = 0.0

    def __len__(self):
        return len(self.step)

    def q_target(self, rho):
        """Bootstrapped action value; stopping ends the episode with ``stop_value``."""
        cont = self.reward + rho * np.where(self.terminal, 0.0, self.target_next)
        return np.where(self.stop, self.stop_value, cont)


def _value(net, obs):
    return net(obs)[:, 0]


def prepare_batch(records, ac: ActorCritic, env: Env, rng) -> UpdateBatch:
    """Re-act with the current policy on buffered states and replay one block."""
    if not records:
        raise ValueError("empty batch")
    st = SolverState.stack([r.state for r in records])
    model = stack_models([r.model for r in records])
    truth = np.stack([r.truth for r in records])
    step = np.array([r.step_index for r in records])
    obs = env.observe(st, model, step)
    act = learned_policy_act(ac.policy, obs, "train", rng, env.scheme, model)
    nxt = env.advance(st, act.params, model)
    reward = env.reward(st, nxt, truth)
    terminal = step + 1 >= env.cfg.N
    target_next = _value(ac.target, env.observe(nxt, model, np.minimum(step + 1, env.cfg.N)))
    return UpdateBatch(st, model, truth, step, obs, act.p_stop, act.u, np.asarray(act.stop),
                       reward, nxt, terminal, target_next)


def value_loss(ub: UpdateBatch, ac: ActorCritic, env: Env, accumulate: bool = False):
    """Mean 1/2 (Q - V_phi(s))^2 with a frozen target; returns (loss, grads)."""
    q = ub.q_target(env.cfg.rho)
    v, tape = mg.net_forward(ac.value, ub.obs)
    diff = v[:, 0] - q
    loss = float(0.5 * np.mean(diff ** 2))
    grads, _ = mg.net_backward(ac.value, tape, (diff / len(ub))[:, None], accumulate=accumulate)
    return loss, grads


def policy_grad_pi1(ub: UpdateBatch, ac: ActorCritic, env: Env, accumulate: bool = False):
    """Gradient of -E[log pi1(a1|s) * A] (descent direction) for the stop head and trunk."""
    v = _value(ac.value, ub.obs)
    adv = ub.q_target(env.cfg.rho) - v
    (probs, u), tape = mg.net_forward(ac.policy, ub.obs)
    a = ub.stop.astype(int)
    g = np.zeros_like(probs)
    pa = np.maximum(probs[np.arange(len(a)), a], 1e-12)
    g[np.arange(len(a)), a] = -adv / (pa * len(a))
    grads, _ = mg.net_backward(ac.policy, tape, (g, None), accumulate=accumulate)
    return grads


def action_value_fd(ub: UpdateBatch, ac: ActorCritic, env: Env, h: float = 1e-3):
    """Central differences of r(s, a2) + rho V_phi(p(s, a2)) in each sigmoid coordinate.

    Returns ``(dq, bad)`` with dq of shape (B, n_actions); ``bad`` flags samples
    whose probes went non-finite.
    """
    B, n = ub.u.shape
    lo = np.clip(ub.u - h, 0.0, 1.0)
    hi = np.clip(ub.u + h, 0.0, 1.0)
    probes = []
    for j in range(n):
        for edge in (hi, lo):
            uj = ub.u.copy()
            uj[:, j] = edge[:, j]
            probes.append(uj)
    U = np.concatenate(probes, axis=0)
    reps = 2 * n
    singles = [ub.model.select(i) for i in range(B)]
    model = stack_models(singles * reps)
    st = ub.state.repeat(reps)
    truth = np.concatenate([ub.truth] * reps, axis=0)
    step = np.concatenate([ub.step] * reps)
    params = map_action(U, env.scheme, model)
    nxt = run_block(st, params, model, env.scheme, env.denoiser, env.cfg.m, check=False)
    r = np.asarray(psnr(nxt.estimate(), truth)) - np.asarray(psnr(st.estimate(), truth))
    terminal = step + 1 >= env.cfg.N
    obs = env.observe(nxt, model, np.minimum(step + 1, env.cfg.N))
    finite = np.all(np.isfinite(obs.reshape(len(obs), -1)), axis=1)
    v = np.zeros(len(obs))
    if finite.any():
        v[finite] = _value(ac.value, obs[finite])
    q = (r + env.cfg.rho * np.where(terminal, 0.0, v)).reshape(n, 2, B)
    bad = ~np.all(np.isfinite(q), axis=(0, 1)) | ~np.all(finite.reshape(n, 2, B), axis=(0, 1))
    width = (hi - lo).T
    dq = ((q[:, 0] - q[:, 1]) / np.where(width > 0, width, 1.0)).T
    dq[bad] = 0.0
    return dq, bad


def policy_grad_pi2(ub: UpdateBatch, ac: ActorCritic, env: Env, h: float = 1e-3, accumulate: bool = False):
    """Deterministic policy gradient for the parameter head (descent direction).

    The action gradient is weighted by pi1(continue|s), the probability that
    the parameters are actually used.
    """
    dq, bad = action_value_fd(ub, ac, env, h)
    if bad.any():
        log.warning("dropping %d samples with non-finite action probes", int(bad.sum()))
    w = 1.0 - ub.p_stop
    (probs, u), tape = mg.net_forward(ac.policy, ub.obs)
    g = -(w[:, None] * dq) / len(ub)
    grads, _ = mg.net_backward(ac.policy, tape, (None, g), accumulate=accumulate)
    return grads


# -- training loop ---------------------------------------------------------

@dataclass
class TrainLogRow:
    iteration: int
    mean_return: float
    mean_stop_block: float
    mean_psnr: float
    value_loss: float


def _add_grads(net, *grad_dicts):
    for gd in grad_dicts:
        for k, v in gd.items():
            net.grads[k] += v


def rollout(ac: ActorCritic, env: Env, model, truth, rng, buffer=None, mode="train"):
    """Roll a batch of episodes; returns (returns, stop_blocks, final_psnr)."""
    N = env.cfg.N
    st = init_state(model, env.scheme)
    B = truth.shape[0]
    active = np.ones(B, dtype=bool)
    stop_block = np.full(B, N)
    returns = np.zeros(B)
    for t in range(N):
        obs = env.observe(st, model, np.full(B, t))
        act = learned_policy_act(ac.policy, obs, mode, rng, env.scheme, model)
        if buffer is not None:
            for i in np.flatnonzero(active):
                buffer.add(TransitionRecord(st.select(i), model.select(i), truth[i], t, n_blocks=N))
        stop = np.asarray(act.stop) & active
        stop_block[stop] = t
        active &= ~stop
        if not active.any():
            break
        nxt = env.advance(st, act.params, model)
        r = env.reward(st, nxt, truth)
        returns += np.where(active, (env.cfg.rho ** t) * r, 0.0)
        st = st.merge(nxt, active)
    return returns, stop_block, np.asarray(psnr(st.estimate(), truth))


def train_policy(cfg: TrainConfig, suite: ProblemSuite, scheme: str, d, log_path=None,
                 ac: ActorCritic | None = None):
    """Algorithm loop: roll out, then ``grad_steps`` interleaved actor/critic updates.

    Returns ``(actor_critic, log_rows)``.
    """
    rng = make_rng(cfg.seed)
    if ac is None:
        probe, _ = suite.sample(make_rng(cfg.seed + 7), 1)
        ac = make_actor_critic(scheme, getattr(probe, "complex_state", False), seed=cfg.seed)
    env = Env(scheme, d, cfg.env)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    opt_p = mg.AdamState(lr=cfg.lr_policy)
    opt_v = mg.AdamState(lr=cfg.lr_value)
    decay_at = int(cfg.lr_decay_at * cfg.iterations)
    rows = []
    last_good = (ac.policy.copy(), ac.value.copy(), ac.target.copy())
    for it in range(cfg.iterations):
        if it == decay_at and it > 0:
            opt_p.lr *= 0.5
            opt_v.lr *= 0.5
        model, truth = suite.sample(rng, cfg.rollout_batch)
        ret, stops, fin = rollout(ac, env, model, truth, rng, buffer)
        vl = []
        for _ in range(cfg.grad_steps):
            ub = prepare_batch(buffer.sample(rng, cfg.batch_size), ac, env, rng)
            loss, vgrads = value_loss(ub, ac, env)
            g1 = policy_grad_pi1(ub, ac, env)
            g2 = policy_grad_pi2(ub, ac, env, cfg.fd_h)
            _add_grads(ac.value, vgrads)
            _add_grads(ac.policy, g1, g2)
            if not (np.isfinite(loss) and mg.grads_finite(ac.value) and mg.grads_finite(ac.policy)):
                ac.policy, ac.value, ac.target = last_good
                raise TrainingDiverged(f"non-finite gradient at iteration {it}", checkpoint=ac)
            mg.adam_step(ac.policy, opt_p)
            mg.adam_step(ac.value, opt_v)
            soft_update(ac.target, ac.value, cfg.beta)
            vl.append(loss)
        last_good = (ac.policy.copy(), ac.value.copy(), ac.target.copy())
        row = TrainLogRow(it, float(np.mean(ret)), float(np.mean(stops)), float(np.mean(fin)), float(np.mean(vl)))
        rows.append(row)
        if (it + 1) % 25 == 0:
            log.info("iter %d return %.3f stop %.2f psnr %.2f vloss %.4f", it + 1, row.mean_return,
                     row.mean_stop_block, row.mean_psnr, row.value_loss)
    if log_path is not None:
        write_train_log(log_path, rows)
    return ac, rows


def write_train_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "mean_return", "mean_stop_block", "mean_psnr", "value_loss"])
        for r in rows:
            w.writerow([r.iteration, f"{r.mean_return:.6f}", f"{r.mean_stop_block:.4f}",
                        f"{r.mean_psnr:.6f}", f"{r.value_loss:.6f}"])


def save_actor_critic(directory, ac: ActorCritic, cfg: TrainConfig | None = None) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    extra = f"scheme {ac.scheme}"
    if cfg is not None:
        extra += "\n" + "\n".join(f"cfg {k} {v}" for k, v in asdict(cfg).items())
    mg.save_net(out / "policy.tft", ac.policy, extra)
    mg.save_net(out / "value.tft", ac.value)
    mg.save_net(out / "target.tft", ac.target)


def load_actor_critic(directory) -> ActorCritic:
    d = Path(directory)
    policy, extra = mg.load_net(d / "policy.tft")
    scheme = "admm"
    for line in extra.splitlines():
        if line.startswith("scheme "):
            scheme = line.split()[1]
    value, _ = mg.load_net(d / "value.tft")
    target, _ = mg.load_net(d / "target.tft")
    return ActorCritic(policy, value, target, scheme)


def load_policy_net(path) -> tuple[mg.Net, str]:
    """Policy network from a checkpoint directory or a single policy bundle."""
    p = Path(path)
    if p.is_dir():
        p = p / "policy.tft"
    net, extra = mg.load_net(p)
    scheme = "admm"
    for line in extra.splitlines():
        if line.startswith("scheme "):
            scheme = line.split()[1]
    return net, scheme


@dataclass
class PolicyEvaluation:
    psnr: np.ndarray
    stop_block: np.ndarray
    returns: np.ndarray

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_stop_block(self) -> float:
        return float(np.mean(self.stop_block))


def evaluate_learned(ac: ActorCritic, instances, d, cfg: EnvConfig | None = None, mode: str = "eval",
                     seed: int = 0) -> PolicyEvaluation:
    """Greedy (argmax-stop) rollouts of the learned policy on ``[(model, truth), ...]``."""
    env = Env(ac.scheme, d, cfg or EnvConfig())
    model = stack_models([mdl for mdl, _ in instances])
    truth = np.stack([t for _, t in instances])
    ret, stops, fin = rollout(ac, env, model, truth, make_rng(seed), None, mode)
    return PolicyEvaluation(fin, stops, ret)
