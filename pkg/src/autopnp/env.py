"""MDP wrapper around a solver: observations, block transitions, rewards, replay."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .solvers import SolverState, StepParams, run_block
from .tensor import SIGMA_MAX, psnr


@dataclass
class EnvConfig:
    m: int = 5
    N: int = 6
    eta: float = 0.05
    rho: float = 0.99


def observation_channels(complex_state: bool) -> int:
    return (6 if complex_state else 3) + 2


def encode_observation(st: SolverState, noise_level, step_index, N: int) -> np.ndarray:
    """Stack x, z, u (real/imag split for complex problems) with noise and step planes.

    Returns (C, H, W) for a single state or (B, C, H, W) for a batch.
    ``noise_level`` and ``step_index`` may be per-sample vectors.
    """
    step_index = np.asarray(step_index, dtype=float)
    if np.any(step_index < 0) or np.any(step_index > N):
        raise ValueError(f"step index outside [0, {N}]")
    cplx = np.iscomplexobj(st.z) or np.iscomplexobj(st.u) or np.iscomplexobj(st.x)
    planes = []
    for v in (st.x, st.z, st.u):
        planes.append(np.real(v))
        if cplx:
            planes.append(np.imag(v))
    shape = np.shape(st.x)
    lead = shape[:-2]

    def const_plane(val):
        val = np.broadcast_to(np.asarray(val, dtype=float), lead)
        return np.broadcast_to(val[..., None, None], shape)

    planes.append(const_plane(np.clip(np.asarray(noise_level, dtype=float) / SIGMA_MAX, 0.0, 1.0)))
    planes.append(const_plane(step_index / N))
    return np.stack([np.broadcast_to(p, shape) for p in planes], axis=-3).astype(float)


def env_transition(st: SolverState, action, model, scheme, d, truth, m: int = 5, eta: float = 0.05):
    """Run ``m`` solver steps; reward is the PSNR gain minus the step penalty ``eta``."""
    params = action.params if hasattr(action, "params") else action
    nxt = run_block(st, params, model, scheme, d, m)
    reward = np.asarray(psnr(nxt.estimate(), truth)) - np.asarray(psnr(st.estimate(), truth)) - eta
    return nxt, (float(reward) if reward.ndim == 0 else reward)


def discounted_return(rewards, rho: float) -> float:
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    total = 0.0
    for r in reversed(list(rewards)):
        total = r + rho * total
    return total


@dataclass
class TransitionRecord:
    """A visited state with everything needed to replay actions from it."""
    state: SolverState
    model: object
    truth: np.ndarray
    step_index: int
    action: StepParams | None = None
    stop: bool | None = None
    reward: float | None = None
    next_state: SolverState | None = None
    terminal: bool = False
    n_blocks: int = 6

    @property
    def observation(self):
        return encode_observation(self.state, self.model.noise_level, self.step_index, self.n_blocks)


class ReplayBuffer:
    def __init__(self, capacity: int = 500):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.items = deque(maxlen=capacity)

    def __len__(self):
        return len(self.items)

    def add(self, rec) -> None:
        self.items.append(rec)

    def sample_indices(self, rng, n: int) -> np.ndarray:
        if not self.items:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, len(self.items), size=n)

    def sample(self, rng, n: int) -> list:
        return [self.items[i] for i in self.sample_indices(rng, n)]
