"""Flat ``key = value`` run configuration with namespaced, typed keys."""

from __future__ import annotations

from dataclasses import dataclass, field

# key -> (default, description)
DEFAULTS: dict[str, tuple[object, str]] = {
    "seed": (0, "master seed for data, noise and initialisation"),
    "env.m": (5, "solver iterations per policy step"),
    "env.N": (6, "maximum number of policy steps"),
    "env.eta": (0.05, "per-block step penalty"),
    "env.rho": (0.99, "discount factor"),
    "problem.kind": ("csmri", "csmri | qis | cdp"),
    "problem.ratio": (0.25, "CS-MRI fraction of sampled k-space"),
    "problem.mask": ("radial", "radial | cartesian"),
    "problem.noise": (15.0, "CS-MRI measurement noise (in 1/255 units)"),
    "problem.jots": (8, "QIS oversampling factor K"),
    "problem.cdp_alpha": (9.0, "CDP noise factor alpha (8-bit intensity units)"),
    "solver.scheme": ("admm", "admm | hqs | pgm | apgm | red | damp"),
    "solver.max_steps": (30, "iteration budget"),
    "policy.kind": ("fixed", "fixed | handcrafted | fixed-optimal | greedy | oracle | learned"),
    "policy.checkpoint": ("", "learned policy checkpoint (directory or bundle)"),
    "denoiser.kind": ("tv-prox", "tv-prox | gaussian-smoother | micro-unet"),
    "denoiser.checkpoint": ("", "micro-unet checkpoint"),
    "data.size": (32, "phantom side length"),
    "data.train_count": (64, "training phantoms"),
    "data.test_count": (8, "held-out phantoms"),
    "data.train_seed": (1, "training phantom seed"),
    "data.test_seed": (2, "held-out phantom seed"),
    "data.input": ("", "TFT1 image stack to use instead of phantoms"),
    "train.iterations": (300, "policy training iterations"),
    "train.batch_size": (16, "replay minibatch"),
    "train.grad_steps": (10, "gradient steps per iteration"),
    "train.rollout_batch": (4, "episodes per iteration"),
    "train.lr_policy": (1e-4, "policy learning rate"),
    "train.lr_value": (5e-5, "critic learning rate"),
    "train.buffer": (500, "replay capacity"),
    "denoiser_train.steps": (2000, "micro-unet training steps"),
    "denoiser_train.patches": (2000, "training patches"),
    "denoiser_train.lr": (1e-3, "micro-unet learning rate"),
    "benchmark.schemes": ("admm", "comma-separated schemes"),
    "benchmark.policies": ("fixed,fixed-optimal,oracle", "comma-separated policy kinds"),
    "diagnose.iterations": ("1,10,30", "comma-separated iterations to analyse"),
    "paths.out": ("runs", "parent directory for run directories"),
    "paths.run_dir": ("", "explicit run directory (overrides timestamp naming)"),
}


class ConfigError(ValueError):
    def __init__(self, msg, line=None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


@dataclass
class Config:
    values: dict = field(default_factory=lambda: {k: v for k, (v, _) in DEFAULTS.items()})

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def set(self, key, raw, line=None) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}", line)
        self.values[key] = coerce(key, raw, line)

    def items(self):
        return sorted(self.values.items())

    def dump(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())


def coerce(key, raw, line=None):
    default = DEFAULTS[key][0]
    if not isinstance(raw, str):
        raw = str(raw)
    text = raw.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
    elif isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            pass
    elif isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            pass
    else:
        return text
    raise ConfigError(f"{key} expects {type(default).__name__}, got {text!r}", line)


def parse_config(text: str) -> Config:
    """Parse ``key = value`` lines; ``#`` starts a comment, later keys override earlier ones."""
    cfg = Config()
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"malformed line {raw.strip()!r} (expected key = value)", n)
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("missing key", n)
        cfg.set(key, val, n)
    return cfg


def describe_defaults() -> str:
    w = max(map(len, DEFAULTS))
    return "".join(f"{k.ljust(w)}  {str(v):<28} {doc}\n" for k, (v, doc) in DEFAULTS.items())
