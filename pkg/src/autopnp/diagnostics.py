"""Iteration-noise analysis, normal probability plots, and policy benchmark tables."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .policies import (GreedyPolicy, ParamGrid, fixed_optimal_search, fixed_policy, handcrafted_policy,
                       oracle_search)
from .solvers import IterationTrace, NumericalAbort, run_solver
from .tensor import make_rng

log = logging.getLogger(__name__)

MAX_PLOT_POINTS = 8192
MIN_PLOT_POINTS = 16


@dataclass
class NoiseSample:
    k: int
    values: np.ndarray
    scheme: str = ""

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def iteration_noise(trace: IterationTrace, truth, scheme: str = "") -> list[NoiseSample]:
    """eps_k = xbar_k - x for each recorded iteration (xbar_k is the denoiser input)."""
    truth = np.asarray(truth, dtype=float)
    if not trace.xbar or any(v is None for v in trace.xbar):
        raise ValueError("trace has no denoiser-input snapshots")
    out = []
    for k, xb in enumerate(trace.xbar, start=1):
        if np.shape(xb) != truth.shape:
            raise ValueError(f"snapshot {k} has shape {np.shape(xb)}, truth {truth.shape}")
        out.append(NoiseSample(k, (np.real(xb) - truth).ravel(), scheme))
    return out


def inv_normal_cdf(p) -> np.ndarray:
    return ndtri(np.asarray(p, dtype=float))


def blom_positions(n: int) -> np.ndarray:
    return (np.arange(1, n + 1) - 0.375) / (n + 0.25)


def probplot_r2(sample, max_points: int = MAX_PLOT_POINTS, seed: int = 0):
    """Gaussian probability-plot pairs and their squared correlation.

    Returns ``(pairs, r2)`` where pairs[:, 0] are standard-normal quantiles at
    Blom positions and pairs[:, 1] the sorted standardized sample.
    """
    s = np.asarray(sample, dtype=float).ravel()
    if s.size < MIN_PLOT_POINTS:
        raise ValueError(f"need at least {MIN_PLOT_POINTS} values, got {s.size}")
    if not np.all(np.isfinite(s)):
        raise ValueError("sample has non-finite values")
    if s.size > max_points:
        s = make_rng(seed).choice(s, size=max_points, replace=False)
    sd = s.std()
    if not sd > 0 or sd <= 1e-12 * max(1.0, np.abs(s).max()):
        raise ValueError("zero-variance sample: R^2 undefined")
    z = np.sort((s - s.mean()) / sd)
    q = inv_normal_cdf(blom_positions(z.size))
    r = np.corrcoef(q, z)[0, 1]
    return np.column_stack([q, z]), float(r * r)


def pairs_csv(pairs) -> str:
    lines = ["theoretical,ordered"] + [f"{a:.8f},{b:.8f}" for a, b in pairs]
    return "\n".join(lines) + "\n"


# -- benchmark -------------------------------------------------------------

@dataclass
class BenchmarkRow:
    scheme: str
    policy: str
    psnr: list = field(default_factory=list)
    iters: list = field(default_factory=list)
    failed: int = 0
    error: str = ""

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_iters(self) -> float:
        return float(np.mean(self.iters)) if self.iters else float("nan")


@dataclass
class BenchmarkReport:
    rows: list

    def row(self, scheme, policy) -> BenchmarkRow:
        for r in self.rows:
            if r.scheme == scheme and r.policy == policy:
                return r
        raise KeyError((scheme, policy))

    def to_csv(self) -> str:
        buf = io.StringIO()
        n = max((len(r.psnr) for r in self.rows), default=0)
        buf.write("scheme,policy,mean_psnr,mean_iters,failed," + ",".join(f"psnr_{i}" for i in range(n)) + "\n")
        for r in self.rows:
            vals = [f"{v:.4f}" for v in r.psnr] + [""] * (n - len(r.psnr))
            buf.write(f"{r.scheme},{r.policy},{r.mean_psnr:.4f},{r.mean_iters:.2f},{r.failed}," + ",".join(vals) + "\n")
        return buf.getvalue()

    def to_text(self) -> str:
        head = ("scheme", "policy", "PSNR", "#IT.", "fail")
        body = [(r.scheme, r.policy, f"{r.mean_psnr:.2f}", f"{r.mean_iters:.1f}", str(r.failed)) for r in self.rows]
        w = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
        fmt = lambda cells: "  ".join(c.ljust(w[i]) if i < 2 else c.rjust(w[i]) for i, c in enumerate(cells))
        return "\n".join([fmt(head), "  ".join("-" * x for x in w)] + [fmt(b) for b in body]) + "\n"


def _policy_for(kind, scheme, model, truth, ctx):
    if callable(kind):
        return kind(scheme, model, truth)
    if kind == "fixed":
        return fixed_policy(scheme, model)
    if kind == "handcrafted":
        return handcrafted_policy(scheme=scheme, total_iters=ctx["max_steps"])
    if kind == "fixed-optimal":
        key = ("fixed-optimal", scheme)
        if key not in ctx["cache"]:
            ctx["cache"][key] = fixed_optimal_search(ctx["tune"], ctx["grid"], scheme, ctx["d"],
                                                     ctx["max_steps"], ctx["m"])
        return ctx["cache"][key]
    if kind == "greedy":
        return GreedyPolicy(ctx["grid"])
    if kind == "oracle":
        return oracle_search(model, truth, ctx["grid"], scheme, ctx["d"], ctx["max_steps"], ctx["m"])
    if kind == "learned":
        if scheme not in ctx["learned"]:
            raise ValueError(f"no learned policy for scheme {scheme!r}")
        return ctx["learned"][scheme]
    raise ValueError(f"unknown policy kind {kind!r}")


def run_benchmark(dataset, schemes, policies, d, grid: ParamGrid | None = None, max_steps: int = 30,
                  m: int = 5, tune_set=None, learned=None, star: bool = True) -> BenchmarkReport:
    """Evaluate every (scheme, policy) pair on ``[(model, truth), ...]``.

    ``policies`` holds kind names or ``(name, factory)`` pairs with
    ``factory(scheme, model, truth) -> Policy``. Each pair also yields a "*"
    row reporting the best PSNR over all iterations. Solver aborts count as
    row failures.
    """
    if not dataset:
        raise ValueError("empty dataset")
    ctx = {"grid": grid or ParamGrid(), "max_steps": max_steps, "m": m, "d": d,
           "tune": tune_set or dataset, "learned": learned or {}, "cache": {}}
    rows = []
    for scheme in schemes:
        for entry in policies:
            name, kind = (entry, entry) if isinstance(entry, str) else entry
            plain = BenchmarkRow(scheme, name)
            best = BenchmarkRow(scheme, name + "*")
            for model, truth in dataset:
                try:
                    pol = _policy_for(kind, scheme, model, truth, ctx)
                    tr = run_solver(model, scheme, pol, d, max_steps, m, truth=truth)
                except NumericalAbort as exc:
                    log.warning("%s/%s aborted: %s", scheme, name, exc)
                    plain.failed += 1
                    best.failed += 1
                    plain.error = best.error = str(exc)
                    continue
                plain.psnr.append(float(tr.final_psnr))
                plain.iters.append(len(tr))
                seq = [tr.init_psnr] + list(tr.psnr)
                k = int(np.argmax(seq))
                best.psnr.append(float(seq[k]))
                best.iters.append(k)
            rows.append(plain)
            if star:
                rows.append(best)
    return BenchmarkReport(rows)
