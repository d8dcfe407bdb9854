"""``autopnp`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical abort, 4 I/O error.
Errors print one line ``autopnp: <category>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, describe_defaults, parse_config
from .denoisers import Denoiser, DenoiserTrainConfig, evaluate_denoiser, load_denoiser, save_denoiser, train_denoiser
from .diagnostics import iteration_noise, pairs_csv, probplot_r2, run_benchmark
from .env import EnvConfig
from .phantoms import PhantomSpec, generate_phantoms, random_patches
from .policies import (POLICY_KINDS, GreedyPolicy, LearnedPolicy, ParamGrid, fixed_optimal_search, fixed_policy,
                       handcrafted_policy, oracle_search)
from .problems import cartesian_mask, radial_mask, save_model
from .solvers import STEP_FNS, NumericalAbort, run_solver
from .tensor import read_tft, write_pgm, write_tft
from .train import ProblemSuite, TrainConfig, TrainingDiverged, load_policy_net, save_actor_critic, train_policy

log = logging.getLogger("autopnp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

FLAG_KEYS = {
    "problem": "problem.kind", "ratio": "problem.ratio", "noise": "problem.noise", "jots": "problem.jots",
    "cdp_alpha": "problem.cdp_alpha", "scheme": "solver.scheme", "policy": "policy.kind", "seed": "seed",
    "checkpoint": "policy.checkpoint", "denoiser": "denoiser.kind", "denoiser_checkpoint": "denoiser.checkpoint",
    "out": "paths.out", "run_dir": "paths.run_dir",
}


class CliError(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


# -- configuration ---------------------------------------------------------

def load_config(args) -> Config:
    cfg = Config()
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config {args.config}: {exc.strerror}") from None
        cfg = parse_config(text)
    for flag, key in FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            cfg.set(key, val)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    validate(cfg)
    return cfg


def validate(cfg: Config) -> None:
    checks = [
        (cfg["problem.kind"] in ("csmri", "qis", "cdp"), "problem.kind must be csmri, qis or cdp"),
        (cfg["solver.scheme"] in STEP_FNS, f"solver.scheme must be one of {', '.join(STEP_FNS)}"),
        (cfg["policy.kind"] in POLICY_KINDS, f"policy.kind must be one of {', '.join(POLICY_KINDS)}"),
        (cfg["denoiser.kind"] in ("tv-prox", "gaussian-smoother", "micro-unet"), "unknown denoiser.kind"),
        (cfg["problem.mask"] in ("radial", "cartesian"), "problem.mask must be radial or cartesian"),
        (0 < cfg["problem.ratio"] <= 1, "problem.ratio must lie in (0, 1]"),
        (0 <= cfg["problem.noise"] <= 50, "problem.noise must lie in [0, 50]"),
        (cfg["problem.jots"] >= 1, "problem.jots must be >= 1"),
        (cfg["env.m"] >= 1 and cfg["env.N"] >= 1, "env.m and env.N must be >= 1"),
        (0 <= cfg["env.rho"] <= 1, "env.rho must lie in [0, 1]"),
        (cfg["solver.max_steps"] >= 1, "solver.max_steps must be >= 1"),
        (cfg["data.size"] >= 8, "data.size must be >= 8"),
        (cfg["data.train_count"] >= 1 and cfg["data.test_count"] >= 1, "data counts must be >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def make_run_dir(cfg: Config, command: str) -> Path:
    if cfg["paths.run_dir"]:
        run = Path(cfg["paths.run_dir"])
    else:
        run = Path(cfg["paths.out"]) / f"{time.strftime('%Y%m%d-%H%M%S')}-{command}-s{cfg['seed']}"
    run.mkdir(parents=True, exist_ok=True)
    return run


def write_manifest(run: Path, cfg: Config, command: str, outputs) -> None:
    lines = [f"command {command}", f"created {time.strftime('%Y-%m-%dT%H:%M:%S')}",
             f"numpy {np.__version__}", ""]
    lines += [f"config {k} = {v}" for k, v in cfg.items()]
    lines += [""] + [f"output {o}" for o in outputs]
    (run / "manifest.txt").write_text("\n".join(lines) + "\n")


def write_text(path: Path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


# -- data ------------------------------------------------------------------

def images(cfg: Config, split: str) -> np.ndarray:
    if split == "test" and cfg["data.input"]:
        arr = read_tft(cfg["data.input"])
        return arr[None] if arr.ndim == 2 else arr
    count, seed = (cfg["data.train_count"], cfg["data.train_seed"]) if split == "train" else \
        (cfg["data.test_count"], cfg["data.test_seed"])
    return generate_phantoms(PhantomSpec(size=cfg["data.size"], seed=seed), count)


def make_suite(cfg: Config, imgs: np.ndarray) -> ProblemSuite:
    kind = cfg["problem.kind"]
    mask = None
    if kind == "csmri":
        H, W = imgs.shape[-2:]
        maker = radial_mask if cfg["problem.mask"] == "radial" else cartesian_mask
        mask = maker(H, W, cfg["problem.ratio"], cfg["seed"])
    # noise and cdp_alpha are quoted for 8-bit intensities; images live in [0, 1]
    return ProblemSuite(imgs, kind, mask, (cfg["problem.noise"] / 255.0,), cfg["problem.jots"],
                        cfg["problem.cdp_alpha"] / 255.0)


def heldout_instances(cfg: Config):
    return make_suite(cfg, images(cfg, "test")).instances(seed=cfg["seed"] + 1000)


def make_denoiser(cfg: Config) -> Denoiser:
    if cfg["denoiser.kind"] == "micro-unet":
        if not cfg["denoiser.checkpoint"]:
            raise ConfigError("micro-unet needs denoiser.checkpoint")
        return load_denoiser(cfg["denoiser.checkpoint"])
    return Denoiser(cfg["denoiser.kind"])


def env_config(cfg: Config) -> EnvConfig:
    return EnvConfig(cfg["env.m"], cfg["env.N"], cfg["env.eta"], cfg["env.rho"])


def policy_factory(cfg: Config, d, tune=None):
    kind, scheme = cfg["policy.kind"], cfg["solver.scheme"]
    grid = ParamGrid()
    steps, m = cfg["solver.max_steps"], cfg["env.m"]
    if kind == "learned":
        if not cfg["policy.checkpoint"]:
            raise ConfigError("learned policy needs policy.checkpoint")
        net, _ = load_policy_net(cfg["policy.checkpoint"])
        return lambda model, truth: LearnedPolicy(net, "eval", env_config=env_config(cfg))
    if kind == "fixed":
        return lambda model, truth: fixed_policy(scheme, model)
    if kind == "handcrafted":
        return lambda model, truth: handcrafted_policy(scheme=scheme, total_iters=steps)
    if kind == "greedy":
        return lambda model, truth: GreedyPolicy(grid)
    if kind == "oracle":
        return lambda model, truth: oracle_search(model, truth, grid, scheme, d, steps, m)
    pol = fixed_optimal_search(tune, grid, scheme, d, steps, m)
    return lambda model, truth: pol


def learned_map(cfg: Config):
    if not cfg["policy.checkpoint"]:
        return {}
    net, scheme = load_policy_net(cfg["policy.checkpoint"])
    return {scheme: LearnedPolicy(net, "eval", env_config=env_config(cfg))}


# -- subcommands -----------------------------------------------------------

def cmd_gen_phantoms(cfg, run, args):
    spec = PhantomSpec(size=cfg["data.size"], seed=cfg["data.test_seed"] if args.split == "test" else cfg["data.train_seed"])
    count = args.count or (cfg["data.test_count"] if args.split == "test" else cfg["data.train_count"])
    imgs = generate_phantoms(spec, count)
    write_tft(run / "phantoms.tft", imgs)
    outs = ["phantoms.tft"]
    for i, im in enumerate(imgs[: args.pgm]):
        write_pgm(run / f"phantom_{i:03d}.pgm", im)
        outs.append(f"phantom_{i:03d}.pgm")
    return outs


def cmd_train_denoiser(cfg, run, args):
    patches = random_patches(images(cfg, "train"), cfg["data.size"], cfg["denoiser_train.patches"], cfg["seed"])
    dcfg = DenoiserTrainConfig(steps=cfg["denoiser_train.steps"], lr=cfg["denoiser_train.lr"], seed=cfg["seed"],
                               patch=cfg["data.size"], min_patches=min(1000, cfg["denoiser_train.patches"]))
    d = train_denoiser(patches, dcfg)
    save_denoiser(run / "denoiser.tft", d)
    rows = ["step,l1"] + [f"{i},{v:.6f}" for i, v in enumerate(d.meta["loss_history"], start=1)]
    write_text(run / "denoiser_loss.csv", "\n".join(rows) + "\n")
    noisy, den = evaluate_denoiser(d, images(cfg, "test"), 25.0 / 255.0, cfg["seed"])
    write_text(run / "denoiser_eval.csv", f"sigma,noisy_psnr,denoised_psnr\n25,{noisy:.4f},{den:.4f}\n")
    print(f"denoiser: {noisy:.2f} dB -> {den:.2f} dB at sigma 25/255")
    return ["denoiser.tft", "denoiser_loss.csv", "denoiser_eval.csv"]


def cmd_train_policy(cfg, run, args):
    d = make_denoiser(cfg)
    suite = make_suite(cfg, images(cfg, "train"))
    tcfg = TrainConfig(iterations=cfg["train.iterations"], batch_size=cfg["train.batch_size"],
                       grad_steps=cfg["train.grad_steps"], rollout_batch=cfg["train.rollout_batch"],
                       lr_policy=cfg["train.lr_policy"], lr_value=cfg["train.lr_value"], m=cfg["env.m"],
                       N=cfg["env.N"], eta=cfg["env.eta"], rho=cfg["env.rho"], buffer_capacity=cfg["train.buffer"],
                       seed=cfg["seed"])
    try:
        ac, _ = train_policy(tcfg, suite, cfg["solver.scheme"], d, log_path=run / "train_log.csv")
    except TrainingDiverged as exc:
        if exc.checkpoint is not None:
            save_actor_critic(run / "checkpoint_last_good", exc.checkpoint, tcfg)
        raise
    save_actor_critic(run / "checkpoint", ac, tcfg)
    return ["train_log.csv", "checkpoint/"]


def cmd_solve(cfg, run, args):
    d = make_denoiser(cfg)
    inst = heldout_instances(cfg)
    if not 0 <= args.index < len(inst):
        raise ConfigError(f"--index {args.index} outside [0, {len(inst)})")
    model, truth = inst[args.index]
    pol = policy_factory(cfg, d, inst)(model, truth)
    tr = run_solver(model, cfg["solver.scheme"], pol, d, cfg["solver.max_steps"], cfg["env.m"], truth=truth)
    write_text(run / "trace.csv", tr.to_csv())
    x = tr.x[-1] if tr.x else tr.init_x
    write_tft(run / "recon.tft", x)
    write_pgm(run / "recon.pgm", x)
    write_pgm(run / "truth.pgm", truth)
    save_model(run / "model.tft", model)
    print(f"init {tr.init_psnr:.2f} dB  final {tr.final_psnr:.2f} dB  iterations {len(tr)}")
    return ["trace.csv", "recon.tft", "recon.pgm", "truth.pgm", "model.tft"]


def cmd_benchmark(cfg, run, args):
    d = make_denoiser(cfg)
    inst = heldout_instances(cfg)
    schemes = [s.strip() for s in cfg["benchmark.schemes"].split(",") if s.strip()]
    kinds = [p.strip() for p in cfg["benchmark.policies"].split(",") if p.strip()]
    for s in schemes:
        if s not in STEP_FNS:
            raise ConfigError(f"unknown scheme {s!r} in benchmark.schemes")
    for k in kinds:
        if k not in POLICY_KINDS:
            raise ConfigError(f"unknown policy {k!r} in benchmark.policies")
    rep = run_benchmark(inst, schemes, kinds, d, ParamGrid(), cfg["solver.max_steps"], cfg["env.m"],
                        learned=learned_map(cfg))
    write_text(run / "benchmark.csv", rep.to_csv())
    write_text(run / "benchmark.txt", rep.to_text())
    print(rep.to_text(), end="")
    return ["benchmark.csv", "benchmark.txt"]


def cmd_diagnose(cfg, run, args):
    d = make_denoiser(cfg)
    inst = heldout_instances(cfg)
    scheme = cfg["solver.scheme"]
    its = sorted({int(s) for s in cfg["diagnose.iterations"].split(",") if s.strip()})
    factory = policy_factory(cfg, d, inst)
    rows = ["image,iteration,noise_norm,r2"]
    outs = []
    for i, (model, truth) in enumerate(inst):
        tr = run_solver(model, scheme, factory(model, truth), d, cfg["solver.max_steps"], cfg["env.m"], truth=truth)
        samples = iteration_noise(tr, truth, scheme)
        for s in samples:
            if s.k not in its:
                continue
            try:
                pairs, r2 = probplot_r2(s.values, seed=cfg["seed"])
            except ValueError:
                rows.append(f"{i},{s.k},{s.norm:.6f},")
                continue
            rows.append(f"{i},{s.k},{s.norm:.6f},{r2:.6f}")
            if i == 0:
                name = f"probplot_k{s.k:03d}.csv"
                write_text(run / name, pairs_csv(pairs))
                outs.append(name)
    write_text(run / "diagnose.csv", "\n".join(rows) + "\n")
    return ["diagnose.csv"] + outs


COMMANDS = {
    "gen-phantoms": cmd_gen_phantoms, "train-denoiser": cmd_train_denoiser, "train-policy": cmd_train_policy,
    "solve": cmd_solve, "benchmark": cmd_benchmark, "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--problem", choices=("csmri", "qis", "cdp"))
    common.add_argument("--ratio", type=float, help="CS-MRI sampling ratio")
    common.add_argument("--noise", type=float, help="CS-MRI noise level in 1/255 units")
    common.add_argument("--jots", type=int, help="QIS oversampling factor K")
    common.add_argument("--cdp-alpha", dest="cdp_alpha", type=float, help="CDP noise factor (8-bit intensity units)")
    common.add_argument("--scheme", choices=tuple(STEP_FNS))
    common.add_argument("--policy", choices=POLICY_KINDS)
    common.add_argument("--checkpoint", help="learned policy checkpoint")
    common.add_argument("--denoiser", choices=("tv-prox", "gaussian-smoother", "micro-unet"))
    common.add_argument("--denoiser-checkpoint", dest="denoiser_checkpoint")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="parent directory for run directories")
    common.add_argument("--run-dir", dest="run_dir", help="explicit run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="autopnp", description="Plug-and-play reconstruction with learned parameter policies.")
    ap.add_argument("--list-config", action="store_true", help="print configuration keys and defaults")
    sub = ap.add_subparsers(dest="command")
    p = sub.add_parser("gen-phantoms", parents=[common])
    p.add_argument("--count", type=int, default=0)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--pgm", type=int, default=4, help="also write the first N phantoms as PGM")
    sub.add_parser("train-denoiser", parents=[common])
    sub.add_parser("train-policy", parents=[common])
    p = sub.add_parser("solve", parents=[common])
    p.add_argument("--index", type=int, default=0, help="held-out image index")
    sub.add_parser("benchmark", parents=[common])
    sub.add_parser("diagnose", parents=[common])
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.list_config:
        print(describe_defaults(), end="")
        return EXIT_OK
    if not args.command:
        ap.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        run = make_run_dir(cfg, args.command)
        outs = COMMANDS[args.command](cfg, run, args)
        write_manifest(run, cfg, args.command, outs)
        print(f"run directory: {run}")
        return EXIT_OK
    except CliError as exc:
        code, cat, msg = exc.code, "io" if exc.code == EXIT_IO else "config", str(exc)
    except ConfigError as exc:
        code, cat, msg = EXIT_CONFIG, "config", str(exc)
    except (NumericalAbort, TrainingDiverged, FloatingPointError) as exc:
        code, cat, msg = EXIT_NUMERIC, "numeric", str(exc)
    except OSError as exc:
        code, cat, msg = EXIT_IO, "io", f"{exc.strerror or exc}" + (f": {exc.filename}" if exc.filename else "")
    except ValueError as exc:
        code, cat, msg = EXIT_CONFIG, "config", str(exc)
    print(f"autopnp: {cat}: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
