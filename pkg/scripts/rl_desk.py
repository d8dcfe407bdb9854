"""Desk run: train a parameter policy on CS-MRI phantoms and compare with fixed parameters."""

import argparse
import logging
import time

import numpy as np

from autopnp.denoisers import Denoiser
from autopnp.env import EnvConfig
from autopnp.phantoms import PhantomSpec, generate_phantoms
from autopnp.policies import fixed_policy
from autopnp.problems import radial_mask
from autopnp.solvers import run_solver
from autopnp.train import ProblemSuite, TrainConfig, evaluate_learned, save_actor_critic, train_policy

ap = argparse.ArgumentParser()
ap.add_argument("--iterations", type=int, default=300)
ap.add_argument("--eta", type=float, default=0.05)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--out", default=None)
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

d = Denoiser("tv-prox")
mask = radial_mask(32, 32, 0.2588, 0)
train = ProblemSuite(generate_phantoms(PhantomSpec(seed=1), 64), "csmri", mask)
test = ProblemSuite(generate_phantoms(PhantomSpec(seed=2), 16), "csmri", mask).instances(seed=3)

t0 = time.time()
cfg = TrainConfig(iterations=args.iterations, eta=args.eta, seed=args.seed)
ac, rows = train_policy(cfg, train, "admm", d)
print(f"trained in {time.time() - t0:.0f}s")
if args.out:
    save_actor_critic(args.out, ac, cfg)

ev = evaluate_learned(ac, test, d, cfg.env)
fixed = [run_solver(m, "admm", fixed_policy("admm", m), d, 30, 5, truth=t).final_psnr for m, t in test]
print(f"learned {ev.mean_psnr:.3f} dB  stop {ev.mean_stop_block:.2f}   fixed {np.mean(fixed):.3f} dB")
