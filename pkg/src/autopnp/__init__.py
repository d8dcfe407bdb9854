"""Plug-and-play image reconstruction with learned, tuning-free parameter policies."""

from .denoisers import Denoiser, denoise
from .env import EnvConfig
from .policies import ParamGrid, fixed_policy, handcrafted_policy
from .problems import make_problem, radial_mask
from .solvers import StepParams, init_state, run_solver
from .tensor import make_rng, psnr

__version__ = "0.1.0"

__all__ = [
    "Denoiser", "denoise", "EnvConfig", "ParamGrid", "fixed_policy", "handcrafted_policy", "make_problem",
    "radial_mask", "StepParams", "init_state", "run_solver", "make_rng", "psnr",
]
