"""Plug-and-play priors: TV prox, Gaussian smoother, and a micro residual U-Net.

Every denoiser maps real images of shape (..., H, W) to the same shape and
accepts ``sigma`` as a scalar or as one value per leading batch entry.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import micrograd as mg
from .tensor import SIGMA_MAX, bcast, make_rng, psnr

log = logging.getLogger(__name__)

TV_STEP = 0.248
TV_ITERS = 30
TV_KAPPA = 8.0
SMOOTHER_PX_PER_SIGMA = 10.0
UNET_CHUNK = 64

KINDS = ("tv-prox", "gaussian-smoother", "micro-unet")


@dataclass
class Denoiser:
    kind: str
    tv_iters: int = TV_ITERS
    kappa: float = TV_KAPPA
    px_per_sigma: float = SMOOTHER_PX_PER_SIGMA
    net: mg.Net | None = None
    trained: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown denoiser kind {self.kind!r}")
        if self.kind == "micro-unet" and self.net is None:
            self.net = mg.micro_unet()

    def __call__(self, x, sigma):
        return denoise(self, x, sigma)


def denoise(d: Denoiser, x, sigma) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    s = np.asarray(sigma, dtype=float)
    if np.any(s < 0) or np.any(s > SIGMA_MAX + 1e-12):
        raise ValueError(f"sigma outside [0, {SIGMA_MAX:.4f}]")
    if d.kind == "tv-prox":
        return tv_prox(x, d.kappa * s ** 2, d.tv_iters)
    if d.kind == "gaussian-smoother":
        return gaussian_smooth(x, d.px_per_sigma * s)
    return unet_denoise(d.net, x, s)


# -- total variation -------------------------------------------------------

def _grad(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[..., :-1, :] = u[..., 1:, :] - u[..., :-1, :]
    gy[..., :, :-1] = u[..., :, 1:] - u[..., :, :-1]
    return gx, gy


def _div(px, py):
    # negative adjoint of _grad
    d = np.zeros_like(px)
    d[..., 0, :] = px[..., 0, :]
    d[..., 1:-1, :] = px[..., 1:-1, :] - px[..., :-2, :]
    d[..., -1, :] = -px[..., -2, :]
    d[..., :, 0] += py[..., :, 0]
    d[..., :, 1:-1] += py[..., :, 1:-1] - py[..., :, :-2]
    d[..., :, -1] += -py[..., :, -2]
    return d


def tv_value(u) -> np.ndarray:
    gx, gy = _grad(u)
    return np.sqrt(gx ** 2 + gy ** 2).sum(axis=(-2, -1))


def tv_objective(u, x, lam) -> np.ndarray:
    return np.asarray(lam) * tv_value(u) + 0.5 * ((u - x) ** 2).sum(axis=(-2, -1))


def tv_prox(x, lam, iters: int = TV_ITERS, step: float = TV_STEP) -> np.ndarray:
    """Isotropic TV prox by Chambolle's dual fixed-point projection."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("negative TV weight")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.any(lam > 0):
        return x.copy()
    lamb = bcast(lam)
    active = lamb > 0
    inv = np.where(active, 1.0 / np.where(active, lamb, 1.0), 0.0)
    xs = x * inv
    px = np.zeros_like(x)
    py = np.zeros_like(x)
    dv = np.empty_like(x)
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    nrm = np.empty_like(x)
    for _ in range(iters):
        # px[-1, :] and py[:, -1] stay zero, so the divergence is a plain backward difference
        np.copyto(dv, px)
        dv[..., 1:, :] -= px[..., :-1, :]
        dv += py
        dv[..., :, 1:] -= py[..., :, :-1]
        dv -= xs
        np.subtract(dv[..., 1:, :], dv[..., :-1, :], out=gx[..., :-1, :])
        np.subtract(dv[..., :, 1:], dv[..., :, :-1], out=gy[..., :, :-1])
        np.multiply(gx, gx, out=nrm)
        nrm += gy * gy
        np.sqrt(nrm, out=nrm)
        nrm *= step
        nrm += 1.0
        px += step * gx
        px /= nrm
        py += step * gy
        py /= nrm
    return x - lamb * _div(px, py)


# -- Gaussian smoother -----------------------------------------------------

def gaussian_smooth(x, width) -> np.ndarray:
    """Periodic Gaussian blur with standard deviation ``width`` pixels."""
    x = np.asarray(x, dtype=float)
    H, W = x.shape[-2:]
    fy = np.fft.fftfreq(H)[:, None]
    fx = np.fft.fftfreq(W)[None, :]
    w = bcast(width)
    transfer = np.exp(-2.0 * np.pi ** 2 * w ** 2 * (fy ** 2 + fx ** 2))
    return np.real(np.fft.ifft2(np.fft.fft2(x) * transfer))


# -- micro U-Net -----------------------------------------------------------

def _unet_inputs(x, sigma):
    """Stack (centred image, sigma plane) and the flat reference (0, sigma plane)."""
    lead = x.shape[:-2]
    flat = x.reshape((-1,) + x.shape[-2:])
    s = np.broadcast_to(np.asarray(sigma, dtype=float), lead).reshape(-1)
    centred = flat - flat.mean(axis=(-2, -1), keepdims=True)
    plane = np.broadcast_to((s / SIGMA_MAX)[:, None, None], flat.shape)
    inp = np.stack([centred, plane], axis=1)
    ref = np.stack([np.zeros_like(centred), plane], axis=1)
    return np.concatenate([inp, ref], axis=0), flat


def unet_denoise(net: mg.Net, x, sigma) -> np.ndarray:
    """x + g(x - mean(x), sigma) - g(0, sigma): constants pass through exactly."""
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-2]
    flat = x.reshape((-1,) + x.shape[-2:])
    s = np.broadcast_to(np.asarray(sigma, dtype=float), lead).reshape(-1)
    out = np.empty_like(flat)
    for lo in range(0, flat.shape[0], UNET_CHUNK):
        sl = slice(lo, lo + UNET_CHUNK)
        inp, _ = _unet_inputs(flat[sl], s[sl])
        r = net(inp)[:, 0]
        n = r.shape[0] // 2
        out[sl] = flat[sl] + r[:n] - r[n:]
    return out.reshape(x.shape)


def unet_loss_and_grad(net: mg.Net, noisy, clean, sigma) -> float:
    """Mean absolute error of the denoised batch; accumulates gradients into ``net``."""
    inp, flat = _unet_inputs(noisy, sigma)
    r, tape = mg.net_forward(net, inp)
    n = flat.shape[0]
    out = flat + r[:n, 0] - r[n:, 0]
    diff = out - clean.reshape(flat.shape)
    g = np.sign(diff) / diff.size
    gout = np.concatenate([g, -g], axis=0)[:, None]
    mg.net_backward(net, tape, gout)
    return float(np.abs(diff).mean())


@dataclass
class DenoiserTrainConfig:
    steps: int = 2000
    batch: int = 16
    lr: float = 1e-3
    patch: int = 32
    sigma_lo: float = 1.0 / 255.0
    sigma_hi: float = SIGMA_MAX
    seed: int = 0
    min_patches: int = 1000
    log_every: int = 200


def train_denoiser(patches: np.ndarray, cfg: DenoiserTrainConfig | None = None) -> Denoiser:
    """Fit the micro U-Net on clean ``patches`` (n, P, P) with L1 loss and Adam."""
    cfg = cfg or DenoiserTrainConfig()
    patches = np.asarray(patches, dtype=float)
    if patches.shape[0] < cfg.min_patches:
        raise ValueError(f"need at least {cfg.min_patches} patches, got {patches.shape[0]}")
    net = mg.micro_unet(seed=cfg.seed)
    d = Denoiser("micro-unet", net=net, trained=cfg.steps > 0)
    rng = make_rng(cfg.seed + 1)
    opt = mg.AdamState(lr=cfg.lr)
    history = []
    for step in range(cfg.steps):
        idx = rng.integers(0, patches.shape[0], size=cfg.batch)
        clean = patches[idx]
        sig = rng.uniform(cfg.sigma_lo, cfg.sigma_hi, size=cfg.batch)
        noisy = clean + sig[:, None, None] * rng.standard_normal(clean.shape)
        loss = unet_loss_and_grad(net, noisy, clean, sig)
        if not np.isfinite(loss) or not mg.grads_finite(net):
            raise FloatingPointError(f"denoiser training diverged at step {step} (loss={loss})")
        mg.adam_step(net, opt)
        history.append(loss)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("denoiser step %d  L1 %.5f", step + 1, np.mean(history[-cfg.log_every:]))
    d.meta["loss_history"] = history
    return d


def evaluate_denoiser(d: Denoiser, clean: np.ndarray, sigma: float, seed: int = 0):
    """Mean PSNR of noisy input and of the denoised output at noise ``sigma``."""
    rng = make_rng(seed)
    noisy = clean + sigma * rng.standard_normal(clean.shape)
    return float(np.mean(psnr(noisy, clean))), float(np.mean(psnr(denoise(d, noisy, sigma), clean)))


def save_denoiser(path, d: Denoiser) -> None:
    if d.kind != "micro-unet":
        raise ValueError("only micro-unet denoisers have checkpoints")
    mg.save_net(path, d.net, extra_header=f"denoiser micro-unet trained={int(d.trained)}")


def load_denoiser(path) -> Denoiser:
    net, extra = mg.load_net(path)
    return Denoiser("micro-unet", net=net, trained="trained=1" in extra)
