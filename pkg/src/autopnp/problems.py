"""Observation models: CS-MRI, quantized-Poisson (QIS) imaging, CDP phase retrieval.

Each model carries its measurement and exposes the data-fidelity pieces the
solvers need: ``prox(v, mu)`` for argmin D(x) + mu/2 |x - v|^2, ``grad(x)``,
``fidelity(x)`` and ``init()``. Measurements may carry a leading batch axis;
``stack`` and ``select`` move between single instances and batches.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import SIGMA_MAX, bcast, dft2, idft2, read_tft_bundle, write_tft_bundle

QIS_BISECT_ITERS = 10
QIS_BRACKET = (0.0, 2.0)
N_CDP_MASKS = 4


def _check_mu(mu):
    if np.any(np.asarray(mu) <= 0):
        raise ValueError("penalty mu must be positive")


def _stack_field(models, name):
    return np.stack([np.asarray(getattr(m, name)) for m in models])


# -- masks -----------------------------------------------------------------

def radial_mask(H: int, W: int, ratio: float, seed: int = 0) -> np.ndarray:
    """Pseudo-radial k-space pattern in FFT layout (DC at [0, 0])."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    target = int(np.ceil(ratio * H * W))
    mask = np.zeros((H, W), dtype=bool)
    cy, cx = H // 2, W // 2
    mask[cy, cx] = True
    r = np.linspace(-max(H, W), max(H, W), 4 * max(H, W) + 1)
    offset = rng.uniform(0, np.pi)
    golden = np.pi * (np.sqrt(5) - 1) / 2
    k = 0
    while mask.sum() < target and k < 10 * (H + W):
        ang = offset + k * golden
        ys = np.round(cy + r * np.sin(ang)).astype(int)
        xs = np.round(cx + r * np.cos(ang)).astype(int)
        ok = (ys >= 0) & (ys < H) & (xs >= 0) & (xs < W)
        mask[ys[ok], xs[ok]] = True
        k += 1
    return np.fft.ifftshift(mask).astype(float)


def cartesian_mask(H: int, W: int, ratio: float, seed: int = 0, center_frac: float = 0.08) -> np.ndarray:
    """Random phase-encode rows with a fully sampled low-frequency band, FFT layout."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    n_rows = max(1, int(round(ratio * H)))
    n_center = min(n_rows, max(1, int(round(center_frac * H))))
    cy = H // 2
    center = list(range(cy - n_center // 2, cy - n_center // 2 + n_center))
    rest = [i for i in range(H) if i not in center]
    rows = center + list(rng.choice(rest, size=n_rows - n_center, replace=False))
    mask = np.zeros((H, W))
    mask[rows, :] = 1.0
    return np.fft.ifftshift(mask)


MASK_KINDS = {"radial": radial_mask, "cartesian": cartesian_mask}


# -- CS-MRI ----------------------------------------------------------------

@dataclass
class CsMriModel:
    mask: np.ndarray
    noise_sigma: float | np.ndarray
    y: np.ndarray

    kind = "csmri"
    complex_state = True
    linear = True

    def __post_init__(self):
        if not np.any(self.mask):
            raise ValueError("CS-MRI mask has no sampled entries")

    @property
    def noise_level(self):
        return np.asarray(self.noise_sigma, dtype=float)

    @property
    def n_measurements(self) -> int:
        return int(np.count_nonzero(self.mask))

    def A(self, x):
        return self.mask * dft2(x)

    def AH(self, z):
        return idft2(self.mask * z)

    def init(self):
        return csmri_init(self)

    def prox(self, v, mu):
        return csmri_prox(v, self, mu)

    def grad(self, x):
        return self.AH(self.A(x) - self.y)

    def fidelity(self, x):
        return 0.5 * np.sum(np.abs(self.y - self.A(x)) ** 2, axis=(-2, -1))

    def select(self, idx):
        ns = np.asarray(self.noise_sigma)
        return replace(self, y=self.y[idx], noise_sigma=ns[idx] if ns.ndim else ns)

    @staticmethod
    def stack(models):
        return CsMriModel(models[0].mask, _stack_field(models, "noise_sigma"), _stack_field(models, "y"))


def csmri_forward(x, mask, sigma, rng) -> CsMriModel:
    """y = mask * (F x + complex noise with per-component std ``sigma``)."""
    x = np.asarray(x, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if not np.any(mask):
        raise ValueError("CS-MRI mask has no sampled entries")
    k = dft2(x)
    if np.any(np.asarray(sigma) > 0):
        s = bcast(sigma)
        k = k + s * (rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape))
    return CsMriModel(mask, sigma, mask * k)


def csmri_init(m: CsMriModel, clip: bool = True) -> np.ndarray:
    x0 = np.real(idft2(m.y))
    return np.clip(x0, 0.0, 1.0) if clip else x0


def csmri_prox(v, m: CsMriModel, mu) -> np.ndarray:
    """Closed-form argmin 1/2 |y - M F x|^2 + mu/2 |x - v|^2 (complex x)."""
    _check_mu(mu)
    mub = bcast(mu)
    return idft2((m.y + mub * dft2(v)) / (m.mask + mub))


# -- QIS -------------------------------------------------------------------

@dataclass
class QisModel:
    K: int
    ones: np.ndarray
    zeros: np.ndarray
    alpha_s: float | None = None

    kind = "qis"
    complex_state = False
    linear = False

    def __post_init__(self):
        if self.alpha_s is None:
            self.alpha_s = float(self.K ** 2)

    @property
    def jots(self) -> int:
        return self.K ** 2

    @property
    def rate(self) -> float:
        # per-jot Poisson rate per unit intensity
        return self.alpha_s / self.jots

    @property
    def noise_level(self):
        return np.full(self.ones.shape[:-2], min(SIGMA_MAX, 1.0 / self.K))

    def init(self):
        return qis_init(self)

    def prox(self, v, mu):
        return qis_prox(v, self, mu)

    def grad(self, x):
        c = self.rate
        x = np.maximum(np.real(x), 1e-3)
        return c * self.zeros - c * self.ones / np.expm1(c * x)

    def fidelity(self, x):
        return np.sum(qis_data_term(np.real(x), self), axis=(-2, -1))

    def select(self, idx):
        return replace(self, ones=self.ones[idx], zeros=self.zeros[idx])

    @staticmethod
    def stack(models):
        return QisModel(models[0].K, _stack_field(models, "ones"), _stack_field(models, "zeros"), models[0].alpha_s)


def qis_forward(x, K: int, rng) -> QisModel:
    """Each of K^2 jots fires when its Poisson(alpha_s x / K^2) count is >= 1."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, None)
    alpha_s = float(K * K)
    p_one = -np.expm1(-alpha_s * x / (K * K))
    ones = rng.binomial(K * K, p_one).astype(float)
    return QisModel(K, ones, K * K - ones, alpha_s)


def qis_init(m: QisModel) -> np.ndarray:
    """Per-pixel MLE with a half-count correction for all-ones pixels."""
    k0 = np.where(m.zeros == 0, 0.5, m.zeros)
    x = -(m.jots / m.alpha_s) * np.log(k0 / m.jots)
    return np.clip(x, 0.0, 1.0)


def qis_data_term(x, m: QisModel):
    c = m.rate
    with np.errstate(divide="ignore", invalid="ignore"):
        one_term = np.where(m.ones > 0, -m.ones * np.log(-np.expm1(-c * x)), 0.0)
    return m.zeros * c * x + one_term


def qis_prox(v, m: QisModel, mu, iters: int = QIS_BISECT_ITERS) -> np.ndarray:
    """Vectorised bisection on the monotone derivative of D_j(x) + mu/2 (x - v_j)^2."""
    _check_mu(mu)
    v = np.real(np.asarray(v))
    mub = bcast(mu)
    c = m.rate
    lo = np.full(v.shape, QIS_BRACKET[0])
    hi = np.full(v.shape, QIS_BRACKET[1])
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        dD = c * m.zeros - c * m.ones / np.expm1(c * mid)
        up = dD + mub * (mid - v) > 0
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)
    return 0.5 * (lo + hi)


# -- CDP phase retrieval ---------------------------------------------------

def _phase(w):
    a = np.abs(w)
    return np.where(a > 0, w / np.where(a > 0, a, 1.0), 0.0)


@dataclass
class CdpModel:
    masks: np.ndarray      # (4, H, W) unit modulus
    y: np.ndarray          # (..., 4, H, W) amplitudes
    alpha: float | np.ndarray = 0.0

    kind = "cdp"
    complex_state = False
    linear = False

    @property
    def noise_level(self):
        return np.minimum(np.asarray(self.alpha, dtype=float), SIGMA_MAX)

    @property
    def lipschitz(self) -> float:
        return float(self.masks.shape[0])

    def A(self, x):
        return dft2(self.masks * np.expand_dims(x, -3))

    def AH(self, w):
        return np.sum(np.conj(self.masks) * idft2(w), axis=-3)

    def init(self, iters: int = 50):
        return cdp_init(self, iters)

    def grad(self, x):
        return cdp_fidelity_grad(x, self)

    def prox(self, v, mu):
        """One gradient step on the prox objective, step 1/(L + mu)."""
        _check_mu(mu)
        v = np.real(v)
        return v - cdp_fidelity_grad(v, self) / (self.lipschitz + bcast(mu))

    def fidelity(self, x):
        return 0.5 * np.sum((np.abs(self.A(np.real(x))) - self.y) ** 2, axis=(-3, -2, -1))

    def select(self, idx):
        al = np.asarray(self.alpha)
        return replace(self, y=self.y[idx], alpha=al[idx] if al.ndim else al)

    @staticmethod
    def stack(models):
        return CdpModel(models[0].masks, _stack_field(models, "y"), _stack_field(models, "alpha"))


def cdp_masks(H: int, W: int, rng, n: int = N_CDP_MASKS) -> np.ndarray:
    return np.exp(2j * np.pi * rng.uniform(size=(n, H, W)))


def cdp_forward(x, rng, alpha: float = 0.0, masks=None) -> CdpModel:
    """y_i = sqrt(max(0, |F D_i x|^2 + w)), w ~ N(0, alpha^2 |F D_i x|^2)."""
    x = np.asarray(x, dtype=float)
    if masks is None:
        masks = cdp_masks(*x.shape[-2:], rng)
    m = CdpModel(masks, np.zeros(x.shape[:-2] + masks.shape), alpha)
    mag2 = np.abs(m.A(x)) ** 2
    if np.any(np.asarray(alpha) > 0):
        a = bcast(alpha, 3)
        mag2 = mag2 + a * np.sqrt(mag2) * rng.standard_normal(mag2.shape)
    m.y = np.sqrt(np.maximum(mag2, 0.0))
    return m


def cdp_fidelity_grad(x, m: CdpModel) -> np.ndarray:
    """Gradient of 1/2 sum_i | |A_i x| - y_i |^2 for real x, with phase(0) = 0."""
    w = m.A(np.real(x))
    r = (np.abs(w) - m.y) * _phase(w)
    return np.real(m.AH(r))


def cdp_init(m: CdpModel, iters: int = 50) -> np.ndarray:
    """Averaged adjoint magnitude, refined by error-reduction sweeps."""
    if iters < 0:
        raise ValueError("iters must be >= 0")
    n = m.masks.shape[0]
    x = np.mean(np.abs(np.conj(m.masks) * idft2(m.y)), axis=-3)
    for _ in range(iters):
        w = m.A(x)
        x = np.clip(np.real(m.AH(m.y * _phase(w))) / n, 0.0, 1.0)
    return x


PROBLEM_KINDS = ("csmri", "qis", "cdp")


def stack_models(models):
    return type(models[0]).stack(models)


def make_problem(kind: str, x, rng, *, mask=None, noise=15.0 / 255.0, jots=8, cdp_alpha=0.0, cdp_masks_=None):
    """Simulate a measurement of ``x`` for the named problem family."""
    if kind == "csmri":
        if mask is None:
            raise ValueError("csmri needs a sampling mask")
        return csmri_forward(x, mask, noise, rng)
    if kind == "qis":
        return qis_forward(x, jots, rng)
    if kind == "cdp":
        return cdp_forward(x, rng, cdp_alpha, masks=cdp_masks_)
    raise ValueError(f"unknown problem kind {kind!r}")


def save_model(path, model) -> None:
    """Write a measurement model as a TFT1 bundle (kind recorded in the header)."""
    if model.kind == "csmri":
        t = {"mask": model.mask, "noise_sigma": np.asarray(model.noise_sigma, dtype=float), "y": model.y}
    elif model.kind == "qis":
        t = {"K": np.asarray(float(model.K)), "ones": np.asarray(model.ones, dtype=float),
             "zeros": np.asarray(model.zeros, dtype=float), "alpha_s": np.asarray(float(model.alpha_s))}
    else:
        t = {"masks": model.masks, "y": model.y, "alpha": np.asarray(model.alpha, dtype=float)}
    write_tft_bundle(path, t, header=f"model {model.kind}")


def load_model(path):
    header, t = read_tft_bundle(path)
    kinds = [ln.split()[1] for ln in header.splitlines() if ln.startswith("model ")]
    if not kinds:
        raise ValueError(f"{path}: not a model bundle")
    kind = kinds[0]
    if kind == "csmri":
        ns = t["noise_sigma"]
        return CsMriModel(t["mask"], float(ns) if ns.ndim == 0 else ns, t["y"])
    if kind == "qis":
        return QisModel(int(t["K"]), t["ones"], t["zeros"], float(t["alpha_s"]))
    if kind == "cdp":
        a = t["alpha"]
        return CdpModel(t["masks"], t["y"], float(a) if a.ndim == 0 else a)
    raise ValueError(f"{path}: unknown model kind {kind!r}")
