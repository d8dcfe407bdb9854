"""Procedural piecewise-smooth test images (ellipses, rectangles, gradients)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import make_rng


@dataclass
class PhantomSpec:
    size: int = 32
    ellipses: int = 4
    rectangles: int = 2
    background: tuple[float, float] = (0.0, 0.3)
    intensity: tuple[float, float] = (0.2, 1.0)
    gradient: float = 0.2
    seed: int = 0


def render_phantom(spec: PhantomSpec, rng) -> np.ndarray:
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n] / max(n - 1, 1)
    img = np.full((n, n), rng.uniform(*spec.background))
    if spec.gradient > 0 and (spec.ellipses or spec.rectangles):
        ang = rng.uniform(0, 2 * np.pi)
        img = img + spec.gradient * rng.uniform() * (np.cos(ang) * (xx - 0.5) + np.sin(ang) * (yy - 0.5))
    for _ in range(spec.ellipses):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        ry, rx = rng.uniform(0.08, 0.35, size=2)
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        a = (dx * np.cos(th) + dy * np.sin(th)) / rx
        b = (-dx * np.sin(th) + dy * np.cos(th)) / ry
        img = np.where(a ** 2 + b ** 2 <= 1.0, rng.uniform(*spec.intensity), img)
    for _ in range(spec.rectangles):
        y0, x0 = rng.uniform(0.05, 0.7, size=2)
        h, w = rng.uniform(0.1, 0.35, size=2)
        inside = (yy >= y0) & (yy <= y0 + h) & (xx >= x0) & (xx <= x0 + w)
        img = np.where(inside, rng.uniform(*spec.intensity), img)
    return np.clip(img, 0.0, 1.0)


def generate_phantoms(spec: PhantomSpec, count: int) -> np.ndarray:
    """``count`` phantoms of shape (count, size, size), deterministic in ``spec.seed``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = make_rng(spec.seed)
    return np.stack([render_phantom(spec, rng) for _ in range(count)])


def random_patches(images: np.ndarray, patch: int, count: int, seed: int = 0) -> np.ndarray:
    rng = make_rng(seed)
    n, H, W = images.shape
    out = np.empty((count, patch, patch))
    for i in range(count):
        j = rng.integers(n)
        y = rng.integers(0, H - patch + 1)
        x = rng.integers(0, W - patch + 1)
        out[i] = images[j, y:y + patch, x:x + patch]
    return out
