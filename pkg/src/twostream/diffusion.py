"""Linear-beta DDPM forward process, epsilon-prediction loss and an eta=0 DDIM sampler.

Timesteps are 1-based here (``t`` in ``1..T``, with ``t = 0`` meaning clean
data); the network is called with ``t - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, no_grad, ops, snapshot


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at 1-based ``t``; ``alpha_bar(0) == 1``."""
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas))


def q_sample(x0, t: int, eps, s: NoiseSchedule) -> Tensor:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`` as a constant tensor."""
    x0 = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != data shape {x0.shape}")
    ab = s.alpha_bar(t)
    return Tensor(np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps)


Predictor = Callable[[Tensor, np.ndarray, np.ndarray], Tensor]


def draw_noise(rng: np.random.Generator, item_shape: tuple, T: int):
    """One item's ``(t, eps)``: timestep first, then noise."""
    t = int(rng.integers(1, T + 1))
    return t, rng.standard_normal(item_shape)


def denoise_residual(model: Predictor, x0, cond: Sequence[int], s: NoiseSchedule,
                     rng: np.random.Generator) -> Tensor:
    """``model(x_t, t - 1, cond) - eps`` with per-item ``(t, eps)`` draws.

    Draws are item-major, ``(t_0, eps_0, t_1, eps_1, ...)``, so a batch of two
    consumes the generator exactly like two batches of one.
    """
    x0 = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    B = x0.shape[0]
    ts = np.empty(B, dtype=np.int64)
    eps = np.empty_like(x0)
    xt = np.empty_like(x0)
    for b in range(B):
        ts[b], eps[b] = draw_noise(rng, x0.shape[1:], s.T)
        xt[b] = q_sample(x0[b], int(ts[b]), eps[b], s).data
    pred = model(Tensor(xt), ts - 1, np.asarray(cond).reshape(-1))
    return ops.add(pred, Tensor(-eps))


def denoise_loss(model: Predictor, x0, cond: Sequence[int], s: NoiseSchedule,
                 rng: np.random.Generator) -> Tensor:
    """Mean squared error between drawn noise and the model's prediction."""
    return ops.reduce_mean_sq(denoise_residual(model, x0, cond, s, rng))


def ddim_timesteps(T: int, steps: int) -> list[int]:
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    return [T - (i * T) // steps for i in range(steps + 1)]


def ddim_sample(model: Predictor, s: NoiseSchedule, steps: int, shape: tuple,
                cond: Sequence[int], seed: int, x_T: Optional[np.ndarray] = None) -> np.ndarray:
    """Deterministic DDIM trajectory from seeded noise; records nothing."""
    seq = ddim_timesteps(s.T, steps)
    x = np.random.default_rng(seed).standard_normal(shape) if x_T is None else np.array(x_T, dtype=np.float64)
    cond = np.asarray(cond).reshape(-1)
    with no_grad():
        for t, t_next in zip(seq[:-1], seq[1:]):
            ab, ab_next = s.alpha_bar(t), s.alpha_bar(t_next)
            eps_hat = model(Tensor(x), np.full(shape[0], t - 1), cond).data
            x0_hat = (x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
            x = np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps_hat
    return x


def to_uint8(frame: np.ndarray) -> np.ndarray:
    """Affine map [-1, 1] -> [0, 255], clipped."""
    return np.clip(np.rint((frame + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_frames(video: np.ndarray, directory, stem: str = "frame") -> list[Path]:
    """Dump a [F, C, H, W] clip as PPM (first three channels) or PGM (C < 3)."""
    d = Path(directory)
    paths = []
    F, C, H, W = video.shape
    for f in range(F):
        if C >= 3:
            pix = to_uint8(video[f, :3].transpose(1, 2, 0))
            head, ext = f"P6\n{W} {H}\n255\n", "ppm"
        else:
            pix = to_uint8(video[f, 0])
            head, ext = f"P5\n{W} {H}\n255\n", "pgm"
        p = d / f"{stem}_{f:03d}.{ext}"
        snapshot.atomic_write(p, head.encode() + pix.tobytes())
        paths.append(p)
    return paths
