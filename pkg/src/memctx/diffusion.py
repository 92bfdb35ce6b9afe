"""Flow-matching machinery.

Straight-line interpolation between data and noise, the shifted
logit-normal timestep distribution, the frame-retrieval pretraining loss,
the autoregressive fine-tuning loss, and a deterministic Euler sampler.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.stats import norm

from . import seeding
from .data import FrameIndexSet
from .tensor import Tensor, no_grad

__all__ = [
    "FlowSample",
    "TimestepDistribution",
    "interpolate",
    "retrieval_loss",
    "finetune_loss",
    "sample",
]


@dataclasses.dataclass
class FlowSample:
    x0: np.ndarray
    eps: np.ndarray
    t: float
    x_t: np.ndarray
    target_v: np.ndarray


def interpolate(x0: np.ndarray, eps: np.ndarray, t: float) -> FlowSample:
    """x_t = (1 - t) x0 + t eps with velocity target eps - x0."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"interpolate shape mismatch: {x0.shape} vs {eps.shape}")
    t = float(t)
    if not (0 < t <= 1):
        raise ValueError(f"timestep must lie in (0, 1], got {t}")
    return FlowSample(x0=x0, eps=eps, t=t, x_t=(1.0 - t) * x0 + t * eps, target_v=eps - x0)


@dataclasses.dataclass(frozen=True)
class TimestepDistribution:
    """Shifted logit-normal over (0, 1): t = s*u / (1 + (s-1)*u), u = sigmoid(mu + sigma*z)."""

    mu: float = 0.0
    sigma: float = 1.0
    shift: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.shift <= 0:
            raise ValueError("shift must be positive")

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        z = rng.standard_normal(size)
        u = 1.0 / (1.0 + np.exp(-(self.mu + self.sigma * z)))
        s = self.shift
        return s * u / (1.0 + (s - 1.0) * u)

    def cdf(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        s = self.shift
        u = t / (s - (s - 1.0) * t)
        u = np.clip(u, 1e-300, 1 - 1e-16)
        return norm.cdf((np.log(u / (1.0 - u)) - self.mu) / self.sigma)


def sample_timestep(dist: TimestepDistribution, seed: int, size=None) -> np.ndarray:
    return dist.sample(seeding.stream(seed, 0x71ED), size)


def _mask_history(history: np.ndarray, omega: FrameIndexSet, rng) -> np.ndarray:
    """Noise-as-mask: non-selected frames interpolated toward noise at their level."""
    masked = history.copy()
    for frame, level in omega.mask_noise_levels.items():
        eps = rng.standard_normal(masked[..., frame, :, :, :].shape)
        masked[..., frame, :, :, :] = (1.0 - level) * masked[..., frame, :, :, :] + level * eps
    return masked.astype(history.dtype)


def mask_history(history: np.ndarray, omega: FrameIndexSet, seed: int) -> np.ndarray:
    return _mask_history(history, omega, seeding.stream(seed, 0x3A5C))


def retrieval_loss(
    g,
    phi,
    history,
    omega: FrameIndexSet,
    c,
    seed: int,
    timestep_dist: TimestepDistribution | None = None,
    freeze_encoder: bool = False,
) -> Tensor:
    """Frame-retrieval objective.

    The clean frames at the selected indices are cloned as the diffusion
    target while the compressed input carries the noise-masked history;
    the model regresses the flow velocity toward those targets.
    """
    if len(omega.indices) == 0:
        raise ValueError("retrieval needs at least one selected frame")
    history = np.asarray(history)
    batched = history.ndim == 5
    h = history if batched else history[None]
    n = h.shape[0]
    if omega.total_frames != h.shape[1]:
        raise ValueError("index set does not match history length")
    dist = timestep_dist or TimestepDistribution()
    rng = seeding.stream(seed, 0x2E72)

    target = h[:, list(omega.indices)]  # (N, |omega|, H, W, C)
    masked = _mask_history(h, omega, rng)
    eps = rng.standard_normal(target.shape).astype(h.dtype)
    t = dist.sample(rng, size=n)
    x_t = (1.0 - t[:, None, None, None, None]) * target + t[:, None, None, None, None] * eps

    ctx = phi.compress(masked)
    if freeze_encoder:
        ctx = dataclasses.replace(ctx, tokens=ctx.tokens.detach())
    pred = g.predict_velocity(x_t, t, c, ctx=ctx, frame_indices=list(omega.indices))
    resid = pred - Tensor((eps - target).astype(h.dtype))
    return resid.square().mean()


def finetune_loss(
    g,
    phi,
    history,
    x0_future,
    c,
    seed: int,
    timestep_dist: TimestepDistribution | None = None,
    freeze_encoder: bool = False,
    window_latents=None,
    window_frame_indices=None,
) -> Tensor:
    """Next-clip objective: predict the velocity of the future clip given
    the compressed history."""
    history = np.asarray(history)
    x0 = np.asarray(x0_future)
    batched = history.ndim == 5
    h = history if batched else history[None]
    x0 = x0 if batched else x0[None]
    if h.shape[0] != x0.shape[0] or h.shape[2:] != x0.shape[2:]:
        raise ValueError(f"history {h.shape} and future clip {x0.shape} disagree")
    dist = timestep_dist or TimestepDistribution()
    rng = seeding.stream(seed, 0xF17E)

    n = h.shape[0]
    eps = rng.standard_normal(x0.shape).astype(h.dtype)
    t = dist.sample(rng, size=n)
    x_t = (1.0 - t[:, None, None, None, None]) * x0 + t[:, None, None, None, None] * eps
    frame_idx = list(range(h.shape[1], h.shape[1] + x0.shape[1]))

    ctx = phi.compress(h)
    if freeze_encoder:
        ctx = dataclasses.replace(ctx, tokens=ctx.tokens.detach())
    pred = g.predict_velocity(
        x_t,
        t,
        c,
        ctx=ctx,
        frame_indices=frame_idx,
        window_latents=window_latents,
        window_frame_indices=window_frame_indices,
    )
    resid = pred - Tensor((eps - x0).astype(h.dtype))
    return resid.square().mean()


def sample(
    g,
    ctx,
    c,
    shape,
    seed: int,
    steps: int = 8,
    frame_indices=None,
    window_latents=None,
    window_frame_indices=None,
) -> np.ndarray:
    """Deterministic Euler integration of the learned velocity from t=1 to 0."""
    if steps < 1:
        raise ValueError("need at least one integration step")
    rng = seeding.stream(seed, 0x5A3B)
    x = rng.standard_normal(shape).astype(np.float32)
    dt = 1.0 / steps
    with no_grad():
        for i in range(steps):
            t = 1.0 - i * dt
            v = g.predict_velocity(
                x[None],
                t,
                c,
                ctx=ctx,
                frame_indices=frame_indices,
                window_latents=window_latents,
                window_frame_indices=window_frame_indices,
            ).numpy()[0]
            x = x - dt * v
    return x
