"""Quality metrics and the exact context-length budget calculator."""

from __future__ import annotations

import dataclasses
import math
import warnings

import numpy as np

__all__ = [
    "BudgetSpec",
    "BudgetReport",
    "context_length",
    "budget_table",
    "psnr",
    "ssim",
    "retrieval_baselines",
    "PSNR_CAP_DB",
    "LATENT_DYNAMIC_RANGE",
]

PSNR_CAP_DB = 99.0
# Documented dynamic range of the latent generator contract ([-3, 3]).
LATENT_DYNAMIC_RANGE = 6.0


@dataclasses.dataclass(frozen=True)
class BudgetSpec:
    """Geometry + reduction rates for a context-length computation.

    ``vae_spatial`` is the total pixel-to-token spatial reduction of the
    uncompressed path (VAE times patchifier, e.g. 16 for the 8x VAE with
    a 2x patchifier); ``vae_temporal`` likewise for time.  Memory-encoder
    token counts divide the uncompressed count by r_h * r_w * r_t.
    """

    width: int
    height: int
    fps: int
    duration_s: float
    vae_spatial: int = 16
    vae_temporal: int = 4
    compression_rates: tuple = ()  # tuples (r_h, r_w, r_t), one per encoder
    window_frames: int = 0
    window_patch_spatial: int = 1


@dataclasses.dataclass(frozen=True)
class BudgetReport:
    uncompressed: int
    per_encoder: tuple
    window_tokens: int
    total: int


def _div(n: int, d: int, axis: str, exact: bool) -> int:
    if n % d != 0:
        if exact:
            raise ValueError(f"extent {n} on axis {axis} not divisible by rate {d}")
        warnings.warn(f"axis {axis}: {n} not divisible by {d}, flooring", stacklevel=3)
    return n // d


def context_length(spec: BudgetSpec, exact: bool = False) -> BudgetReport:
    """Token budget: uncompressed, per-encoder compressed, window, total.

    Non-divisible extents floor with a warning unless ``exact`` is set,
    matching the approximate published-scale accounting.
    """
    w_tok = _div(spec.width, spec.vae_spatial, "width", exact)
    h_tok = _div(spec.height, spec.vae_spatial, "height", exact)
    frames = int(spec.fps * spec.duration_s)
    t_tok = _div(frames, spec.vae_temporal, "time", exact)
    if min(w_tok, h_tok, t_tok) < 1:
        raise ValueError("geometry reduces to zero tokens")
    uncompressed = w_tok * h_tok * t_tok
    per_encoder = []
    for r_h, r_w, r_t in spec.compression_rates:
        if min(r_h, r_w, r_t) < 1:
            raise ValueError("compression rates must be >= 1")
        if h_tok % r_h or w_tok % r_w or t_tok % r_t:
            # published-scale accounting divides the token total by the
            # rate volume when the grid does not tile exactly
            if exact:
                _div(h_tok, r_h, "height", True)
                _div(w_tok, r_w, "width", True)
                _div(t_tok, r_t, "time", True)
            warnings.warn(
                f"rate {r_h}x{r_w}x{r_t} does not tile the token grid; "
                "using total/volume accounting",
                stacklevel=2,
            )
            per_encoder.append(uncompressed // (r_h * r_w * r_t))
        else:
            per_encoder.append((h_tok // r_h) * (w_tok // r_w) * (t_tok // r_t))
    win = 0
    if spec.window_frames:
        ws = spec.window_patch_spatial
        win = spec.window_frames * _div(h_tok, ws, "height", exact) * _div(w_tok, ws, "width", exact)
    total = (sum(per_encoder) if per_encoder else uncompressed) + win
    return BudgetReport(
        uncompressed=uncompressed,
        per_encoder=tuple(per_encoder),
        window_tokens=win,
        total=total,
    )


def budget_table(spec: BudgetSpec, rate_grid) -> list:
    """Rows of (rate, tokens, reduction) for a grid of rate triples."""
    rows = []
    for rate in rate_grid:
        rep = context_length(dataclasses.replace(spec, compression_rates=(tuple(rate),)))
        rows.append(
            {
                "rate": f"{rate[0]}x{rate[1]}x{rate[2]}",
                "tokens": rep.per_encoder[0] + rep.window_tokens,
                "uncompressed": rep.uncompressed,
                "reduction": rep.uncompressed / max(rep.per_encoder[0], 1),
            }
        )
    return rows


def psnr(a: np.ndarray, b: np.ndarray, max_value: float = LATENT_DYNAMIC_RANGE) -> float:
    """10*log10(max^2 / MSE) in dB; identical inputs return the 99 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(max_value**2 / mse), PSNR_CAP_DB)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _filter2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filtering of a 2-d image."""
    size = kernel.size
    win = np.lib.stride_tricks.sliding_window_view(img, size, axis=0)
    img = np.tensordot(win, kernel, axes=([-1], [0]))
    win = np.lib.stride_tricks.sliding_window_view(img, size, axis=1)
    return np.tensordot(win, kernel, axes=([-1], [0]))


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    max_value: float = LATENT_DYNAMIC_RANGE,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity over frames and channels, Gaussian window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None, ..., None]
        b = b[None, ..., None]
    elif a.ndim == 3:
        a = a[None]
        b = b[None]
    t, h, w, c = a.shape
    if window > h or window > w:
        raise ValueError(f"ssim window {window} exceeds spatial extents ({h}, {w})")
    kern = _gaussian_kernel(window, sigma)
    c1 = (k1 * max_value) ** 2
    c2 = (k2 * max_value) ** 2
    scores = []
    for ti in range(t):
        for ci in range(c):
            x, y = a[ti, :, :, ci], b[ti, :, :, ci]
            mx, my = _filter2d(x, kern), _filter2d(y, kern)
            vx = _filter2d(x * x, kern) - mx * mx
            vy = _filter2d(y * y, kern) - my * my
            cov = _filter2d(x * y, kern) - mx * my
            num = (2 * mx * my + c1) * (2 * cov + c2)
            den = (mx * mx + my * my + c1) * (vx + vy + c2)
            scores.append(np.mean(num / den))
    return float(np.mean(scores))


def retrieval_baselines(history: np.ndarray, omega) -> dict:
    """Non-learned reconstructions of the masked frames.

    copy_nearest: each masked frame replaced by the nearest clean frame.
    dataset_mean: every masked frame replaced by the history's mean frame.
    Returned arrays cover the masked positions in index order.
    """
    clean = sorted(omega.indices)
    masked = sorted(set(range(omega.total_frames)) - set(clean))
    mean_frame = history.mean(axis=0)
    nearest = []
    for f in masked:
        src = min(clean, key=lambda i: (abs(i - f), i))
        nearest.append(history[src])
    return {
        "masked_indices": masked,
        "copy_nearest": np.stack(nearest) if masked else np.empty((0,) + history.shape[1:]),
        "dataset_mean": np.broadcast_to(mean_frame, (len(masked),) + history.shape[1:]).copy(),
    }
