"""Procedural latent-video data.

Synthetic sprite scenes with persistent object identity, a fixed linear
"toy VAE" that turns pixel videos into 4-channel latents, random frame
index sets with noise-as-mask levels, and the MCTX binary latent format.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct

import numpy as np

from . import seeding

__all__ = [
    "SceneSpec",
    "LatentVideo",
    "FrameIndexSet",
    "generate_scene",
    "toy_vae_encode",
    "toy_vae_decode",
    "sample_omega",
    "sample_mask_levels",
    "make_latent_scene",
    "save_latents",
    "load_latents",
    "VAE_RATES",
    "LATENT_CHANNELS",
    "DESK_PIXEL",
    "DESK_LATENT",
]

VAE_RATES = (4, 8, 8)  # temporal, height, width
LATENT_CHANNELS = 4
DESK_PIXEL = (96, 64, 64)  # T, H, W
DESK_LATENT = (24, 8, 8, LATENT_CHANNELS)

MCTX_MAGIC = b"MCTX"
MCTX_VERSION = 1
_DTYPE_TAGS = {0: np.float32, 1: np.float64}


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    """Script for one synthetic scene.

    Sprite identity vectors (intensity, size) are constant across every
    frame; they are the consistency signal retrieval has to preserve.
    """

    sprite_intensities: tuple
    sprite_sizes: tuple
    speeds: tuple
    shot_len: int
    background: float
    condition_code: int
    static: bool = False

    @staticmethod
    def random(seed: int, n_sprites: int = 3, vocab: int = 16, static: bool = False) -> "SceneSpec":
        rng = seeding.stream(seed, 0xA11CE)
        return SceneSpec(
            sprite_intensities=tuple(rng.uniform(0.35, 1.0, size=n_sprites).round(3)),
            sprite_sizes=tuple(int(s) for s in rng.integers(14, 29, size=n_sprites)),
            speeds=tuple(rng.uniform(1.0, 3.0, size=n_sprites).round(3)),
            shot_len=10**6 if static else int(rng.integers(16, 33)),
            background=round(float(rng.uniform(0.05, 0.2)), 3),
            condition_code=int(rng.integers(0, vocab)),
            static=static,
        )


@dataclasses.dataclass
class LatentVideo:
    """T×H×W×C latent clip plus provenance metadata."""

    data: np.ndarray
    fps_latent: float
    source_seed: int

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise ValueError(f"latent video must be (T, H, W, C) with T >= 1, got {self.data.shape}")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


@dataclasses.dataclass(frozen=True)
class FrameIndexSet:
    """Retrieval index set: clean indices plus per-masked-frame noise levels."""

    indices: tuple
    mask_noise_levels: dict  # frame -> level in (0.2, 1]
    total_frames: int

    def __post_init__(self):
        if len(self.indices) < 1:
            raise ValueError("frame index set must keep at least one clean frame")
        if any(i < 0 or i >= self.total_frames for i in self.indices):
            raise ValueError("frame index outside [0, T_h)")
        masked = set(range(self.total_frames)) - set(self.indices)
        if masked != set(self.mask_noise_levels):
            raise ValueError("every non-selected frame needs exactly one mask noise level")


def generate_scene(spec: SceneSpec, t_pixel: int, h_pixel: int, w_pixel: int, seed: int) -> np.ndarray:
    """Render a (T, H, W, 1) pixel video in [0, 1], deterministic in (spec, seed).

    Sprites move smoothly (bouncing) within a shot; a shot change
    repositions everything while keeping sprite identities fixed.
    """
    rt, rh, rw = VAE_RATES
    for name, extent, rate in (("T", t_pixel, rt), ("H", h_pixel, rh), ("W", w_pixel, rw)):
        if extent <= 0 or extent % rate != 0:
            raise ValueError(f"pixel extent {name}={extent} not divisible by toy-VAE rate {rate}")

    video = np.full((t_pixel, h_pixel, w_pixel, 1), spec.background, dtype=np.float32)
    n = len(spec.sprite_intensities)
    if n == 0:
        return video

    n_shots = (t_pixel + spec.shot_len - 1) // spec.shot_len
    for shot in range(n_shots):
        rng = seeding.stream(seed, spec.condition_code, shot)
        pos = rng.uniform(0, 1, size=(n, 2))
        ang = rng.uniform(0, 2 * np.pi, size=n)
        t0 = shot * spec.shot_len
        t1 = min(t_pixel, t0 + spec.shot_len)
        for t in range(t0, t1):
            dt = 0.0 if spec.static else float(t - t0)
            for s in range(n):
                size = spec.sprite_sizes[s]
                span_h = max(h_pixel - size, 1)
                span_w = max(w_pixel - size, 1)
                vy = spec.speeds[s] * np.sin(ang[s])
                vx = spec.speeds[s] * np.cos(ang[s])
                y = _bounce(pos[s, 0] * span_h + vy * dt, span_h)
                x = _bounce(pos[s, 1] * span_w + vx * dt, span_w)
                video[t, y : y + size, x : x + size, 0] = spec.sprite_intensities[s]
    return video


def _bounce(p: float, span: int) -> int:
    """Reflect a coordinate into [0, span] (triangle wave)."""
    period = 2.0 * span
    p = p % period
    if p > span:
        p = period - p
    return int(round(p))


def toy_vae_encode(pixels: np.ndarray, rates=VAE_RATES) -> np.ndarray:
    """Linear block encoding: per 4x8x8 block keep (mean, h-diff, v-diff, t-diff).

    The three difference channels are half-block mean contrasts divided
    by two, making decode-then-encode an exact identity on latents.
    """
    rt, rh, rw = rates
    t, h, w, c = pixels.shape
    if t % rt or h % rh or w % rw:
        raise ValueError(f"pixel shape {pixels.shape} not divisible by rates {rates}")
    blocks = pixels.reshape(t // rt, rt, h // rh, rh, w // rw, rw, c).mean(axis=-1)
    # blocks: (T', rt, H', rh, W', rw) after averaging channels out
    mean = blocks.mean(axis=(1, 3, 5))
    half = rw // 2
    hdiff = (blocks[..., :half].mean(axis=(1, 3, 5)) - blocks[..., half:].mean(axis=(1, 3, 5))) / 2
    half = rh // 2
    vdiff = (blocks[:, :, :, :half].mean(axis=(1, 3, 5)) - blocks[:, :, :, half:].mean(axis=(1, 3, 5))) / 2
    half = rt // 2
    tdiff = (blocks[:, :half].mean(axis=(1, 3, 5)) - blocks[:, half:].mean(axis=(1, 3, 5))) / 2
    return np.stack([mean, hdiff, vdiff, tdiff], axis=-1).astype(np.float32)


def toy_vae_decode(latents: np.ndarray, rates=VAE_RATES) -> np.ndarray:
    """Nearest inverse of the toy encoder: rebuild blocks from the 4 features."""
    rt, rh, rw = rates
    tl, hl, wl, c = latents.shape
    if c != LATENT_CHANNELS:
        raise ValueError(f"expected {LATENT_CHANNELS} latent channels, got {c}")
    st = np.where(np.arange(rt) < rt // 2, 1.0, -1.0)[:, None, None]
    sv = np.where(np.arange(rh) < rh // 2, 1.0, -1.0)[None, :, None]
    sh = np.where(np.arange(rw) < rw // 2, 1.0, -1.0)[None, None, :]
    mean, hd, vd, td = (latents[..., i][..., None, None, None] for i in range(4))
    blocks = mean + hd * sh + vd * sv + td * st  # (T', H', W', rt, rh, rw)
    out = blocks.transpose(0, 3, 1, 4, 2, 5).reshape(tl * rt, hl * rh, wl * rw, 1)
    return out.astype(np.float32)


# Fixed standardization of generator latents to roughly unit per-channel
# variance over the moving-sprite distribution (measured once, then frozen).
LATENT_SHIFT = np.array([0.28, 0.0, 0.0, 0.0], dtype=np.float32)
LATENT_SCALE = np.array([4.4, 17.5, 17.5, 19.0], dtype=np.float32)


def make_latent_scene(spec: SceneSpec, seed: int, pixel_shape=DESK_PIXEL) -> LatentVideo:
    """Generate a scene and encode it with the toy VAE (standardized channels)."""
    t, h, w = pixel_shape
    pixels = generate_scene(spec, t, h, w, seed)
    latents = (toy_vae_encode(pixels) - LATENT_SHIFT) * LATENT_SCALE
    return LatentVideo(data=latents, fps_latent=24.0 / VAE_RATES[0], source_seed=seed)


def sample_mask_levels(rng: np.random.Generator, count: int, mu=0.0, sigma=1.0) -> np.ndarray:
    """Noise-as-mask levels: logit-normal draws affinely rescaled into (0.2, 1]."""
    u = 1.0 / (1.0 + np.exp(-(mu + sigma * rng.standard_normal(count))))
    return 0.2 + 0.8 * u


def sample_omega(t_h: int, seed: int, policy: str = "uniform") -> FrameIndexSet:
    """Draw the retrieval index set for a T_h-frame history.

    uniform: |indices| uniform in [1, max(1, T_h // 8)], positions drawn
    without replacement.  fixed-endpoints: always {T_h - 1}; exists only
    to reproduce the shortcut-learning ablation.
    """
    if t_h < 1:
        raise ValueError("history must contain at least one frame")
    rng = seeding.stream(seed, 0x0E6A)
    if policy == "uniform":
        kmax = max(1, t_h // 8)
        k = int(rng.integers(1, kmax + 1))
        idx = tuple(sorted(int(i) for i in rng.choice(t_h, size=k, replace=False)))
    elif policy == "fixed-endpoints":
        idx = (t_h - 1,)
    else:
        raise ValueError(f"unknown omega policy {policy!r}")
    masked = [i for i in range(t_h) if i not in idx]
    levels = sample_mask_levels(rng, len(masked))
    return FrameIndexSet(
        indices=idx,
        mask_noise_levels={f: float(l) for f, l in zip(masked, levels)},
        total_frames=t_h,
    )


# -- MCTX flat binary latent format --------------------------------------------


def save_latents(path: str, array: np.ndarray, meta: dict | None = None) -> None:
    """Write a 4-d array as magic/version/shape/dtype header + row-major values."""
    if array.ndim != 4:
        raise ValueError(f"MCTX stores 4-d latents, got shape {array.shape}")
    tag = 0 if array.dtype == np.float32 else 1
    arr = np.ascontiguousarray(array, dtype=_DTYPE_TAGS[tag])
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MCTX_MAGIC)
        f.write(struct.pack("<I", MCTX_VERSION))
        f.write(struct.pack("<4I", *arr.shape))
        f.write(struct.pack("<I", tag))
        f.write(arr.tobytes(order="C"))
    os.replace(tmp, path)
    if meta is not None:
        with open(path + ".json", "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)


def load_latents(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MCTX_MAGIC:
            raise ValueError(f"bad dataset magic {magic!r} in {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != MCTX_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        shape = struct.unpack("<4I", f.read(16))
        (tag,) = struct.unpack("<I", f.read(4))
        if tag not in _DTYPE_TAGS:
            raise ValueError(f"unknown dtype tag {tag}")
        dtype = _DTYPE_TAGS[tag]
        count = int(np.prod(shape))
        data = np.frombuffer(f.read(), dtype=dtype, count=count)
    return data.reshape(shape).copy()
