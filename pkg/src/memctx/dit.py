"""Toy diffusion transformer.

Patchifies a noisy latent clip into tokens, prepends a condition token
and the compressed history context (plus optional uncompressed window
tokens), runs joint self-attention blocks, and unpatchifies the target
segment into a velocity prediction.  All linear maps can be wrapped with
low-rank adapters for fine-tuning.
"""

from __future__ import annotations

import math

import numpy as np

from . import nn
from .compressor import CompressedContext, CompressionRate
from .tensor import Tensor, concat

__all__ = ["DiTModel", "large_patchifier_variant"]


class _Block:
    """Transformer block with timestep modulation (adaLN-zero style).

    The timestep embedding produces per-block shift/scale/gate vectors;
    gates start at zero so an untrained block is the identity.  The
    multiplicative path matters: the optimal velocity carries a 1/t gain
    that additive conditioning alone cannot express.
    """

    def __init__(self, dim, heads, rng, cross_attn=False):
        self.ln1 = _LayerNormParams(dim)
        self.attn = nn.AttentionLayer(dim, heads, rng)
        self.ln2 = _LayerNormParams(dim)
        self.fc1 = nn.Linear(dim, 4 * dim, rng)
        self.fc2 = nn.Linear(4 * dim, dim, rng)
        self.mod = nn.Linear(dim, 6 * dim, rng)
        self.mod.weight.data[:] = 0.0
        self.cross = None
        if cross_attn:
            self.ln3 = _LayerNormParams(dim)
            self.cross = nn.AttentionLayer(dim, heads, rng)
            # zero output projection: enhancement is an exact no-op at step 0
            self.cross.wo.weight.data[:] = 0.0

    def __call__(self, x: Tensor, temb: Tensor, cross_kv: Tensor | None = None) -> Tensor:
        dim = x.shape[-1]
        mod = self.mod(temb.silu())  # (N, 6*dim)
        n = mod.shape[0]
        mod = mod.reshape(n, 1, 6, dim)
        sh1, sc1, g1, sh2, sc2, g2 = (mod[:, :, i] for i in range(6))
        h = self.ln1(x) * (sc1 + 1.0) + sh1
        x = x + self.attn(h) * (g1 + 1.0)
        if self.cross is not None and cross_kv is not None:
            x = x + self.cross(self.ln3(x), cross_kv)
        h = self.ln2(x) * (sc2 + 1.0) + sh2
        return x + self.fc2(self.fc1(h).silu()) * (g2 + 1.0)

    def modules(self):
        mods = [self.ln1, self.attn, self.ln2, self.fc1, self.fc2, self.mod]
        if self.cross is not None:
            mods += [self.ln3, self.cross]
        return mods


class _LayerNormParams:
    def __init__(self, dim):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nn.layernorm(x, self.gain, self.shift)

    def parameters(self):
        return [self.gain, self.shift]


class DiTModel:
    """Velocity predictor over [condition | context | window | target] tokens."""

    def __init__(
        self,
        rng,
        inner_dim: int = 64,
        n_blocks: int = 4,
        n_heads: int = 4,
        patch=(1, 2, 2),
        latent_channels: int = 4,
        cond_vocab: int = 16,
        max_frames: int = 192,
        max_ctx_tokens: int = 2048,
        max_spatial_slots: int = 1024,
        cross_attn: bool = False,
    ):
        self.inner_dim = inner_dim
        self.patch = tuple(patch)
        self.latent_channels = latent_channels
        self.cross_attn = cross_attn
        self.max_frames = max_frames
        patch_in = int(np.prod(self.patch)) * latent_channels
        self.patch_proj = nn.Linear(patch_in, inner_dim, rng)
        self.cond_emb = nn.Embedding(cond_vocab, inner_dim, rng)
        self.t_fc1 = nn.Linear(inner_dim, inner_dim, rng)
        self.t_fc2 = nn.Linear(inner_dim, inner_dim, rng)
        # sinusoidal-initialized (still learnable) position tables: nearby
        # frames/slots start with correlated codes, so matching a target
        # frame to the memory band covering it needs no per-index learning.
        # Unit scale keeps position logits competitive with token content,
        # which is what lets attention route by position early in training.
        self.temporal_emb = nn.Embedding(max_frames, inner_dim, rng)
        self.temporal_emb.table.data[:] = nn.sinusoidal_embedding(
            np.arange(max_frames), inner_dim
        )
        self.spatial_emb = nn.Embedding(max_spatial_slots, inner_dim, rng)
        half = inner_dim // 2
        side = int(math.isqrt(max_spatial_slots))
        rows = np.repeat(np.arange(side), side)[:max_spatial_slots]
        cols = np.tile(np.arange(side), side)[:max_spatial_slots]
        self.spatial_emb.table.data[:, :half] = nn.sinusoidal_embedding(rows, half)
        self.spatial_emb.table.data[:, half:] = nn.sinusoidal_embedding(cols, half)
        self.ctx_emb = nn.Embedding(max_ctx_tokens, inner_dim, rng)
        self.blocks = [_Block(inner_dim, n_heads, rng, cross_attn) for _ in range(n_blocks)]
        self.ln_out = _LayerNormParams(inner_dim)
        self.out_proj = nn.Linear(inner_dim, patch_in, rng)
        self.out_proj.weight.data[:] = 0.0  # velocity head starts at zero
        self.hist_patch = None  # (kernel, Linear) for the enlarged-patchifier arm
        self._lora = False

    # -- tokenization ---------------------------------------------------------

    def _grid(self, shape):
        _, t, h, w, c = shape
        pt, ph, pw = self.patch
        if c != self.latent_channels:
            raise ValueError(f"expected {self.latent_channels} channels, got {c}")
        for axis, extent, p in (("T", t, pt), ("H", h, ph), ("W", w, pw)):
            if extent % p:
                raise ValueError(f"latent axis {axis}={extent} not divisible by patch {p}")
        return t // pt, h // ph, w // pw

    def patchify(self, x: Tensor) -> Tensor:
        """(N, T, H, W, C) -> (N, L, D) tokens, t-major ordering."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        n = x.shape[0]
        gt, gh, gw = self._grid(x.shape)
        pt, ph, pw = self.patch
        c = self.latent_channels
        x = x.reshape(n, gt, pt, gh, ph, gw, pw, c)
        x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7).reshape(n, gt * gh * gw, pt * ph * pw * c)
        return self.patch_proj(x)

    def _unpatchify(self, tokens: Tensor, shape) -> Tensor:
        n, t, h, w, c = shape
        gt, gh, gw = self._grid(shape)
        pt, ph, pw = self.patch
        x = tokens.reshape(n, gt, gh, gw, pt, ph, pw, c)
        return x.transpose(0, 1, 4, 2, 5, 3, 6, 7).reshape(n, t, h, w, c)

    def _ctx_pos(self, ctx: CompressedContext, latent_hw) -> Tensor:
        """Position embeddings for compressed tokens, shared with the target.

        Each token's provenance places it at a history frame and spatial
        block; indexing the same temporal/spatial tables as target tokens
        makes position-addressed retrieval a matching problem rather than
        a correspondence the model must discover.  A per-encoder marker
        from the context table separates compressed streams from targets.
        """
        h_lat, w_lat = latent_hw
        _, ph, pw = self.patch
        gh, gw = h_lat // ph, w_lat // pw
        t_idx, s_idx, e_idx = [], [], []
        for enc_id, _chunk, t0, _t1, hi, wi in ctx.provenance:
            rate = ctx.rates[min(enc_id, len(ctx.rates) - 1)]
            t_idx.append(min(int(t0), self.max_frames - 1))
            hp = min(int(hi) * rate.r_h // ph, gh - 1)
            wp = min(int(wi) * rate.r_w // pw, gw - 1)
            s_idx.append(hp * gw + wp)
            e_idx.append(int(enc_id))
        return (
            self.temporal_emb(np.asarray(t_idx))
            + self.spatial_emb(np.asarray(s_idx))
            + self.ctx_emb(np.asarray(e_idx))
        )

    def _kernel_pos(self, hist_shape, kernel, latent_hw) -> Tensor:
        """Grid position embeddings for enlarged-patchifier history tokens."""
        t, h, w, _ = hist_shape
        kt, kh, kw = kernel
        h_lat, w_lat = latent_hw
        _, ph, pw = self.patch
        gh, gw = h_lat // ph, w_lat // pw
        t_idx, s_idx = [], []
        for ti in range(t // kt):
            for hi in range(h // kh):
                for wi in range(w // kw):
                    t_idx.append(min(ti * kt, self.max_frames - 1))
                    hp = min(hi * kh // ph, gh - 1)
                    wp = min(wi * kw // pw, gw - 1)
                    s_idx.append(hp * gw + wp)
        marker = self.ctx_emb(np.zeros(len(t_idx), dtype=np.int64))
        return self.temporal_emb(np.asarray(t_idx)) + self.spatial_emb(np.asarray(s_idx)) + marker

    def _target_pos(self, shape, frame_indices) -> Tensor:
        gt, gh, gw = self._grid(shape)
        pt = self.patch[0]
        if frame_indices is None:
            frame_indices = list(range(shape[1]))
        if len(frame_indices) != shape[1]:
            raise ValueError("need one global frame index per target frame")
        t_idx = np.repeat(np.asarray(frame_indices)[::pt], gh * gw)
        s_idx = np.tile(np.arange(gh * gw), gt)
        return self.temporal_emb(t_idx) + self.spatial_emb(s_idx)

    # -- forward -------------------------------------------------------------

    def predict_velocity(
        self,
        x_t,
        t,
        c,
        ctx: CompressedContext | None = None,
        frame_indices=None,
        window_latents=None,
        window_frame_indices=None,
        raw_history=None,
        encoder_penultimate: Tensor | None = None,
    ) -> Tensor:
        """Predict the flow velocity for the target clip.

        ``frame_indices`` give the global time position of each target
        frame (retrieval targets sit at their history indices).  The
        optional window latents enter uncompressed through the patchifier.
        """
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t))
        if x_t.ndim == 4:
            x_t = x_t.reshape((1,) + x_t.shape)
        n = x_t.shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        if np.any(t_arr <= 0) or np.any(t_arr > 1):
            raise ValueError("timestep must lie in (0, 1]")
        if encoder_penultimate is not None and not self.cross_attn:
            raise ValueError("cross-attention enhancement requires cross_attn=True at construction")

        segments = []
        c_idx = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
        segments.append(self.cond_emb(c_idx).reshape(n, 1, self.inner_dim))

        if self.hist_patch is not None and raw_history is not None:
            kernel, proj = self.hist_patch
            ctx_tokens = _kernel_patchify(raw_history, kernel, proj)
            hist_shape = np.asarray(raw_history).shape[-4:]
            segments.append(
                ctx_tokens + self._kernel_pos(hist_shape, kernel, (x_t.shape[2], x_t.shape[3]))
            )
        elif ctx is not None:
            ctx_tokens = ctx.tokens
            if ctx_tokens.ndim == 2:
                ctx_tokens = ctx_tokens.reshape((1,) + ctx_tokens.shape)
            if ctx_tokens.shape[0] == 1 and n > 1:
                ctx_tokens = concat([ctx_tokens] * n, axis=0)
            segments.append(ctx_tokens + self._ctx_pos(ctx, (x_t.shape[2], x_t.shape[3])))

        if window_latents is not None:
            win = window_latents if isinstance(window_latents, Tensor) else Tensor(np.asarray(window_latents))
            if win.ndim == 4:
                win = win.reshape((1,) + win.shape)
            win_tokens = self.patchify(win)
            segments.append(win_tokens + self._target_pos(win.shape, window_frame_indices))

        tgt_tokens = self.patchify(x_t) + self._target_pos(x_t.shape, frame_indices)
        segments.append(tgt_tokens)
        tokens = concat(segments, axis=1) if len(segments) > 1 else segments[0]

        temb = Tensor(nn.sinusoidal_embedding(t_arr, self.inner_dim))
        temb = self.t_fc2(self.t_fc1(temb).silu())
        tokens = tokens + temb.reshape(n, 1, self.inner_dim)

        for block in self.blocks:
            tokens = block(tokens, temb, encoder_penultimate)
        l_tgt = tgt_tokens.shape[1]
        out = self.ln_out(tokens[:, -l_tgt:])
        return self._unpatchify(self.out_proj(out), x_t.shape)

    # -- variants -------------------------------------------------------------

    def enable_lora(self, rank: int, rng, alpha=None) -> None:
        """Wrap every linear map with an adapter; bases freeze in place."""
        if self._lora:
            raise ValueError("LoRA already enabled")
        for holder, attr in self._linear_slots():
            holder.__dict__[attr] = nn.LoraLinear(holder.__dict__[attr], rank, rng, alpha)
        self._lora = True

    def _linear_slots(self):
        slots = [
            (self, "patch_proj"),
            (self, "t_fc1"),
            (self, "t_fc2"),
            (self, "out_proj"),
        ]
        for b in self.blocks:
            for attn in ([b.attn, b.cross] if b.cross is not None else [b.attn]):
                slots += [(attn, "wq"), (attn, "wk"), (attn, "wv"), (attn, "wo")]
            slots += [(b, "fc1"), (b, "fc2"), (b, "mod")]
        if self.hist_patch is not None:
            pass  # history patchifier stays fully trainable
        return slots

    def parameters(self):
        params = self.patch_proj.parameters() + self.cond_emb.parameters()
        params += self.t_fc1.parameters() + self.t_fc2.parameters()
        params += self.temporal_emb.parameters() + self.spatial_emb.parameters()
        params += self.ctx_emb.parameters()
        for b in self.blocks:
            for m in b.modules():
                params += m.parameters()
        params += self.ln_out.parameters() + self.out_proj.parameters()
        if self.hist_patch is not None:
            params += self.hist_patch[1].parameters()
        return params

    def named_parameters(self, prefix="dit"):
        out = {}
        for i, p in enumerate(self.parameters()):
            out[f"{prefix}.p{i:03d}"] = p
        return out


def _kernel_patchify(latents, kernel, proj: nn.Linear) -> Tensor:
    x = latents if isinstance(latents, Tensor) else Tensor(np.asarray(latents))
    if x.ndim == 4:
        x = x.reshape((1,) + x.shape)
    n, t, h, w, c = x.shape
    kt, kh, kw = kernel
    for axis, extent, k in (("T", t, kt), ("H", h, kh), ("W", w, kw)):
        if extent % k:
            raise ValueError(f"history axis {axis}={extent} not divisible by kernel {k}")
    x = x.reshape(n, t // kt, kt, h // kh, kh, w // kw, kw, c)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7).reshape(
        n, (t // kt) * (h // kh) * (w // kw), kt * kh * kw * c
    )
    return proj(x)


def large_patchifier_variant(model: DiTModel, kernel, reference_rate: CompressionRate, rng) -> DiTModel:
    """Route history through an enlarged patchify kernel instead of an encoder.

    The kernel volume must realize the same total reduction as the
    reference rate triple, keeping the token budget comparable.
    """
    kernel = tuple(int(k) for k in kernel)
    if int(np.prod(kernel)) != reference_rate.volume:
        raise ValueError(
            f"kernel {kernel} reduces by {int(np.prod(kernel))}, "
            f"reference rate {reference_rate} reduces by {reference_rate.volume}"
        )
    patch_in = int(np.prod(kernel)) * model.latent_channels
    model.hist_patch = (kernel, nn.Linear(patch_in, model.inner_dim, rng))
    return model
