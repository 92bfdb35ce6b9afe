"""Compression encoder: rates, variants, provenance, and streaming equality."""

import numpy as np
import pytest

from memctx import seeding
from memctx.compressor import (
    CompressedContext,
    CompressionRate,
    EncoderModel,
    combine_contexts,
)
from memctx.tensor import no_grad


def _history(seed, t=24, h=8, w=8, c=4, batch=None):
    rng = np.random.default_rng(seed)
    shape = (t, h, w, c) if batch is None else (batch, t, h, w, c)
    return rng.normal(size=shape).astype(np.float32)


def _encoder(rate, variant="dual", seed=0, **kw):
    return EncoderModel(CompressionRate(*rate), seeding.stream(seed, 0xE6C), variant=variant, **kw)


# -- rate type ------------------------------------------------------------------


def test_rate_validation():
    with pytest.raises(ValueError):
        CompressionRate(0, 1, 1)
    with pytest.raises(ValueError, match="power of two"):
        CompressionRate(3, 2, 1)
    with pytest.raises(ValueError, match="power of two"):
        CompressionRate(2, 6, 1)


def test_rate_volume_and_str():
    r = CompressionRate(4, 4, 2)
    assert r.volume == 32
    assert str(r) == "4x4x2"
    assert CompressionRate(1, 1, 3).volume == 3  # odd temporal rates allowed


# -- geometry and token counts -----------------------------------------------------


@pytest.mark.parametrize("rate", [(1, 1, 1), (2, 2, 1), (2, 2, 2), (4, 4, 2)])
def test_token_count_matches_emitted(rate):
    enc = _encoder(rate)
    hist = _history(1)
    with no_grad():
        ctx = enc.compress(hist)
    expected = (24 // rate[2]) * (8 // rate[0]) * (8 // rate[1])
    assert ctx.length == expected == enc.token_count(24, 8, 8)
    assert len(ctx.provenance) == ctx.length
    assert ctx.span_frames == 24
    assert ctx.rates == (CompressionRate(*rate),)


def test_geometry_errors():
    enc = _encoder((4, 4, 2))
    with pytest.raises(ValueError, match="T"):
        enc.compress(_history(0, t=20))  # not divisible by chunk length 8
    with pytest.raises(ValueError, match="H"):
        enc.compress(_history(0, h=6))
    with pytest.raises(ValueError, match="channels"):
        enc.compress(_history(0, c=3))
    with pytest.raises(ValueError, match="chunk length"):
        EncoderModel(CompressionRate(1, 1, 3), seeding.stream(0, 1), chunk_len=8)


def test_batched_matches_single():
    enc = _encoder((4, 4, 2))
    hist = _history(2)
    with no_grad():
        single = enc.compress(hist).tokens.numpy()
        stacked = enc.compress(np.stack([hist, hist])).tokens.numpy()
    assert np.allclose(stacked[0], single[0], atol=1e-6)
    assert np.allclose(stacked[1], single[0], atol=1e-6)


# -- variants -------------------------------------------------------------------


def test_dual_is_sum_of_branches():
    """The dual tokens decompose exactly into the two branch outputs."""
    enc = _encoder((4, 4, 2), variant="dual")
    hist = _history(3)
    with no_grad():
        dual = enc.compress(hist).tokens.numpy()
        enc.variant = "only_lr"
        lr = enc.compress(hist).tokens.numpy()
        enc.variant = "without_lr"
        hr = enc.compress(hist).tokens.numpy()
    assert np.allclose(dual, lr + hr, atol=1e-5)


def test_variant_validation():
    with pytest.raises(ValueError, match="variant"):
        _encoder((2, 2, 1), variant="both")


# -- provenance -----------------------------------------------------------------


def test_provenance_partitions_history():
    enc = _encoder((4, 4, 2))
    with no_grad():
        ctx = enc.compress(_history(4))
    covered = set()
    for enc_id, chunk, t0, t1, hi, wi in ctx.provenance:
        assert enc_id == 0
        assert t1 - t0 == 2
        assert 0 <= hi < 2 and 0 <= wi < 2
        assert chunk == t0 // 8
        covered.update(range(t0, t1))
    assert covered == set(range(24))
    # every (band, block) cell appears exactly once
    cells = [(t0, hi, wi) for _, _, t0, _, hi, wi in ctx.provenance]
    assert len(cells) == len(set(cells))


# -- streaming ------------------------------------------------------------------


def test_streaming_equals_batch():
    """Chunkwise appends reproduce whole-history compression exactly."""
    enc = _encoder((4, 4, 2))
    hist = _history(5)
    with no_grad():
        batch_ctx = enc.compress(hist)
        stream_ctx = None
        for ci in range(3):
            stream_ctx = enc.compress_streaming(stream_ctx, hist[ci * 8 : (ci + 1) * 8])
    assert stream_ctx.span_frames == batch_ctx.span_frames
    assert stream_ctx.provenance == batch_ctx.provenance
    diff = np.abs(stream_ctx.tokens.numpy() - batch_ctx.tokens.numpy()).max()
    assert diff < 1e-6


def test_streaming_validation():
    enc = _encoder((2, 2, 2))
    with pytest.raises(ValueError, match="frames"):
        enc.compress_streaming(None, _history(0, t=4))
    with no_grad():
        ctx = enc.compress_streaming(None, _history(0, t=8))
    bad = CompressedContext(ctx.tokens, ctx.provenance, ctx.rates, span_frames=5)
    with pytest.raises(ValueError, match="chunk-aligned"):
        enc.compress_streaming(bad, _history(0, t=8))


# -- multi-encoder combination ------------------------------------------------------


def test_combine_contexts():
    hist = _history(6)
    enc_a = _encoder((4, 4, 2), seed=0)
    enc_b = EncoderModel(
        CompressionRate(2, 2, 2), seeding.stream(1, 0xE6C), encoder_id=1
    )
    with no_grad():
        ca, cb = enc_a.compress(hist), enc_b.compress(hist)
        combined = combine_contexts([ca, cb])
    assert combined.length == ca.length + cb.length
    assert combined.rates == ca.rates + cb.rates
    assert {r[0] for r in combined.provenance} == {0, 1}


def test_combine_validation():
    with pytest.raises(ValueError):
        combine_contexts([])
    enc = _encoder((4, 4, 2))
    with no_grad():
        c24 = enc.compress(_history(0, t=24))
        c8 = enc.compress(_history(0, t=8))
    with pytest.raises(ValueError, match="span"):
        combine_contexts([c24, c8])


# -- differentiability ----------------------------------------------------------------


def test_tokens_carry_gradients():
    enc = _encoder((4, 4, 2))
    ctx = enc.compress(_history(7))
    assert ctx.tokens.requires_grad
    from memctx.tensor import backward

    backward(ctx.tokens.square().mean())
    grads = [p.grad for p in enc.parameters()]
    assert any(g is not None and np.abs(g).sum() > 0 for g in grads)
