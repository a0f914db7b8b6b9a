import numpy as np
import pytest

from patchreg import autodiff as ad
from patchreg.autodiff import Tensor
from patchreg.errors import DimsNotDivisible, ShapeMismatch
from patchreg.patching import from_windows, to_windows
from patchreg.stitcher import (
    StitchConfig,
    attention_weights,
    count_attention_madds,
    detokenize,
    init_attention_params,
    relative_position_index,
    seam_discontinuity,
    stitch_fields,
    tokenize,
    wmsa,
)


def _block(rng, E, m, heads, scale=0.5, prefix="blk"):
    p = {f"{prefix}.{n}": Tensor(rng.standard_normal((E, E)) * scale) for n in ("q", "k", "v", "o")}
    p[f"{prefix}.rel_bias"] = Tensor(rng.standard_normal(((2 * m - 1) ** 3, heads)))
    return p


# -- tokens ----------------------------------------------------------------------------------
def test_tokenize_shape_and_roundtrip(rng):
    p = rng.standard_normal((3, 8, 8, 8))
    t = tokenize(p, 4)
    assert t.shape == (64, 24)
    assert np.array_equal(detokenize(t, 4), p)


def test_tokenize_single_region(rng):
    p = rng.standard_normal((3, 4, 4, 4))
    t = tokenize(p, 1)
    assert t.shape == (1, 192)
    assert np.array_equal(t[0], p.ravel())


def test_token_order_and_content(rng):
    m, s = 2, 3
    p = rng.standard_normal((3, m * s, m * s, m * s))
    t = tokenize(p, m)
    for rz in range(m):
        for ry in range(m):
            for rx in range(m):
                region = p[:, rx * s : (rx + 1) * s, ry * s : (ry + 1) * s, rz * s : (rz + 1) * s]
                assert np.array_equal(t[(rz * m + ry) * m + rx], region.ravel())


def test_tokenize_batched_and_tensor(rng):
    p = rng.standard_normal((5, 3, 4, 4, 4))
    assert np.array_equal(tokenize(Tensor(p), 2).data, tokenize(p, 2))
    assert np.array_equal(tokenize(p, 2)[3], tokenize(p[3], 2))


def test_tokenize_requires_divisible():
    with pytest.raises(DimsNotDivisible):
        tokenize(np.zeros((3, 6, 6, 6)), 4)


def test_relative_position_index():
    idx = relative_position_index(2)
    assert idx.shape == (8, 8)
    assert np.all(np.diag(idx) == 13)  # (1*3 + 1)*3 + 1, the zero offset
    assert idx.min() >= 0 and idx.max() < 27
    assert idx[0, 7] == 0 and idx[7, 0] == 26


# -- attention ------------------------------------------------------------------------------
def test_wmsa_zero_output_projection_is_identity(rng):
    params = init_attention_params(24, 2, 4, rng, np.float64, "wmsa")
    tokens = rng.standard_normal((3, 8, 24))
    assert np.array_equal(wmsa(Tensor(tokens), params, 4, "wmsa", 2).data, tokens)


def test_wmsa_single_token(rng):
    E = 6
    p = _block(rng, E, 1, 2)
    tok = rng.standard_normal((1, E))
    out = wmsa(Tensor(tok), p, 2, "blk", 1).data
    expected = tok + (tok @ p["blk.v"].data) @ p["blk.o"].data
    np.testing.assert_allclose(out, expected, atol=1e-12)
    attn, _ = attention_weights(Tensor(tok[None]), p, "blk", 2, 1)
    assert np.all(attn.data == 1.0)


def test_wmsa_two_tokens_hand_oracle():
    tokens = np.eye(2)
    v = np.array([[1.0, 2.0], [3.0, 4.0]])
    params = {"h.q": Tensor(np.eye(2)), "h.k": Tensor(np.eye(2)), "h.v": Tensor(v), "h.o": Tensor(np.eye(2))}
    out = wmsa(Tensor(tokens), params, 1, "h").data
    # scores = I / sqrt(2): each token prefers itself with weight e^a / (e^a + 1)
    a = 1 / np.sqrt(2)
    p_self = np.exp(a) / (np.exp(a) + 1)
    weights = np.array([[p_self, 1 - p_self], [1 - p_self, p_self]])
    attn, _ = attention_weights(Tensor(tokens[None]), params, "h", 1, None)
    np.testing.assert_allclose(attn.data[0, 0], weights, atol=1e-10)
    np.testing.assert_allclose(out, tokens + weights @ v, atol=1e-10)


def test_attention_rows_sum_to_one(rng):
    p = _block(rng, 12, 2, 3, scale=2.0)
    attn, _ = attention_weights(Tensor(rng.standard_normal((4, 8, 12)) * 3), p, "blk", 3, 2)
    assert attn.shape == (4, 3, 8, 8)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)


def test_relative_bias_shifts_scores(rng):
    p = _block(rng, 6, 2, 1)
    p["blk.q"] = Tensor(np.zeros((6, 6)))
    attn, _ = attention_weights(Tensor(rng.standard_normal((1, 8, 6))), p, "blk", 1, 2)
    bias = p["blk.rel_bias"].data[relative_position_index(2), 0]
    expected = np.exp(bias) / np.exp(bias).sum(axis=-1, keepdims=True)
    np.testing.assert_allclose(attn.data[0, 0], expected, atol=1e-12)


def test_wmsa_gradient(rng):
    E, m, heads = 6, 2, 2
    names = ("q", "k", "v", "o")
    r = rng.standard_normal((8, E))

    def f(tok, q, k, v, o, b):
        params = dict(zip((f"x.{n}" for n in names), (q, k, v, o)))
        params["x.rel_bias"] = b
        return (wmsa(tok, params, heads, "x", m) * Tensor(r)).sum()

    point = [rng.standard_normal((8, E))] + [rng.standard_normal((E, E)) * 0.5 for _ in names] + [rng.standard_normal((27, heads))]
    assert ad.grad_check(f, point) <= 1e-4


def test_wmsa_shape_errors(rng):
    p = _block(rng, 6, 2, 4)
    with pytest.raises(ShapeMismatch):
        wmsa(Tensor(rng.standard_normal((7, 6))), p, 2, "blk")
    with pytest.raises(ShapeMismatch):
        wmsa(Tensor(rng.standard_normal((8, 6))), p, 4, "blk")


def test_init_params_zero_output_and_bias(rng):
    p = init_attention_params(24, 4, 4, rng, np.float32, "wmsa")
    assert not p["wmsa.o"].data.any() and not p["wmsa.rel_bias"].data.any()
    assert p["wmsa.rel_bias"].shape == (343, 4)
    assert all(t.dtype == np.float32 for t in p.values())


# -- stitching ----------------------------------------------------------------------------------
def _stitch_params(rng, E, m, heads, zero_out=True):
    p = {}
    for block in ("wmsa", "swmsa"):
        p.update(init_attention_params(E, m, heads, rng, np.float64, block))
        if not zero_out:
            p[f"{block}.o"] = Tensor(rng.standard_normal((E, E)) * 0.1)
    return p


def test_stitch_identity_at_init(rng):
    cfg = StitchConfig(m=4, heads=4)
    windows = rng.standard_normal((8, 3, 8, 8, 8))
    params = _stitch_params(rng, cfg.token_dim((8, 8, 8)), 4, 4)
    out = stitch_fields(Tensor(windows), params, cfg, 2)
    assert out.shape == (3, 16, 16, 16)
    assert np.array_equal(out.data, from_windows(windows, 2))
    listed = stitch_fields([Tensor(w) for w in windows], params, cfg, 2)
    assert np.array_equal(listed.data, out.data)


def test_stitch_mixes_across_windows(rng):
    """After training the shifted block lets one window's content reach another."""
    cfg = StitchConfig(m=2, heads=1)
    E = cfg.token_dim((4, 4, 4))
    params = _stitch_params(rng, E, 2, 1, zero_out=False)
    base = rng.standard_normal((8, 3, 4, 4, 4))
    bumped = base.copy()
    bumped[0, :, 3, 3, 3] += 1.0  # corner voxel of window 0
    a = stitch_fields(Tensor(base), params, cfg, 2).data
    b = stitch_fields(Tensor(bumped), params, cfg, 2).data
    changed = to_windows(np.abs(a - b).sum(axis=0), 2).reshape(8, -1).max(axis=1) > 0
    assert changed[0] and changed[1:].any()


def test_stitch_gradient(rng):
    cfg = StitchConfig(m=2, heads=1)
    E = cfg.token_dim((2, 2, 2))
    params = _stitch_params(rng, E, 2, 1, zero_out=False)
    r = rng.standard_normal((3, 4, 4, 4))
    assert ad.grad_check(lambda w: (stitch_fields(w, params, cfg, 2) * Tensor(r)).sum(), rng.standard_normal((8, 3, 2, 2, 2))) <= 1e-4


def test_token_dim_rules():
    assert StitchConfig(4, 4).token_dim((8, 8, 8)) == 24
    assert StitchConfig(4, 4).token_dim((16, 16, 16)) == 192
    with pytest.raises(ValueError):
        StitchConfig(4, 5).token_dim((8, 8, 8))
    with pytest.raises(DimsNotDivisible):
        StitchConfig(4, 4).region_side((8, 8, 4))


# -- complexity counter --------------------------------------------------------------------------------
def test_madds_unit_volume():
    assert count_attention_madds((1, 1, 1), mode="full_msa") == 42
    assert count_attention_madds((1, 1, 1), m=4, mode="w_msa") == 4 * 9 + 2 * 64 * 3


@pytest.mark.parametrize("side", [8, 16, 32])
def test_madds_scaling(side):
    small, big = (side,) * 3, (2 * side,) * 3
    assert count_attention_madds(big, mode="w_msa") / count_attention_madds(small, mode="w_msa") == 8.0
    full = count_attention_madds(big, mode="full_msa") / count_attention_madds(small, mode="full_msa")
    assert full >= 32 if side >= 16 else full > 8
    assert full < 64


def test_madds_full_ratio_tends_to_64():
    r = count_attention_madds((128,) * 3, mode="full_msa") / count_attention_madds((64,) * 3, mode="full_msa")
    assert r == pytest.approx(64, rel=1e-4)


def test_madds_unknown_mode():
    with pytest.raises(ValueError):
        count_attention_madds((2, 2, 2), mode="global")


# -- seam metric ---------------------------------------------------------------------------------------
def test_seam_metric_blocky_vs_smooth():
    blocky = from_windows(np.stack([np.full((3, 4, 4, 4), float(p)) for p in range(8)]), 2)
    assert seam_discontinuity(blocky, 2) > 0
    ramp = np.broadcast_to(np.arange(8.0)[None, :, None, None], (3, 8, 8, 8))
    assert seam_discontinuity(ramp, 2) == pytest.approx(0.0, abs=1e-12)


def test_seam_metric_value_by_hand():
    f = np.zeros((3, 4, 4, 4))
    f[0, 2:] = 1.0  # one unit step exactly at the boundary between patches along axis 0
    # across: 3 axes x 3 channels x 16 boundary diffs each; only channel 0, axis 0 is non-zero
    across = 16 / (3 * 3 * 16)
    assert seam_discontinuity(f, 2) == pytest.approx(across - 0.0)
