import numpy as np
import pytest

from patchreg import autodiff as ad
from patchreg.autodiff import Tensor
from patchreg.errors import NonFiniteLoss, ShapeMismatch, TooFewPatches
from patchreg.losses import LossWeights, loss_contrast, loss_recon, loss_smooth, loss_total, ncc_map, ncc_mean
from patchreg.warp import warp_trilinear


def loop_ncc(x, y, window, eps):
    r = window // 2
    W, H, D = x.shape
    vals = np.zeros_like(x)
    for i in range(W):
        for j in range(H):
            for k in range(D):
                sl = (slice(max(i - r, 0), i + r + 1), slice(max(j - r, 0), j + r + 1), slice(max(k - r, 0), k + r + 1))
                a, b = x[sl], y[sl]
                da, db = a - a.mean(), b - b.mean()
                vals[i, j, k] = (da * db).sum() / np.sqrt((da * da).sum() * (db * db).sum() + eps)
    return vals


# -- ncc ---------------------------------------------------------------------------
def test_ncc_self_is_one(rng):
    x = rng.standard_normal((10, 10, 10))
    assert abs(float(ncc_mean(x, x).data) - 1.0) <= 1e-3


def test_ncc_affine_invariance(rng):
    x = rng.standard_normal((9, 9, 9))
    a = float(ncc_mean(x, x).data)
    b = float(ncc_mean(x, 2.5 * x + 0.7).data)
    assert abs(a - b) <= 1e-6


def test_ncc_matches_loop_oracle(rng):
    x = rng.standard_normal((3, 3, 3))
    y = rng.standard_normal((3, 3, 3))
    ref = loop_ncc(x, y, 3, 1e-5)
    np.testing.assert_allclose(ncc_map(x, y, 3, 1e-5).data, ref, rtol=0, atol=1e-12)
    assert abs(float(ncc_mean(x, y, 3, 1e-5).data) - ref.mean()) <= 1e-12


def test_ncc_oracle_larger_window(rng):
    x = rng.standard_normal((7, 6, 5))
    y = x + 0.3 * rng.standard_normal((7, 6, 5))
    np.testing.assert_allclose(ncc_map(x, y, 5, 1e-5).data, loop_ncc(x, y, 5, 1e-5), rtol=0, atol=1e-12)


def test_ncc_bounded(rng):
    x = rng.standard_normal((9, 9, 9))
    v = float(ncc_mean(x, -x).data)
    assert -1 - 1e-3 <= v <= -1 + 1e-3


def test_ncc_errors():
    with pytest.raises(ShapeMismatch):
        ncc_mean(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)), 3)
    with pytest.raises(ValueError):
        ncc_mean(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), 9)


def test_ncc_gradient(rng):
    assert ad.grad_check(lambda a, b: ncc_mean(a, b, 3), [rng.standard_normal((5, 5, 5)), rng.standard_normal((5, 5, 5))]) <= 1e-4


# -- reconstruction --------------------------------------------------------------------
def test_recon_identical_zero_fields(rng):
    x = rng.standard_normal((10, 10, 10))
    z = np.zeros((3, 10, 10, 10))
    assert abs(float(loss_recon(x, x, z, z).data) + 2.0) <= 2e-3


def test_recon_symmetry(rng):
    x, y = rng.standard_normal((2, 9, 9, 9))
    u, v = rng.uniform(-1, 1, (2, 3, 9, 9, 9))
    assert float(loss_recon(x, y, u, v).data) == pytest.approx(float(loss_recon(y, x, v, u).data), abs=1e-12)


def test_recon_decomposition(rng):
    x, y = rng.standard_normal((2, 9, 9, 9))
    u, v = rng.uniform(-1, 1, (2, 3, 9, 9, 9))
    fwd = float(ncc_mean(warp_trilinear(Tensor(x), Tensor(u)), y).data)
    bwd = float(ncc_mean(warp_trilinear(Tensor(y), Tensor(v)), x).data)
    assert abs(float(loss_recon(x, y, u, v).data) - (-fwd - bwd)) <= 1e-12


# -- smoothness -----------------------------------------------------------------------------
def test_smooth_constant_is_zero():
    z = np.full((3, 5, 5, 5), 2.5)
    assert float(loss_smooth(z, -z).data) == 0.0


def test_smooth_ramp_by_hand():
    W, H, D = 6, 4, 3
    u = np.zeros((3, W, H, D))
    u[0] = np.arange(W)[:, None, None]
    # only channel 0 along axis 0 varies: (W-1)*H*D unit steps
    expected = (W - 1) * H * D / (2 * 3 * W * H * D)
    assert float(loss_smooth(u, np.zeros_like(u)).data) == pytest.approx(expected, abs=1e-15)


def test_smooth_nonnegative_and_translation_invariant(rng):
    u, v = rng.standard_normal((2, 3, 5, 5, 5))
    base = float(loss_smooth(u, v).data)
    shift = np.array([1.0, -2.0, 0.5])[:, None, None, None]
    assert base >= 0
    assert float(loss_smooth(u + shift, v - shift).data) == pytest.approx(base, abs=1e-12)


def test_smooth_gradient(rng):
    assert ad.grad_check(loss_smooth, [rng.standard_normal((3, 4, 4, 4)), rng.standard_normal((3, 4, 4, 4))]) <= 1e-4


# -- contrastive -------------------------------------------------------------------------------
def test_contrast_identical_features_is_log_n():
    f = np.tile(np.linspace(-1, 1, 16), (8, 1))
    assert abs(float(loss_contrast(f, f).data) - np.log(8)) <= 1e-6
    assert float(np.log(8)) == pytest.approx(2.0794415, abs=1e-7)


def test_contrast_orthogonal_negatives():
    # positive similarity 1, the 7 negatives 0: -log(e / (e + 7))
    f = np.eye(8)
    expected = -np.log(np.e / (np.e + 7))
    assert abs(float(loss_contrast(f, f, 1.0).data) - expected) <= 1e-6
    assert expected == pytest.approx(1.2740088, abs=1e-7)


def test_contrast_temperature_scaling():
    f = np.eye(4)
    tau = 0.5
    expected = -np.log(np.exp(1 / tau) / (np.exp(1 / tau) + 3))
    assert float(loss_contrast(f, f, tau).data) == pytest.approx(expected, abs=1e-12)


def test_contrast_rotation_invariant(rng):
    fx, fy = rng.standard_normal((2, 8, 6))
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    a = float(loss_contrast(fx, fy).data)
    b = float(loss_contrast(fx @ q, fy @ q).data)
    assert abs(a - b) <= 1e-6


def test_contrast_scale_invariant(rng):
    fx, fy = rng.standard_normal((2, 8, 6))
    assert float(loss_contrast(fx, fy).data) == pytest.approx(float(loss_contrast(3 * fx, 0.5 * fy).data), abs=1e-12)


def test_contrast_matches_direct_formula(rng):
    fx, fy = rng.standard_normal((2, 5, 4))
    u = fx / np.linalg.norm(fx, axis=1, keepdims=True)
    v = fy / np.linalg.norm(fy, axis=1, keepdims=True)
    s = u @ v.T
    n = 5
    x_to_y = sum(-np.log(np.exp(s[i, i]) / np.exp(s[i]).sum()) for i in range(n))
    y_to_x = sum(-np.log(np.exp(s[i, i]) / np.exp(s[:, i]).sum()) for i in range(n))
    assert float(loss_contrast(fx, fy).data) == pytest.approx((x_to_y + y_to_x) / (2 * n), abs=1e-12)


def test_contrast_gradient_and_errors(rng):
    fx, fy = rng.standard_normal((2, 8, 5))
    fx /= np.linalg.norm(fx, axis=1, keepdims=True)
    fy /= np.linalg.norm(fy, axis=1, keepdims=True)
    assert ad.grad_check(loss_contrast, [fx, fy]) <= 1e-4
    with pytest.raises(TooFewPatches):
        loss_contrast(np.ones((1, 3)), np.ones((1, 3)))
    with pytest.raises(ShapeMismatch):
        loss_contrast(np.ones((3, 3)), np.ones((4, 3)))


def test_contrast_nonnegative(rng):
    for _ in range(20):
        fx, fy = rng.standard_normal((2, 6, 3))
        assert float(loss_contrast(fx, fy).data) >= 0


# -- total --------------------------------------------------------------------------------------
def _parts():
    return Tensor(np.array(-1.5)), Tensor(np.array(0.25)), Tensor(np.array(2.0))


def test_total_recon_only():
    r, s, c = _parts()
    assert float(loss_total(r, s, c, LossWeights(lambda_smooth=0, lambda_contrast=0)).data) == -1.5


def test_total_linear_in_weights():
    r, s, c = _parts()
    vals = [float(loss_total(r, s, c, LossWeights(lambda_smooth=ls, lambda_contrast=0.3)).data) for ls in (0.0, 1.0, 2.0)]
    assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0]) == pytest.approx(0.25)
    assert float(loss_total(r, s, c, LossWeights()).data) == pytest.approx(-1.5 + 0.25 + 0.2)


def test_total_rejects_non_finite():
    r, s, _ = _parts()
    with pytest.raises(NonFiniteLoss):
        loss_total(r, s, Tensor(np.array(np.nan)), LossWeights())


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(tau=0)
    with pytest.raises(ValueError):
        LossWeights(ncc_window=4)
