"""Training objectives: local NCC, diffusion smoothness and patch contrast."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NonFiniteLoss, ShapeMismatch, TooFewPatches
from .volume_io import DeformationField, ScalarVolume
from .warp import warp_trilinear


@dataclass
class LossWeights:
    lambda_smooth: float = 1.0
    lambda_contrast: float = 0.1
    tau: float = 1.0
    ncc_window: int = 9
    ncc_eps: float = 1e-5

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.ncc_window < 3 or self.ncc_window % 2 != 1:
            raise ValueError("ncc_window must be odd and >= 3")


def _tensor(v) -> Tensor:
    if isinstance(v, Tensor):
        return v
    if isinstance(v, (ScalarVolume, DeformationField)):
        v = v.data
    return Tensor(np.asarray(v))


def ncc_map(x, y, window: int = 9, eps: float = 1e-5) -> Tensor:
    """Per-voxel normalised cross-correlation over clipped centred windows."""
    x, y = _tensor(x), _tensor(y)
    if x.shape != y.shape:
        raise ShapeMismatch(f"ncc inputs differ: {x.shape} vs {y.shape}")
    if window > min(x.shape):
        raise ValueError(f"window {window} larger than volume {x.shape}")
    inv_count = Tensor(1.0 / ad.box_count3d(x.shape, window, x.dtype))
    sx = ad.box_sum3d(x, window)
    sy = ad.box_sum3d(y, window)
    sxx = ad.box_sum3d(x * x, window)
    syy = ad.box_sum3d(y * y, window)
    sxy = ad.box_sum3d(x * y, window)
    cross = sxy - sx * sy * inv_count
    # cancellation can leave tiny negative variances in low precision
    var_x = ad.clamp_min(sxx - sx * sx * inv_count, 0.0)
    var_y = ad.clamp_min(syy - sy * sy * inv_count, 0.0)
    return ad.div(cross, ad.sqrt(var_x * var_y + eps))


def ncc_mean(x, y, window: int = 9, eps: float = 1e-5) -> Tensor:
    """Local NCC averaged over the volume; 1 means perfectly correlated."""
    return ncc_map(x, y, window, eps).mean()


def loss_recon(x, y, z_xy, z_yx, window: int = 9, eps: float = 1e-5) -> Tensor:
    x, y, z_xy, z_yx = _tensor(x), _tensor(y), _tensor(z_xy), _tensor(z_yx)
    fwd = ncc_mean(warp_trilinear(x, z_xy), y, window, eps)
    bwd = ncc_mean(warp_trilinear(y, z_yx), x, window, eps)
    return -(fwd + bwd)


def _sum_sq_grad(u: Tensor) -> Tensor:
    dx = u[:, 1:, :, :] - u[:, :-1, :, :]
    dy = u[:, :, 1:, :] - u[:, :, :-1, :]
    dz = u[:, :, :, 1:] - u[:, :, :, :-1]
    return ad.square(dx).sum() + ad.square(dy).sum() + ad.square(dz).sum()


def loss_smooth(z_xy, z_yx) -> Tensor:
    """Mean squared forward difference over voxels, channels and both fields."""
    z_xy, z_yx = _tensor(z_xy), _tensor(z_yx)
    if z_xy.shape != z_yx.shape or z_xy.ndim != 4:
        raise ShapeMismatch(f"fields must share a [c,w,h,d] shape: {z_xy.shape} vs {z_yx.shape}")
    total = _sum_sq_grad(z_xy) + _sum_sq_grad(z_yx)
    return ad.scale(total, 1.0 / (2 * z_xy.size))


def loss_contrast(f_x, f_y, tau: float = 1.0) -> Tensor:
    """Symmetric patchwise InfoNCE with cosine similarity.

    Row ``i`` of ``f_x`` and ``f_y`` come from the same patch position (the
    positive pair); every other row is a negative. The softmax denominator
    runs over all patches, positive included.
    """
    f_x, f_y = _tensor(f_x), _tensor(f_y)
    if f_x.shape != f_y.shape or f_x.ndim != 2:
        raise ShapeMismatch(f"feature batches differ: {f_x.shape} vs {f_y.shape}")
    n = f_x.shape[0]
    if n < 2:
        raise TooFewPatches(f"need at least 2 patches, got {n}")
    u = ad.l2_normalize(f_x, axis=-1)
    v = ad.l2_normalize(f_y, axis=-1)
    logits = ad.scale(u @ v.T, 1.0 / tau)
    eye = Tensor(np.eye(n, dtype=logits.dtype))
    positive = (logits * eye).sum(axis=1)
    x_to_y = ad.logsumexp(logits, axis=-1) - positive
    y_to_x = ad.logsumexp(logits.T, axis=-1) - positive
    return ad.scale(x_to_y.sum() + y_to_x.sum(), 1.0 / (2 * n))


def loss_total(recon: Tensor, smooth: Tensor, contrast: Tensor, weights: LossWeights) -> Tensor:
    for name, term in (("recon", recon), ("smooth", smooth), ("contrast", contrast)):
        if not np.all(np.isfinite(term.data)):
            raise NonFiniteLoss(f"{name} loss is not finite")
    out = recon
    if weights.lambda_smooth:
        out = out + ad.scale(smooth, weights.lambda_smooth)
    if weights.lambda_contrast:
        out = out + ad.scale(contrast, weights.lambda_contrast)
    return out
