"""Spatial transformer: resample a volume at displaced positions.

A field ``u`` of shape ``[3, w, h, d]`` is a displacement in voxel units: the
output at voxel ``p`` samples the input at ``p + u(p)``. Sample positions are
clamped into the volume before interpolation.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, make_node
from .errors import ShapeMismatch
from .volume_io import DeformationField, LabelVolume, ScalarVolume, VolumeHeader


def _check(vol_shape, field_shape):
    if len(vol_shape) != 3 or tuple(field_shape) != (3, *vol_shape):
        raise ShapeMismatch(f"volume {tuple(vol_shape)} and field {tuple(field_shape)} do not agree")


def _cells(field: np.ndarray, dims):
    """Lower cell corner, fractional offset and in-domain mask per axis."""
    out = []
    for axis, n in enumerate(dims):
        shape = [1, 1, 1]
        shape[axis] = n
        base = np.arange(n, dtype=field.dtype).reshape(shape)
        pos = base + field[axis]
        inside = (pos >= 0) & (pos <= n - 1)
        pos = np.clip(pos, 0, n - 1)
        # NaN positions index cell 0 but keep NaN weights, so the loss sees them
        lo = np.minimum(np.floor(np.nan_to_num(pos)), n - 2).astype(np.intp)
        out.append((lo, pos - lo, inside))
    return out


def warp_trilinear(vol, field):
    """Trilinear pull-back warp, differentiable in both arguments.

    Accepts tensors (returns a tensor) or ``ScalarVolume``/``DeformationField``
    containers (returns a ``ScalarVolume``).
    """
    if isinstance(vol, ScalarVolume):
        arr = warp_trilinear_array(vol.data, field.data if isinstance(field, DeformationField) else field)
        return ScalarVolume(VolumeHeader(**vol.header.to_dict()), arr.astype(np.float32))
    if vol.dtype != field.dtype:
        raise TypeError(f"mixed element types {vol.dtype} and {field.dtype}")
    _check(vol.shape, field.shape)
    W, H, D = vol.shape
    (i0, tx, inx), (j0, ty, iny), (k0, tz, inz) = _cells(field.data, (W, H, D))
    flat = vol.data.reshape(-1)
    one = vol.dtype.type(1)
    corners = []
    out = np.zeros(vol.shape, dtype=vol.dtype)
    for a in (0, 1):
        wa = tx if a else one - tx
        for b in (0, 1):
            wb = ty if b else one - ty
            for c in (0, 1):
                wc = tz if c else one - tz
                idx = ((i0 + a) * H + (j0 + b)) * D + (k0 + c)
                val = flat[idx]
                out += val * (wa * wb * wc)
                corners.append((a, b, c, idx, val))

    def vjp(g):
        gvol = gfield = None
        if vol.requires_grad:
            gflat = np.zeros(W * H * D, dtype=np.float64)
            for a, b, c, idx, _ in corners:
                wa = tx if a else one - tx
                wb = ty if b else one - ty
                wc = tz if c else one - tz
                gflat += np.bincount(idx.ravel(), weights=(g * wa * wb * wc).ravel(), minlength=W * H * D)
            gvol = gflat.astype(vol.dtype).reshape(vol.shape)
        if field.requires_grad:
            dx = np.zeros(vol.shape, dtype=vol.dtype)
            dy = np.zeros_like(dx)
            dz = np.zeros_like(dx)
            for a, b, c, _, val in corners:
                wa = tx if a else one - tx
                wb = ty if b else one - ty
                wc = tz if c else one - tz
                sa = one if a else -one
                sb = one if b else -one
                sc = one if c else -one
                dx += val * (sa * wb * wc)
                dy += val * (wa * sb * wc)
                dz += val * (wa * wb * sc)
            gfield = np.stack([g * dx * inx, g * dy * iny, g * dz * inz])
        return gvol, gfield

    return make_node(out, (vol, field), vjp)


def warp_trilinear_array(vol: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Plain-array trilinear warp (no recording)."""
    dtype = np.result_type(vol.dtype, field.dtype, np.float32)
    return warp_trilinear(Tensor(vol, dtype=dtype), Tensor(field, dtype=dtype)).data


def warp_labels_nn(labels, field):
    """Nearest-neighbour warp of a label map.

    Sample positions are clamped, then rounded half away from zero, so label
    ids are copied and never interpolated.
    """
    if isinstance(labels, LabelVolume):
        out = warp_labels_nn(labels.data, field.data if isinstance(field, DeformationField) else field)
        return LabelVolume(VolumeHeader(**labels.header.to_dict()), out)
    labels = np.asarray(labels)
    field = np.asarray(field, dtype=np.float64)
    _check(labels.shape, field.shape)
    idx = []
    for axis, n in enumerate(labels.shape):
        shape = [1, 1, 1]
        shape[axis] = n
        pos = np.clip(np.arange(n, dtype=np.float64).reshape(shape) + field[axis], 0, n - 1)
        idx.append(np.floor(np.nan_to_num(pos) + 0.5).astype(np.intp))
    return labels[idx[0], idx[1], idx[2]]
