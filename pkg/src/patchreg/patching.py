"""Non-overlapping patch grids and cyclic shifts.

Patches are ordered lexicographically with ``x`` fastest: the patch at grid
position ``(ix, iy, iz)`` has index ``iz*n*n + iy*n + ix``. Every function here
works on plain arrays and on autodiff tensors alike; inputs are either
single-channel ``[w, h, d]`` or multi-channel ``[c, w, h, d]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import DimsNotDivisible, ShapeMismatch, WrongPatchCount


@dataclass(frozen=True)
class PatchGrid:
    n: int
    dims: tuple[int, int, int]

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if any(d % self.n for d in self.dims):
            raise DimsNotDivisible(f"dims {self.dims} not divisible by n={self.n}")

    @property
    def patch_dims(self) -> tuple[int, int, int]:
        return tuple(d // self.n for d in self.dims)

    @property
    def count(self) -> int:
        return self.n**3

    def index(self, ix: int, iy: int, iz: int) -> int:
        return (iz * self.n + iy) * self.n + ix

    def position(self, p: int) -> tuple[int, int, int]:
        iz, rem = divmod(p, self.n * self.n)
        iy, ix = divmod(rem, self.n)
        return ix, iy, iz

    def origin(self, p: int) -> tuple[int, int, int]:
        return tuple(i * s for i, s in zip(self.position(p), self.patch_dims))


@dataclass(frozen=True)
class WindowLayout:
    m: int
    patch_dims: tuple[int, int, int]

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if any(d % self.m for d in self.patch_dims):
            raise DimsNotDivisible(f"patch dims {self.patch_dims} not divisible by m={self.m}")

    @property
    def region_dims(self) -> tuple[int, int, int]:
        return tuple(d // self.m for d in self.patch_dims)


def _spatial(v):
    if v.ndim not in (3, 4):
        raise ShapeMismatch(f"expected [w,h,d] or [c,w,h,d], got shape {v.shape}")
    return tuple(v.shape[-3:])


def to_windows(v, n: int):
    """Partition into a stacked ``[n**3, (c,) pw, ph, pd]`` array in patch order."""
    W, H, D = _spatial(v)
    if n < 1 or W % n or H % n or D % n:
        raise DimsNotDivisible(f"dims {(W, H, D)} not divisible by n={n}")
    has_c = v.ndim == 4
    C = v.shape[0] if has_c else 1
    pw, ph, pd = W // n, H // n, D // n
    x = v.reshape(C, n, pw, n, ph, n, pd)
    x = x.transpose(5, 3, 1, 0, 2, 4, 6)
    return x.reshape(n**3, C, pw, ph, pd) if has_c else x.reshape(n**3, pw, ph, pd)


def from_windows(w, n: int):
    """Inverse of :func:`to_windows`."""
    if w.shape[0] != n**3:
        raise WrongPatchCount(f"expected {n**3} patches, got {w.shape[0]}")
    has_c = w.ndim == 5
    C = w.shape[1] if has_c else 1
    pw, ph, pd = w.shape[-3:]
    x = w.reshape(n, n, n, C, pw, ph, pd)
    x = x.transpose(3, 2, 4, 1, 5, 0, 6)
    full = x.reshape(C, n * pw, n * ph, n * pd)
    return full if has_c else full.reshape(n * pw, n * ph, n * pd)


def partition(v, n: int) -> list:
    """Split into the ordered list of ``n**3`` patches."""
    stacked = to_windows(v, n)
    return [stacked[p] for p in range(n**3)]


def stitch(patches: Sequence, n: int):
    """Reassemble patches produced by :func:`partition`."""
    patches = list(patches)
    if len(patches) != n**3:
        raise WrongPatchCount(f"expected {n**3} patches, got {len(patches)}")
    if len({tuple(p.shape) for p in patches}) != 1:
        raise ShapeMismatch("patches differ in shape")
    if isinstance(patches[0], ad.Tensor):
        stacked = ad.stack(patches)
    else:
        stacked = np.stack(patches)
    return from_windows(stacked, n)


def cyclic_shift(v, offsets: Sequence[int]):
    """``out(i, j, k) = in((i + ow) mod w, (j + oh) mod h, (k + od) mod d)``."""
    _spatial(v)
    shifts = tuple(-int(o) for o in offsets)
    axes = (-3, -2, -1)
    if isinstance(v, ad.Tensor):
        return ad.roll(v, shifts, axes)
    return np.roll(v, shifts, axes)


def cyclic_unshift(v, offsets: Sequence[int]):
    return cyclic_shift(v, [-int(o) for o in offsets])
