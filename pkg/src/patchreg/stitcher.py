"""Window / shifted-window self-attention over deformation-field patches.

Each field patch is one attention window. It is cut into ``m**3`` cubic
regions of side ``s``; each region, flattened, is a token of length
``E = 3*s**3``. Tokens are ordered ``rz*m*m + ry*m + rx`` and a token's
elements are ordered (channel, i, j, k) with ``k`` fastest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimsNotDivisible, ShapeMismatch
from .patching import cyclic_shift, cyclic_unshift, from_windows, to_windows

BLOCKS = ("wmsa", "swmsa")


@dataclass
class StitchConfig:
    m: int = 4
    heads: int = 4

    def region_side(self, patch_dims) -> int:
        sides = {d // self.m for d in patch_dims}
        if any(d % self.m for d in patch_dims) or len(sides) != 1:
            raise DimsNotDivisible(f"patch dims {tuple(patch_dims)} must be cubic and divisible by m={self.m}")
        return sides.pop()

    def token_dim(self, patch_dims) -> int:
        E = 3 * self.region_side(patch_dims) ** 3
        if E % self.heads:
            raise ValueError(f"token dim {E} not divisible by {self.heads} heads")
        return E


def init_attention_params(E: int, m: int, heads: int, rng: np.random.Generator, dtype, prefix: str) -> dict:
    """q/k/v projections ~ N(0, 1/E); output projection and position bias start at zero."""
    std = 1.0 / np.sqrt(E)
    out = {}
    for name in ("q", "k", "v"):
        out[f"{prefix}.{name}"] = rng.normal(0.0, std, size=(E, E))
    out[f"{prefix}.o"] = np.zeros((E, E))
    out[f"{prefix}.rel_bias"] = np.zeros(((2 * m - 1) ** 3, heads))
    return {k: Tensor(v, requires_grad=True, dtype=dtype, name=k) for k, v in out.items()}


def tokenize(patch, m: int):
    """``[3, P, P, P]`` (optionally batched) -> ``[m**3, 3*s**3]``."""
    batched = patch.ndim == 5
    x = patch if batched else patch.reshape(1, *patch.shape)
    N, C, W, H, D = x.shape
    if W % m or H % m or D % m or not (W == H == D):
        raise DimsNotDivisible(f"patch {(W, H, D)} must be cubic and divisible by m={m}")
    s = W // m
    x = x.reshape(N, C, m, s, m, s, m, s).transpose(0, 6, 4, 2, 1, 3, 5, 7)
    x = x.reshape(N, m**3, C * s**3)
    return x if batched else x.reshape(m**3, C * s**3)


def detokenize(tokens, m: int, channels: int = 3):
    batched = tokens.ndim == 3
    t = tokens if batched else tokens.reshape(1, *tokens.shape)
    N, T, E = t.shape
    if T != m**3:
        raise ShapeMismatch(f"expected {m**3} tokens, got {T}")
    s = round((E // channels) ** (1 / 3))
    if channels * s**3 != E:
        raise ShapeMismatch(f"token dim {E} is not {channels}*s**3")
    x = t.reshape(N, m, m, m, channels, s, s, s).transpose(0, 4, 3, 5, 2, 6, 1, 7)
    x = x.reshape(N, channels, m * s, m * s, m * s)
    return x if batched else x.reshape(channels, m * s, m * s, m * s)


def relative_position_index(m: int) -> np.ndarray:
    """``[T, T]`` index into the ``(2m-1)**3`` bias table for each token pair."""
    r = np.arange(m**3)
    coords = np.stack([r % m, (r // m) % m, r // (m * m)], axis=1)  # (rx, ry, rz)
    delta = coords[:, None, :] - coords[None, :, :] + (m - 1)
    span = 2 * m - 1
    return (delta[..., 0] * span + delta[..., 1]) * span + delta[..., 2]


def attention_weights(tokens: Tensor, params: dict, prefix: str, heads: int, m: int) -> tuple[Tensor, Tensor]:
    """Softmax attention weights ``[N, heads, T, T]`` and values ``[N, heads, T, E/heads]``."""
    N, T, E = tokens.shape
    dh = E // heads

    def split(t):
        return t.reshape(N, T, heads, dh).transpose(0, 2, 1, 3)

    q = split(tokens @ params[f"{prefix}.q"])
    k = split(tokens @ params[f"{prefix}.k"])
    v = split(tokens @ params[f"{prefix}.v"])
    scores = ad.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / np.sqrt(dh))
    if f"{prefix}.rel_bias" in params:
        bias = ad.take(params[f"{prefix}.rel_bias"], relative_position_index(m)).transpose(2, 0, 1)
        scores = scores + ad.stack([bias] * N)
    return ad.softmax(scores, axis=-1), v


def wmsa(tokens, params: dict, heads: int, prefix: str = "wmsa", m: int | None = None) -> Tensor:
    """Multi-head self-attention inside each window, with residual connection.

    ``tokens`` is ``[T, E]`` or ``[N, T, E]`` with ``T = m**3``. Without a
    ``rel_bias`` entry in ``params`` any token count is accepted.
    """
    batched = tokens.ndim == 3
    x = tokens if batched else tokens.reshape(1, *tokens.shape)
    N, T, E = x.shape
    if f"{prefix}.rel_bias" in params:
        if m is None:
            m = round(T ** (1 / 3))
        if m**3 != T:
            raise ShapeMismatch(f"token count {T} is not a cube")
    if E % heads:
        raise ShapeMismatch(f"token dim {E} not divisible by {heads} heads")
    attn, v = attention_weights(x, params, prefix, heads, m)
    mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(N, T, E)
    out = x + mixed @ params[f"{prefix}.o"]
    return out if batched else out.reshape(T, E)


def stitch_fields(windows, params: dict, config: StitchConfig, n: int) -> Tensor:
    """Refine per-patch fields with W-MSA, then SW-MSA on a one-region cyclic shift.

    ``windows`` is the stacked ``[n**3, 3, P, P, P]`` patch tensor (or a list
    of patches). No attention mask is applied to wrapped regions.
    """
    if isinstance(windows, (list, tuple)):
        windows = ad.stack(windows)
    m = config.m
    s = config.region_side(windows.shape[-3:])
    t = wmsa(tokenize(windows, m), params, config.heads, "wmsa", m)
    full = from_windows(detokenize(t, m), n)
    shifted = cyclic_shift(full, (s, s, s))
    t = wmsa(tokenize(to_windows(shifted, n), m), params, config.heads, "swmsa", m)
    return cyclic_unshift(from_windows(detokenize(t, m), n), (s, s, s))


def count_attention_madds(dims, m: int = 4, channels: int = 3, mode: str = "w_msa") -> int:
    """Analytic multiply-add count for global vs windowed attention.

    ``full_msa``: ``4*V*C**2 + 2*V**2*C``; ``w_msa``: ``4*V*C**2 + 2*m**3*V*C``
    with ``V = w*h*d``.
    """
    V = int(np.prod([int(d) for d in dims]))
    C = int(channels)
    if mode == "full_msa":
        return 4 * V * C * C + 2 * V * V * C
    if mode == "w_msa":
        return 4 * V * C * C + 2 * m**3 * V * C
    raise ValueError(f"unknown mode {mode!r}")


def seam_discontinuity(field: np.ndarray, n: int) -> float:
    """Mean |forward difference| across patch boundaries minus the mean elsewhere."""
    field = np.asarray(field, dtype=np.float64)
    across, within = [], []
    for axis in (1, 2, 3):
        size = field.shape[axis]
        step = size // n
        diff = np.abs(np.diff(field, axis=axis))
        boundary = (np.arange(size - 1) + 1) % step == 0
        across.append(np.compress(boundary, diff, axis=axis).ravel())
        within.append(np.compress(~boundary, diff, axis=axis).ravel())
    across = np.concatenate(across)
    within = np.concatenate(within)
    if across.size == 0:
        return 0.0
    return float(across.mean() - within.mean())
