"""Volume containers, the ``.rvol`` on-disk format and synthetic phantoms.

An ``.rvol`` file is a raw little-endian payload. Its header lives next to it
in ``<path>.json``. Voxel ``(i, j, k)`` of channel ``c`` is stored at element
offset ``((c*d + k)*h + j)*w + i``, i.e. ``i`` varies fastest.

In memory, arrays are indexed ``[i, j, k]`` for single-channel volumes and
``[c, i, j, k]`` for displacement fields.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import HeaderMismatch, InvalidSpec, ShapeMismatch, UnsupportedDtype

DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


@dataclass
class VolumeHeader:
    dims: list[int]
    spacing: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    dtype: str = "f32"
    channels: int = 1
    byte_order: str = "little"
    label_names: dict[str, str] | None = None

    def __post_init__(self):
        self.dims = [int(v) for v in self.dims]
        self.spacing = [float(v) for v in self.spacing]
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise InvalidSpec(f"dims must be three extents >= 2, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise InvalidSpec(f"spacing must be three positive values, got {self.spacing}")
        if self.dtype not in DTYPES:
            raise UnsupportedDtype(f"dtype {self.dtype!r} not in {sorted(DTYPES)}")
        if self.channels not in (1, 3):
            raise InvalidSpec(f"channels must be 1 or 3, got {self.channels}")
        if self.byte_order != "little":
            raise UnsupportedDtype(f"byte order {self.byte_order!r} unsupported")

    @property
    def shape(self) -> tuple[int, ...]:
        w, h, d = self.dims
        return (w, h, d) if self.channels == 1 else (self.channels, w, h, d)

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.dims)) * self.channels

    def to_dict(self) -> dict:
        out = asdict(self)
        if out["label_names"] is None:
            del out["label_names"]
        return out


@dataclass
class ScalarVolume:
    header: VolumeHeader
    data: np.ndarray


@dataclass
class LabelVolume:
    header: VolumeHeader
    data: np.ndarray

    @property
    def label_names(self):
        return self.header.label_names


@dataclass
class DeformationField:
    header: VolumeHeader
    data: np.ndarray  # [3, w, h, d], voxel units


def image_volume(data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> ScalarVolume:
    return ScalarVolume(VolumeHeader(list(data.shape), list(spacing), "f32", 1), np.asarray(data, np.float32))


def label_volume(data: np.ndarray, spacing=(1.0, 1.0, 1.0), label_names=None) -> LabelVolume:
    header = VolumeHeader(list(data.shape), list(spacing), "u16", 1, label_names=label_names)
    return LabelVolume(header, np.asarray(data, np.uint16))


def field_volume(data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> DeformationField:
    return DeformationField(VolumeHeader(list(data.shape[1:]), list(spacing), "f32", 3), np.asarray(data, np.float32))


def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def element_offset(header: VolumeHeader, i: int, j: int, k: int, c: int = 0) -> int:
    w, h, d = header.dims
    return ((c * d + k) * h + j) * w + i


def write_rvol(path, header: VolumeHeader, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.shape != header.shape:
        raise HeaderMismatch(f"data shape {data.shape} does not match header shape {header.shape}")
    arr = data if header.channels != 1 else data[None]
    # [c, i, j, k] -> memory order c, k, j, i
    payload = np.ascontiguousarray(arr.transpose(0, 3, 2, 1), dtype=DTYPES[header.dtype])
    path = Path(path)
    path.write_bytes(payload.tobytes())
    _sidecar(path).write_text(json.dumps(header.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_header(path) -> VolumeHeader:
    raw = json.loads(_sidecar(path).read_text(encoding="utf-8"))
    try:
        return VolumeHeader(**raw)
    except TypeError as exc:
        raise HeaderMismatch(f"malformed header for {path}: {exc}") from exc


def read_rvol(path) -> tuple[VolumeHeader, np.ndarray]:
    header = read_header(path)
    payload = Path(path).read_bytes()
    dt = DTYPES[header.dtype]
    expected = header.n_elements * dt.itemsize
    if len(payload) != expected:
        raise HeaderMismatch(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    w, h, d = header.dims
    arr = np.frombuffer(payload, dtype=dt).reshape(header.channels, d, h, w).transpose(0, 3, 2, 1)
    arr = np.ascontiguousarray(arr, dtype=dt.newbyteorder("="))
    return header, (arr[0] if header.channels == 1 else arr)


def save(path, vol) -> None:
    write_rvol(path, vol.header, vol.data)


def load(path):
    """Read an ``.rvol`` file into the matching container type."""
    header, data = read_rvol(path)
    if header.channels == 3:
        return DeformationField(header, data)
    if header.dtype == "u16":
        return LabelVolume(header, data)
    return ScalarVolume(header, data)


def normalize(data: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance (constant volumes are only centred)."""
    data = np.asarray(data, dtype=np.float64)
    std = data.std()
    out = data - data.mean()
    if std > 0:
        out = out / std
    return out


# -- phantoms ----------------------------------------------------------------
@dataclass
class PhantomSpec:
    seed: int = 1
    dims: tuple[int, int, int] = (32, 32, 32)
    n_inner_structures: int = 2
    noise_sigma: float = 0.02
    field_amplitude: float = 5.0
    control_spacing: int = 16

    def validate(self) -> None:
        dims = tuple(int(v) for v in self.dims)
        if len(dims) != 3 or min(dims) < 16:
            raise InvalidSpec(f"phantom dims must be >= 16 per axis, got {self.dims}")
        if not 2 <= self.n_inner_structures <= 4:
            raise InvalidSpec("n_inner_structures must lie in [2, 4]")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be >= 0")
        if self.field_amplitude < 0 or self.field_amplitude > self.control_spacing / 2:
            raise InvalidSpec("field_amplitude must lie in [0, control_spacing/2]")


def _ellipsoid(grid, centre, axes) -> np.ndarray:
    r = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, centre, axes))
    return r <= 1.0


# inner semi-axes as a fraction of the outer ones
INNER_AXIS_RANGE = (0.4, 0.6)
# position redraws per inner structure before accepting an overlap with earlier ones
PLACEMENT_TRIES = 50


def make_phantom(spec: PhantomSpec) -> tuple[ScalarVolume, LabelVolume]:
    """Seeded ellipsoid phantom: an outer shell and smaller inner structures.

    Inner structures are placed inside the outer ellipsoid, redrawn while
    they overlap an earlier one, and the whole set is redrawn until every
    label covers at least 1% of the outer ellipsoid.
    """
    spec.validate()
    dims = tuple(int(v) for v in spec.dims)
    rng = np.random.default_rng(spec.seed)
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    centre = [(n - 1) / 2 for n in dims]
    outer_axes = [n * rng.uniform(0.35, 0.45) for n in dims]
    outer = _ellipsoid(grid, centre, outer_axes)
    outer_count = outer.sum()

    for _ in range(1000):
        labels = np.where(outer, 1, 0).astype(np.uint16)
        intensities = np.sort(rng.uniform(0.5, 0.9, spec.n_inner_structures))
        rng.shuffle(intensities)
        # distinct values: enforce a minimum gap
        if np.min(np.diff(np.sort(intensities))) < 0.05:
            continue
        image = np.where(outer, 0.3, 0.0)
        for s in range(spec.n_inner_structures):
            axes = [a * rng.uniform(*INNER_AXIS_RANGE) for a in outer_axes]
            for _ in range(PLACEMENT_TRIES):
                offset = [rng.uniform(-0.45, 0.45) * (a - b) for a, b in zip(outer_axes, axes)]
                inner = _ellipsoid(grid, [c + o for c, o in zip(centre, offset)], axes) & outer
                if not (labels[inner] > 1).any():
                    break
            labels[inner] = s + 2
            image[inner] = intensities[s]
        counts = np.bincount(labels.ravel(), minlength=spec.n_inner_structures + 2)
        if np.all(counts[1:] >= 0.01 * outer_count):
            break
    else:
        raise InvalidSpec("could not place inner structures; dims too small")

    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=dims)
    image = np.clip(image, 0.0, 1.0)
    names = {"0": "background", "1": "outer"} | {str(s + 2): f"structure_{s + 1}" for s in range(spec.n_inner_structures)}
    return image_volume(image), label_volume(labels, label_names=names)


def control_vectors(seed: int, dims, amplitude: float, control_spacing: int) -> np.ndarray:
    """Coarse control-grid displacements drawn for :func:`make_smooth_field`."""
    rng = np.random.default_rng(seed)
    coarse_shape = (3,) + tuple(int(n) // control_spacing + 1 for n in dims)
    return np.clip(rng.normal(0.0, amplitude / 2, size=coarse_shape), -amplitude, amplitude)


def make_smooth_field(seed: int, dims, amplitude: float, control_spacing: int) -> DeformationField:
    """Random displacement field interpolated from a coarse control grid.

    Control vectors are i.i.d. Gaussian (std ``amplitude/2``) clamped to
    ``+-amplitude`` per component. Control points sit at multiples of
    ``control_spacing``; the coarse grid extends one node past the volume so
    every voxel lies inside an interpolation cell.
    """
    dims = tuple(int(v) for v in dims)
    if control_spacing < 1 or any(n % control_spacing for n in dims):
        raise InvalidSpec(f"control_spacing {control_spacing} must divide dims {dims}")
    if amplitude < 0:
        raise InvalidSpec("amplitude must be >= 0")
    out = control_vectors(seed, dims, amplitude, control_spacing)
    for axis, n in enumerate(dims, start=1):
        pos = np.arange(n) / control_spacing
        lo = np.floor(pos).astype(int)
        t = pos - lo
        shape = [1] * 4
        shape[axis] = n
        t = t.reshape(shape)
        out = np.take(out, lo, axis=axis) * (1 - t) + np.take(out, lo + 1, axis=axis) * t
    return field_volume(out.astype(np.float32))


def make_pair(atlas: ScalarVolume, atlas_mask: LabelVolume, gt_field: DeformationField):
    """Deform the atlas and its mask with a known field."""
    from .warp import warp_labels_nn, warp_trilinear_array

    if atlas.data.shape != atlas_mask.data.shape or atlas.data.shape != gt_field.data.shape[1:]:
        raise ShapeMismatch("atlas, mask and field must share spatial dims")
    moving = warp_trilinear_array(atlas.data, gt_field.data)
    moving_mask = warp_labels_nn(atlas_mask.data, gt_field.data)
    return (
        ScalarVolume(VolumeHeader(**atlas.header.to_dict()), moving.astype(np.float32)),
        LabelVolume(VolumeHeader(**atlas_mask.header.to_dict()), moving_mask),
    )


def ensure_dir(path) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"output directory {path} does not exist")
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory {path} is not writable")
    return path
