"""Two-stream patch registration network.

One encoder (a single parameter set, applied to both images) builds a
four-level feature pyramid per patch. A single decoder fuses the two pyramids
coarse-to-fine into a three-channel displacement patch; calling it with the
pyramids swapped yields the reverse direction. MLP heads map the deepest
features to unit vectors for the contrastive loss.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import HeaderMismatch, ShapeMismatch
from .stitcher import BLOCKS, StitchConfig, init_attention_params


@dataclass
class NetConfig:
    enc_channels: list[int] = field(default_factory=lambda: [16, 32, 32, 32])
    dec_channels: list[int] = field(default_factory=lambda: [32, 32, 32, 16])
    proj_hidden: int = 256
    proj_dim: int = 128
    leaky_alpha: float = 0.2
    kernel: int = 3
    final_init_std: float = 1e-5
    shared_heads: bool = False

    def __post_init__(self):
        if len(self.enc_channels) != len(self.dec_channels):
            raise ValueError("encoder and decoder depth differ")
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd")

    @property
    def depth(self) -> int:
        return len(self.enc_channels)

    def check_patch(self, patch_dims) -> None:
        f = 2 ** (self.depth - 1)
        if any(d % f for d in patch_dims):
            raise ShapeMismatch(f"patch dims {tuple(patch_dims)} not divisible by {f}")


class ModelParams:
    """Ordered name -> tensor mapping of every learnable weight."""

    def __init__(self, tensors: dict[str, Tensor], net: NetConfig, stitch: StitchConfig | None, patch_dims):
        self.tensors = dict(tensors)
        self.net = net
        self.stitch = stitch
        self.patch_dims = tuple(int(d) for d in patch_dims)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self.tensors if k.startswith(prefix)]

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def head(self, stream: str) -> str:
        return "head_x" if self.net.shared_heads or stream == "x" else "head_y"

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype


def _he_std(fan_in: int, alpha: float) -> float:
    return float(np.sqrt(2.0 / ((1.0 + alpha**2) * fan_in)))


def init_params(
    net: NetConfig,
    patch_dims,
    seed: int = 0,
    dtype=np.float32,
    stitch: StitchConfig | None = None,
) -> ModelParams:
    """Deterministic initialisation: He-scaled convs, zero biases, tiny flow head."""
    net.check_patch(patch_dims)
    rng = np.random.default_rng(seed)
    k = net.kernel
    raw: dict[str, np.ndarray] = {}

    def conv(name, cin, cout, std):
        raw[f"{name}.w"] = rng.normal(0.0, std, size=(cout, cin, k, k, k)) if std > 0 else np.zeros((cout, cin, k, k, k))
        raw[f"{name}.b"] = np.zeros(cout)

    cin = 1
    for i, c in enumerate(net.enc_channels):
        conv(f"enc{i}", cin, c, _he_std(cin * k**3, net.leaky_alpha))
        cin = c
    enc = net.enc_channels
    cin = 2 * enc[-1]
    for i, c in enumerate(net.dec_channels):
        if i > 0:
            cin = net.dec_channels[i - 1] + 2 * enc[-1 - i]
        conv(f"dec{i}", cin, c, _he_std(cin * k**3, net.leaky_alpha))
    conv("flow", net.dec_channels[-1], 3, net.final_init_std)

    heads = ["head_x"] if net.shared_heads else ["head_x", "head_y"]
    for h in heads:
        raw[f"{h}.w1"] = rng.normal(0.0, _he_std(enc[-1], net.leaky_alpha), size=(enc[-1], net.proj_hidden))
        raw[f"{h}.b1"] = np.zeros((1, net.proj_hidden))
        raw[f"{h}.w2"] = rng.normal(0.0, np.sqrt(1.0 / net.proj_hidden), size=(net.proj_hidden, net.proj_dim))
        raw[f"{h}.b2"] = np.zeros((1, net.proj_dim))

    tensors = {name: Tensor(v, requires_grad=True, dtype=dtype, name=name) for name, v in raw.items()}
    if stitch is not None:
        E = stitch.token_dim(patch_dims)
        for block in BLOCKS:
            tensors.update(init_attention_params(E, stitch.m, stitch.heads, rng, dtype, block))
    return ModelParams(tensors, net, stitch, patch_dims)


def expected_param_count(net: NetConfig, patch_dims=None, stitch: StitchConfig | None = None) -> int:
    """Closed-form parameter count (independent of :func:`init_params`)."""
    k3 = net.kernel**3
    total = 0
    cin = 1
    for c in net.enc_channels:
        total += (cin * k3 + 1) * c
        cin = c
    enc = net.enc_channels
    for i, c in enumerate(net.dec_channels):
        cin = 2 * enc[-1] if i == 0 else net.dec_channels[i - 1] + 2 * enc[-1 - i]
        total += (cin * k3 + 1) * c
    total += (net.dec_channels[-1] * k3 + 1) * 3
    per_head = (enc[-1] + 1) * net.proj_hidden + (net.proj_hidden + 1) * net.proj_dim
    total += per_head * (1 if net.shared_heads else 2)
    if stitch is not None:
        E = stitch.token_dim(patch_dims)
        total += 2 * (4 * E * E + (2 * stitch.m - 1) ** 3 * stitch.heads)
    return total


# -- forward pieces ----------------------------------------------------------
def _conv(x: Tensor, params: ModelParams, name: str, stride: int = 1) -> Tensor:
    pad = params.net.kernel // 2
    return ad.conv3d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, pad=pad)


def encode(patch, params: ModelParams) -> list[Tensor]:
    """Feature pyramid, level 0 at patch resolution, each deeper level halved."""
    if not isinstance(patch, Tensor):
        patch = Tensor(patch, dtype=params.dtype)
    if patch.ndim == 3:
        patch = patch.reshape(1, *patch.shape)
    params.net.check_patch(patch.shape[-3:])
    alpha = params.net.leaky_alpha
    levels = []
    x = patch
    for i in range(params.net.depth):
        x = ad.leaky_relu(_conv(x, params, f"enc{i}", stride=1 if i == 0 else 2), alpha)
        levels.append(x)
    return levels


def decode(pyr_a: list[Tensor], pyr_b: list[Tensor], params: ModelParams) -> Tensor:
    """Displacement patch taking stream ``a`` onto stream ``b``."""
    if [t.shape for t in pyr_a] != [t.shape for t in pyr_b]:
        raise ShapeMismatch("pyramids come from differently shaped patches")
    alpha = params.net.leaky_alpha
    depth = params.net.depth
    ch = -4
    state = ad.leaky_relu(_conv(ad.concat([pyr_a[-1], pyr_b[-1]], axis=ch), params, "dec0"), alpha)
    for i in range(1, depth):
        level = depth - 1 - i
        up = ad.upsample_nearest3d(state)
        state = ad.leaky_relu(_conv(ad.concat([up, pyr_a[level], pyr_b[level]], axis=ch), params, f"dec{i}"), alpha)
    return _conv(state, params, "flow")


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    ones = Tensor(np.ones((x.shape[0], 1), dtype=x.dtype))
    return x @ w + ones @ b


def project(deepest: Tensor, params: ModelParams, stream: str = "x") -> Tensor:
    """Pool, two-layer MLP, L2-normalise. Returns ``[B, proj_dim]`` (or ``[proj_dim]``)."""
    single = deepest.ndim == 4
    pooled = deepest.mean(axis=(-3, -2, -1))
    if single:
        pooled = pooled.reshape(1, -1)
    h = params.head(stream)
    hidden = ad.leaky_relu(_linear(pooled, params[f"{h}.w1"], params[f"{h}.b1"]), params.net.leaky_alpha)
    out = ad.l2_normalize(_linear(hidden, params[f"{h}.w2"], params[f"{h}.b2"]), axis=-1)
    return out.reshape(-1) if single else out


def forward_pair(p_x, p_y, params: ModelParams, with_features: bool = True):
    """Both displacement patches and both contrastive features for a patch pair.

    Inputs are single patches ``[P,P,P]`` / ``[1,P,P,P]`` or a stacked batch
    ``[N,1,P,P,P]`` of same-position pairs.
    """
    pyr_x = encode(p_x, params)
    pyr_y = encode(p_y, params)
    z_xy = decode(pyr_x, pyr_y, params)
    z_yx = decode(pyr_y, pyr_x, params)
    if not with_features:
        return z_xy, z_yx, None, None
    return z_xy, z_yx, project(pyr_x[-1], params, "x"), project(pyr_y[-1], params, "y")


# -- checkpoints ---------------------------------------------------------------
def save_checkpoint(path, params: ModelParams, extra: dict | None = None, arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write ``manifest.json`` plus ``params.bin`` (raw little-endian segments)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    every = [(n, t.data) for n, t in params.items()] + sorted((arrays or {}).items())
    for name, arr in every:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>=|"), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": "patchreg-checkpoint/1",
        "net": asdict(params.net),
        "stitch": asdict(params.stitch) if params.stitch else None,
        "patch_dims": list(params.patch_dims),
        "n_params": len(params.tensors),
        "tensors": entries,
        "extra": extra or {},
    }
    (path / "params.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path, expect: ModelParams | None = None):
    """Read a checkpoint; returns ``(params, extra, arrays)``.

    With ``expect`` given, every stored parameter must match its name and
    shape exactly.
    """
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    payload = (path / "params.bin").read_bytes()
    net = NetConfig(**manifest["net"])
    stitch = StitchConfig(**manifest["stitch"]) if manifest["stitch"] else None
    n_params = manifest["n_params"]
    tensors: dict[str, Tensor] = {}
    arrays: dict[str, np.ndarray] = {}
    for i, e in enumerate(manifest["tensors"]):
        seg = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(seg) != e["nbytes"]:
            raise HeaderMismatch(f"checkpoint payload truncated at {e['name']}")
        arr = np.frombuffer(seg, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="))
        if i < n_params:
            tensors[e["name"]] = Tensor(arr.copy(), requires_grad=True, name=e["name"])
        else:
            arrays[e["name"]] = arr.copy()
    if expect is not None:
        for name, t in expect.items():
            if name not in tensors or tensors[name].shape != t.shape:
                got = tensors[name].shape if name in tensors else None
                raise ShapeMismatch(f"checkpoint tensor {name}: expected {t.shape}, got {got}")
        if set(tensors) != set(expect.tensors):
            raise ShapeMismatch("checkpoint holds unexpected tensors")
    params = ModelParams(tensors, net, stitch, manifest["patch_dims"])
    return params, manifest["extra"], arrays
