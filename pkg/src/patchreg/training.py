"""Adam, the step-decay schedule, the training loop and Dice evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimsNotDivisible, MissingGradient, NonFiniteLoss, ShapeMismatch
from .losses import LossWeights, loss_contrast, loss_recon, loss_smooth, loss_total
from .network import ModelParams, forward_pair, load_checkpoint, save_checkpoint
from .patching import from_windows, to_windows
from .stitcher import seam_discontinuity, stitch_fields
from .volume_io import (
    LabelVolume,
    PhantomSpec,
    ScalarVolume,
    make_pair,
    make_phantom,
    make_smooth_field,
    normalize,
)
from .warp import warp_labels_nn, warp_trilinear_array

METRIC_KEYS = ("epoch", "lr", "loss_total", "loss_recon", "loss_smooth", "loss_contrast", "wall_ms")


class OutOfRange(ValueError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 50
    epochs: int = 200
    batch: int = 1
    seed: int = 1
    n: int = 2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    use_stitcher: bool = True
    checkpoint_every: int = 50
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch != 1:
            raise ValueError("only batch size 1 is supported")
        self.betas = tuple(float(b) for b in self.betas)


def lr_at(epoch: int, config: TrainConfig) -> float:
    if not 0 <= epoch < config.epochs:
        raise OutOfRange(f"epoch {epoch} outside [0, {config.epochs})")
    return config.lr0 * config.decay_factor ** (epoch // config.decay_every)


# -- Adam ---------------------------------------------------------------------
@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": a for k, a in self.m.items()}
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        out["adam.step"] = np.array([self.step], dtype=np.int64)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "OptimizerState":
        state = cls(step=int(arrays["adam.step"][0]) if "adam.step" in arrays else 0)
        for k, a in arrays.items():
            if k.startswith("adam.m."):
                state.m[k[len("adam.m.") :]] = a
            elif k.startswith("adam.v."):
                state.v[k[len("adam.v.") :]] = a
        return state


def adam_step(params: dict, state: OptimizerState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, names=None) -> None:
    """One bias-corrected Adam update, in place, over ``names`` (default: all)."""
    names = list(params) if names is None else list(names)
    for name in names:
        if params[name].grad is None:
            raise MissingGradient(f"no gradient for parameter {name}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name in names:
        p = params[name]
        g = p.grad
        dt = p.data.dtype
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = (b1 * m + (1 - b1) * g).astype(dt)
        v = (b2 * v + (1 - b2) * g * g).astype(dt)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(dt)
        state.m[name] = m
        state.v[name] = v


# -- data ---------------------------------------------------------------------
@dataclass
class Pair:
    moving: ScalarVolume
    moving_mask: LabelVolume
    gt_field: np.ndarray | None = None


@dataclass
class Dataset:
    atlas: ScalarVolume
    atlas_mask: LabelVolume
    train: list[Pair]
    test: list[Pair]


def field_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1)[0])


def epoch_field_seed(seed: int, epoch: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(k), int(epoch), 1]).generate_state(1)[0])


@dataclass
class PairSampler:
    """Training pairs per epoch: the stored pairs at epoch 0, fresh deformations after.

    Fresh fields are seeded by ``(spec.seed, epoch, slot)`` and never reuse a
    test-pair seed.
    """

    atlas: ScalarVolume
    atlas_mask: LabelVolume
    spec: PhantomSpec
    first: list[Pair]

    def __call__(self, epoch: int) -> list[Pair]:
        if epoch == 0:
            return self.first
        out = []
        for k in range(len(self.first)):
            gt = make_smooth_field(epoch_field_seed(self.spec.seed, epoch, k), self.spec.dims, self.spec.field_amplitude,
                                   self.spec.control_spacing)
            moving, moving_mask = make_pair(self.atlas, self.atlas_mask, gt)
            out.append(Pair(moving, moving_mask, gt.data))
        return out


def make_dataset(spec: PhantomSpec, n_train: int = 8, n_test: int = 4) -> Dataset:
    """One atlas phantom plus ``n_train + n_test`` independently deformed copies."""
    atlas, atlas_mask = make_phantom(spec)
    pairs = []
    for k in range(n_train + n_test):
        gt = make_smooth_field(field_seed(spec.seed, k), spec.dims, spec.field_amplitude, spec.control_spacing)
        moving, moving_mask = make_pair(atlas, atlas_mask, gt)
        pairs.append(Pair(moving, moving_mask, gt.data))
    return Dataset(atlas, atlas_mask, pairs[:n_train], pairs[n_train:])


# -- one step -----------------------------------------------------------------
def _check_dims(dims, params: ModelParams, n: int) -> None:
    f = n * 2 ** (params.net.depth - 1)
    if params.stitch is not None:
        f = np.lcm(f, n * params.stitch.m)
    if any(d % f for d in dims):
        raise DimsNotDivisible(f"volume dims {tuple(dims)} must be divisible by {f}")


def _fields(x: Tensor, y: Tensor, params: ModelParams, n: int, use_stitcher: bool, with_features: bool):
    P = x.shape[0] // n
    px = to_windows(x, n).reshape(n**3, 1, P, P, P)
    py = to_windows(y, n).reshape(n**3, 1, P, P, P)
    w_xy, w_yx, f_x, f_y = forward_pair(px, py, params, with_features)
    if use_stitcher:
        z_xy = stitch_fields(w_xy, params.tensors, params.stitch, n)
        z_yx = stitch_fields(w_yx, params.tensors, params.stitch, n)
    else:
        z_xy, z_yx = from_windows(w_xy, n), from_windows(w_yx, n)
    return z_xy, z_yx, f_x, f_y, w_xy, w_yx


def active_names(params: ModelParams, config: TrainConfig) -> list[str]:
    """Parameters that receive gradients under ``config``."""
    names = []
    for name in params:
        block = name.split(".")[0]
        if block in ("wmsa", "swmsa") and not config.use_stitcher:
            continue
        if block.startswith("head_") and not config.weights.lambda_contrast:
            continue
        names.append(name)
    return names


def step_losses(params: ModelParams, x: np.ndarray, y: np.ndarray, config: TrainConfig) -> dict[str, Tensor]:
    """Forward pass of one training step; call inside an active tape."""
    w = config.weights
    X = Tensor(x, dtype=params.dtype)
    Y = Tensor(y, dtype=params.dtype)
    want_features = bool(w.lambda_contrast)
    z_xy, z_yx, f_x, f_y, _, _ = _fields(X, Y, params, config.n, config.use_stitcher, want_features)
    recon = loss_recon(X, Y, z_xy, z_yx, w.ncc_window, w.ncc_eps)
    smooth = loss_smooth(z_xy, z_yx)
    contrast = loss_contrast(f_x, f_y, w.tau) if want_features else Tensor(np.zeros((), dtype=params.dtype))
    total = loss_total(recon, smooth, contrast, w)
    return {"loss_total": total, "loss_recon": recon, "loss_smooth": smooth, "loss_contrast": contrast}


def train_step(params: ModelParams, state: OptimizerState, x, y, config: TrainConfig, lr: float) -> dict[str, float]:
    names = active_names(params, config)
    for name in names:
        params[name].grad = None
    with ad.Tape() as tape:
        losses = step_losses(params, x, y, config)
    tape.backward(losses["loss_total"])
    adam_step(params.tensors, state, lr, config.betas, config.adam_eps, names)
    return {k: float(v.data) for k, v in losses.items()}


# -- training loop ----------------------------------------------------------------
def _format_metrics(record: dict) -> str:
    return json.dumps({k: record[k] for k in METRIC_KEYS})


def train(
    config: TrainConfig,
    params: ModelParams,
    atlas: ScalarVolume,
    pairs,
    out_dir,
    echo: dict | None = None,
    log=None,
    hook=None,
) -> tuple[ModelParams, OptimizerState]:
    """Train on (moving, atlas) pairs; writes ``metrics.jsonl`` and checkpoints.

    ``pairs`` is a fixed list or a callable ``epoch -> list`` such as
    :class:`PairSampler`. Every moving image is registered to the fixed atlas,
    one pair per step, in list order. Checkpoints go to ``checkpoints/epoch_XXX`` every
    ``checkpoint_every`` epochs and to ``final`` at the end. ``hook`` is
    called after every epoch with ``(epoch, params, state)``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _check_dims(atlas.data.shape, params, config.n)
    y = normalize(atlas.data).astype(params.dtype)
    epoch_pairs = pairs if callable(pairs) else (lambda epoch: pairs)
    state = OptimizerState()
    extra = {"config": echo or {}, "train": _config_dict(config)}
    metrics_path = out_dir / "metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            lr = lr_at(epoch, config)
            sums = dict.fromkeys(("loss_total", "loss_recon", "loss_smooth", "loss_contrast"), 0.0)
            xs = [normalize(p.moving.data).astype(params.dtype) for p in epoch_pairs(epoch)]
            for step, x in enumerate(xs):
                try:
                    losses = train_step(params, state, x, y, config, lr)
                except NonFiniteLoss as exc:
                    raise NonFiniteLoss(f"{exc} at epoch {epoch}, step {step}", epoch, step) from None
                for k in sums:
                    sums[k] += losses[k]
            record = {"epoch": epoch, "lr": lr, **{k: v / len(xs) for k, v in sums.items()}}
            record["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            fh.write(_format_metrics(record) + "\n")
            fh.flush()
            if log is not None:
                log(record)
            if hook is not None:
                hook(epoch, params, state)
            done = epoch + 1
            if done % config.checkpoint_every == 0 and done < config.epochs:
                save_checkpoint(out_dir / "checkpoints" / f"epoch_{done:03d}", params, {**extra, "epoch": done}, state.to_arrays())
    save_checkpoint(out_dir / "final", params, {**extra, "epoch": config.epochs}, state.to_arrays())
    return params, state


def _config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["betas"] = list(config.betas)
    return d


def strip_timing(lines) -> list[dict]:
    """Metrics records without the wall-clock field, for reproducibility checks."""
    out = []
    for line in lines:
        rec = json.loads(line)
        rec.pop("wall_ms", None)
        out.append(rec)
    return out


# -- inference & evaluation ------------------------------------------------------
def predict_fields(params: ModelParams, moving: np.ndarray, fixed: np.ndarray, n: int, use_stitcher: bool | None = None):
    """Returns ``(z_xy, z_yx, naive_xy, naive_yx)`` as arrays; naive = before stitching."""
    if use_stitcher is None:
        use_stitcher = params.stitch is not None
    _check_dims(moving.shape, params, n)
    if moving.shape != fixed.shape:
        raise ShapeMismatch(f"moving {moving.shape} and fixed {fixed.shape} differ")
    x = Tensor(normalize(moving).astype(params.dtype))
    y = Tensor(normalize(fixed).astype(params.dtype))
    z_xy, z_yx, _, _, w_xy, w_yx = _fields(x, y, params, n, use_stitcher, with_features=False)
    return z_xy.data, z_yx.data, from_windows(w_xy.data, n), from_windows(w_yx.data, n)


def dice(a, b, label: int) -> float:
    a = a.data if isinstance(a, LabelVolume) else np.asarray(a)
    b = b.data if isinstance(b, LabelVolume) else np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"masks differ in shape: {a.shape} vs {b.shape}")
    A = a == label
    B = b == label
    total = int(A.sum()) + int(B.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(A, B).sum()) / total


def mean_dice(a, b, labels) -> float:
    return float(np.mean([dice(a, b, l) for l in labels]))


def invert_field(field: np.ndarray, iterations: int = 50) -> np.ndarray:
    """Fixed-point inverse ``w(q) = -u(q + w(q))`` of a small smooth displacement."""
    field = np.asarray(field, dtype=np.float64)
    inv = -field.copy()
    for _ in range(iterations):
        inv = -np.stack([warp_trilinear_array(field[c], inv) for c in range(3)])
    return inv


@dataclass
class EvalReport:
    labels: list[int]
    registration_dice: dict[str, float]
    segmentation_dice: dict[str, float]
    baseline_dice: dict[str, float]
    mean_registration_dice: float
    mean_segmentation_dice: float
    mean_baseline_dice: float
    seam_stitched: float
    seam_naive: float
    wall_ms: float
    seed: int
    config: dict
    oracle_dice: dict[str, float] | None = None
    mean_oracle_dice: float | None = None
    per_pair: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def evaluate(params: ModelParams, atlas: ScalarVolume, atlas_mask: LabelVolume, pairs: list[Pair], n: int,
             use_stitcher: bool | None = None, seed: int = 0, config: dict | None = None) -> EvalReport:
    """Registration and atlas-based segmentation Dice over test pairs.

    Registration: the moving mask warped by the moving->atlas field against
    the atlas mask. Segmentation: the atlas mask warped by the atlas->moving
    field against the moving image's ground-truth mask. Means skip label 0.
    """
    t0 = time.perf_counter()
    labels = sorted(int(l) for l in np.unique(atlas_mask.data) if l != 0)
    acc = {k: {l: [] for l in labels} for k in ("reg", "seg", "base", "oracle")}
    seams_s, seams_n = [], []
    per_pair = []
    for k, pair in enumerate(pairs):
        z_xy, z_yx, naive_xy, naive_yx = predict_fields(params, pair.moving.data, atlas.data, n, use_stitcher)
        reg = warp_labels_nn(pair.moving_mask.data, z_xy)
        seg = warp_labels_nn(atlas_mask.data, z_yx)
        row = {"pair": k}
        for l in labels:
            acc["reg"][l].append(dice(reg, atlas_mask.data, l))
            acc["seg"][l].append(dice(seg, pair.moving_mask.data, l))
            acc["base"][l].append(dice(pair.moving_mask.data, atlas_mask.data, l))
        if pair.gt_field is not None:
            inv = invert_field(pair.gt_field)
            rec = warp_labels_nn(pair.moving_mask.data, inv)
            for l in labels:
                acc["oracle"][l].append(dice(rec, atlas_mask.data, l))
        row["segmentation"] = mean_dice(seg, pair.moving_mask.data, labels)
        row["registration"] = mean_dice(reg, atlas_mask.data, labels)
        row["baseline"] = mean_dice(pair.moving_mask.data, atlas_mask.data, labels)
        per_pair.append(row)
        seams_s.append(seam_discontinuity(z_xy, n))
        seams_s.append(seam_discontinuity(z_yx, n))
        seams_n.append(seam_discontinuity(naive_xy, n))
        seams_n.append(seam_discontinuity(naive_yx, n))

    def summary(key):
        per_label = {str(l): float(np.mean(v)) for l, v in acc[key].items()} if all(acc[key].values()) else None
        return per_label, (float(np.mean(list(per_label.values()))) if per_label else None)

    reg_d, reg_m = summary("reg")
    seg_d, seg_m = summary("seg")
    base_d, base_m = summary("base")
    orc_d, orc_m = summary("oracle")
    return EvalReport(
        labels=labels,
        registration_dice=reg_d,
        segmentation_dice=seg_d,
        baseline_dice=base_d,
        mean_registration_dice=reg_m,
        mean_segmentation_dice=seg_m,
        mean_baseline_dice=base_m,
        seam_stitched=float(np.mean(seams_s)),
        seam_naive=float(np.mean(seams_n)),
        wall_ms=round((time.perf_counter() - t0) * 1000.0, 3),
        seed=int(seed),
        config=config or {},
        oracle_dice=orc_d,
        mean_oracle_dice=orc_m,
        per_pair=per_pair,
    )


def load_model(path) -> tuple[ModelParams, dict]:
    params, extra, _ = load_checkpoint(path)
    return params, extra
