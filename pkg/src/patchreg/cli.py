"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 configuration or input
error, 3 I/O error, 4 non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, parse_config
from .errors import ConfigError, HeaderMismatch, NonFiniteLoss, PatchRegError, UnsupportedDtype
from .network import init_params
from .training import Pair, PairSampler, evaluate, load_model, make_dataset, predict_fields, train
from .volume_io import (
    LabelVolume,
    ScalarVolume,
    VolumeHeader,
    ensure_dir,
    field_volume,
    image_volume,
    load,
    save,
)
from .warp import warp_labels_nn, warp_trilinear_array

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("patchreg")


class IOFailure(Exception):
    pass


def _out_dir(path) -> Path:
    try:
        return ensure_dir(path)
    except OSError as exc:
        raise IOFailure(str(exc)) from None


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- data directory layout ------------------------------------------------------------
def write_dataset(cfg: RunConfig, out: Path) -> dict:
    ds = make_dataset(cfg.phantom, cfg.data.n_train, cfg.data.n_test)
    save(out / "atlas.rvol", ds.atlas)
    save(out / "atlas_mask.rvol", ds.atlas_mask)
    for k, pair in enumerate(ds.train + ds.test):
        save(out / f"moving_{k}.rvol", pair.moving)
        save(out / f"moving_mask_{k}.rvol", pair.moving_mask)
        save(out / f"gt_field_{k}.rvol", field_volume(pair.gt_field))
    index = {
        "train": list(range(cfg.data.n_train)),
        "test": list(range(cfg.data.n_train, cfg.data.n_train + cfg.data.n_test)),
        "config": cfg.to_dict(),
    }
    _write_json(out / "dataset.json", index)
    return index


def read_dataset(data: Path, split: str):
    try:
        index = json.loads((data / "dataset.json").read_text(encoding="utf-8"))
        atlas = load(data / "atlas.rvol")
        atlas_mask = load(data / "atlas_mask.rvol")
        pairs = []
        for k in index[split]:
            gt_path = data / f"gt_field_{k}.rvol"
            gt = load(gt_path).data if gt_path.exists() else None
            pairs.append(Pair(load(data / f"moving_{k}.rvol"), load(data / f"moving_mask_{k}.rvol"), gt))
    except (OSError, KeyError, json.JSONDecodeError, HeaderMismatch, UnsupportedDtype) as exc:
        raise IOFailure(f"cannot read dataset in {data}: {exc}") from None
    return atlas, atlas_mask, pairs


def _load_volume(path, kind):
    try:
        vol = load(path)
    except (OSError, json.JSONDecodeError, HeaderMismatch, UnsupportedDtype) as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from None
    if not isinstance(vol, kind):
        raise ConfigError(f"{path} is not a {kind.__name__}")
    return vol


def _load_checkpoint(path):
    try:
        return load_model(path)
    except (OSError, KeyError, json.JSONDecodeError, HeaderMismatch) as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from None


def _inference_settings(extra: dict) -> tuple[int, bool]:
    train_cfg = extra.get("train", {})
    return int(train_cfg.get("n", 2)), bool(train_cfg.get("use_stitcher", True))


# -- commands -----------------------------------------------------------------------
def cmd_phantom(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args.out)
    write_dataset(cfg, out)
    log.info("wrote phantom dataset to %s", out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args.out)
    atlas, atlas_mask, pairs = read_dataset(Path(args.data), "train")
    if atlas.data.shape != tuple(cfg.phantom.dims):
        log.info("data dims %s differ from config phantom dims %s", atlas.data.shape, tuple(cfg.phantom.dims))
    tc = cfg.train
    patch_dims = tuple(d // tc.n for d in atlas.data.shape)
    dtype = np.float32
    try:
        params = init_params(cfg.net, patch_dims, seed=tc.seed, dtype=dtype, stitch=cfg.stitch)
    except (ValueError, PatchRegError) as exc:
        raise ConfigError(str(exc)) from None
    _write_json(out / "config.json", cfg.to_dict())

    def report(rec):
        log.info("epoch %d lr %.1e loss %.5f (recon %.5f smooth %.5f contrast %.5f)", rec["epoch"], rec["lr"],
                 rec["loss_total"], rec["loss_recon"], rec["loss_smooth"], rec["loss_contrast"])

    source = pairs
    if cfg.data.resample_train:
        try:
            index = json.loads((Path(args.data) / "dataset.json").read_text(encoding="utf-8"))
            spec = parse_config({"phantom": index["config"]["phantom"]}).phantom
        except (KeyError, TypeError) as exc:
            raise IOFailure(f"dataset.json lacks the phantom config: {exc}") from None
        source = PairSampler(atlas, atlas_mask, spec, pairs)
    train(tc, params, atlas, source, out, echo=cfg.to_dict(), log=report)
    return EXIT_OK


def _predict(args):
    params, extra = _load_checkpoint(args.checkpoint)
    moving = _load_volume(args.moving, ScalarVolume)
    fixed = _load_volume(args.fixed, ScalarVolume)
    n, use_stitcher = _inference_settings(extra)
    z_xy, z_yx, _, _ = predict_fields(params, moving.data, fixed.data, n, use_stitcher)
    return params, extra, moving, fixed, z_xy, z_yx


def cmd_register(args) -> int:
    out = _out_dir(args.out)
    _, extra, moving, fixed, z_xy, z_yx = _predict(args)
    spacing = moving.header.spacing
    save(out / "field_xy.rvol", field_volume(z_xy.astype(np.float32), spacing))
    save(out / "field_yx.rvol", field_volume(z_yx.astype(np.float32), spacing))
    warped = warp_trilinear_array(moving.data, z_xy.astype(moving.data.dtype))
    save(out / "warped_moving.rvol", image_volume(warped.astype(np.float32), spacing))
    _write_json(out / "register.json", {"checkpoint": str(args.checkpoint), "config": extra.get("config", {})})
    return EXIT_OK


def cmd_segment(args) -> int:
    out = _out_dir(args.out)
    fixed_mask = _load_volume(args.fixed_mask, LabelVolume)
    _, extra, moving, _, _, z_yx = _predict(args)
    pred = warp_labels_nn(fixed_mask.data, z_yx)
    header = VolumeHeader(**fixed_mask.header.to_dict())
    save(out / "predicted_mask.rvol", LabelVolume(header, pred))
    _write_json(out / "segment.json", {"checkpoint": str(args.checkpoint), "config": extra.get("config", {})})
    return EXIT_OK


def cmd_eval(args) -> int:
    params, extra = _load_checkpoint(args.checkpoint)
    atlas, atlas_mask, pairs = read_dataset(Path(args.data), "test")
    n, use_stitcher = _inference_settings(extra)
    seed = int(extra.get("train", {}).get("seed", 0))
    report = evaluate(params, atlas, atlas_mask, pairs, n, use_stitcher, seed=seed, config=extra.get("config", {}))
    out = Path(args.out)
    if not out.parent.is_dir():
        raise IOFailure(f"directory {out.parent} does not exist")
    out.write_text(report.to_json(), encoding="utf-8")
    log.info("segmentation dice %.4f (baseline %.4f)", report.mean_segmentation_dice, report.mean_baseline_dice)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks

    results = run_checks(seeds=args.seeds, only=args.only, emit=print)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(load_config(args.config).to_json())
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="patchreg", description="Patchwise registration with attention stitching.", formatter_class=fmt)
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads; keep it fixed when comparing runs bit for bit")
    p.add_argument("--quiet", action="store_true", help="only print warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate a synthetic dataset", formatter_class=fmt)
    s.add_argument("--config", default=None, help="JSON run config (defaults used when omitted)")
    s.add_argument("--out", required=True, help="existing output directory")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train", help="train on a phantom dataset", formatter_class=fmt)
    s.add_argument("--config", default=None, help="JSON run config (defaults used when omitted)")
    s.add_argument("--data", required=True, help="directory written by `phantom`")
    s.add_argument("--out", required=True, help="existing output directory for metrics and checkpoints")
    s.set_defaults(func=cmd_train)

    for name, helptext in (("register", "predict fields and warp the moving image"), ("segment", "transfer the fixed mask onto the moving image")):
        s = sub.add_parser(name, help=helptext, formatter_class=fmt)
        s.add_argument("--checkpoint", required=True, help="checkpoint directory")
        s.add_argument("--moving", required=True, help="moving image (.rvol)")
        s.add_argument("--fixed", required=True, help="fixed image (.rvol)")
        if name == "segment":
            s.add_argument("--fixed-mask", required=True, help="label map of the fixed image (.rvol)")
        s.add_argument("--out", required=True, help="existing output directory")
        s.set_defaults(func=cmd_register if name == "register" else cmd_segment)

    s = sub.add_parser("eval", help="Dice evaluation on the test split", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="checkpoint directory")
    s.add_argument("--data", required=True, help="directory written by `phantom`")
    s.add_argument("--out", required=True, help="report file (JSON)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("verify", help="run gradient, roundtrip and closed-form checks", formatter_class=fmt)
    s.add_argument("--seeds", type=int, default=100, help="random seeds per gradient check")
    s.add_argument("--only", nargs="*", default=None, help="run checks whose name contains any of these substrings")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("config", help="print the fully resolved config", formatter_class=fmt)
    s.add_argument("--config", default=None, help="JSON run config")
    s.set_defaults(func=cmd_config)
    return p


def _thread_limit(threads):
    if not threads:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(threads))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr, force=True)
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        log.error("non-finite loss: %s", exc)
        return EXIT_NUMERIC
    except (IOFailure, OSError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except PatchRegError as exc:
        log.error("input error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
