"""Command-line interface.

Subcommands: generate, train, evaluate, infer, sweep, dwt, keypoints.
Run configuration comes from an optional JSON file mirrored by --key value
overrides; every contract violation exits nonzero with a one-line
diagnostic.  FASS_THREADS caps worker parallelism where it applies.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import multiprocessing
import os
import sys
from pathlib import Path

import numpy as np

from .edges import ECConfig, truth_keypoints
from .errors import ConfigError, FassError
from .phantom import PhantomSpec, Volume, generate_phantom, list_volumes, read_volume, write_volume
from .training import (
    RunConfig,
    evaluate_volumes,
    load_network,
    predict_volume,
    sweep,
    train,
)
from .wavelets import basis_names, dwt_slicewise, get_basis
from .engine import Tensor


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FASS_THREADS", "1")))
    except ValueError:
        return 1


_BOOL_FIELDS = {"fa", "flfe", "ec", "fa_detach_bg", "ec_ce_band"}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with RunConfig fields")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in _BOOL_FIELDS:
            parser.add_argument(flag, choices=["on", "off"], default=None)
        else:
            parser.add_argument(flag, type=type(f.default) if f.default != "" else str, default=None)


def _build_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        values.update(json.loads(Path(args.config).read_text()))
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is None:
            continue
        values[f.name] = (v == "on") if f.name in _BOOL_FIELDS else v
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        spec = PhantomSpec(
            dims=(args.dims,) * 3,
            contrast_delta=args.contrast_delta,
            noise_sigma=args.noise_sigma,
            texture_amp=args.texture_amp,
            seed=args.seed + i,
        )
        vol = generate_phantom(spec)
        write_volume(out / f"phantom_{args.seed + i:05d}", vol)
    print(f"wrote {args.count} phantom volumes to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    if not cfg.data_dir:
        raise ConfigError("train needs --data-dir (or data_dir in the config file)")
    log_path = Path(cfg.out_dir) / "train_log.jsonl"
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    result = train(cfg, resume=args.resume, log_path=log_path)
    print(f"finished {cfg.iterations} iterations; checkpoint at {result.checkpoint_path}")
    return 0


def _eval_worker(payload):
    ckpt, cfg_values, stem = payload
    cfg = RunConfig(**cfg_values)
    net = load_network(ckpt, cfg)
    vol = read_volume(stem)
    from .metrics import evaluate_metrics

    pred = predict_volume(net, vol, cfg)
    return evaluate_metrics(pred, vol.labels, vol.spacing_mm, cfg.num_classes)


def _cmd_evaluate(args) -> int:
    cfg = _build_config(args)
    stems = list_volumes(args.test_dir)
    if not stems:
        raise ConfigError(f"no test volumes in {args.test_dir!r}")
    workers = min(_threads(), len(stems))
    payloads = [(args.checkpoint, dataclasses.asdict(cfg), str(s)) for s in stems]
    if workers > 1:
        with multiprocessing.Pool(workers) as pool:
            reports = pool.map(_eval_worker, payloads)
    else:
        reports = [_eval_worker(p) for p in payloads]
    from .metrics import aggregate_reports

    agg = aggregate_reports(reports)
    text = json.dumps(agg, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_infer(args) -> int:
    cfg = _build_config(args)
    net = load_network(args.checkpoint, cfg)
    vol = read_volume(args.volume)
    pred = predict_volume(net, vol, cfg)
    write_volume(args.out, Volume(vol.intensities, pred, vol.spacing_mm))
    print(f"wrote prediction to {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _build_config(args)
    train_vols = [read_volume(s) for s in list_volumes(cfg.data_dir)]
    test_vols = [read_volume(s) for s in list_volumes(args.test_dir)]
    if not train_vols or not test_vols:
        raise ConfigError("sweep needs nonempty train and test volume directories")
    if args.parameter == "wavelet":
        values = args.values
    elif args.parameter == "bg_size":
        values = [int(v) for v in args.values]
    else:
        values = [float(v) for v in args.values]
    rows = sweep(cfg, args.parameter, values, train_vols, test_vols, args.out)
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def _write_pgm(path: Path, img: np.ndarray) -> None:
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    data = (scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def _cmd_dwt(args) -> int:
    vol = read_volume(args.volume)
    basis = get_basis(args.wavelet)
    feat = Tensor(vol.intensities[None])
    bands = dwt_slicewise(feat, basis)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    idx = args.slice if args.slice is not None else vol.intensities.shape[0] // 2
    for name, band in zip("LHVD", bands.bands()):
        _write_pgm(out / f"{name}_{idx:03d}.pgm", band.data[0, idx])
    print(f"wrote L/H/V/D slices {idx} to {out}")
    return 0


def _cmd_keypoints(args) -> int:
    vol = read_volume(args.volume)
    cfg = ECConfig(radius=args.ec_radius, nms_k=args.ec_k, edges=args.ec_edges)
    tk = truth_keypoints(vol.labels, cfg, intensities=vol.intensities)
    with open(args.out, "w") as fh:
        fh.write("x,y,z,p,s\n")
        for (x, y, z), p, s in zip(tk.points, tk.ratios, tk.scores):
            fh.write(f"{x},{y},{z},{p:.6f},{s:.6f}\n")
    print(f"wrote {len(tk.points)} keypoints to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fass", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate synthetic phantom volumes")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--dims", type=int, default=96)
    g.add_argument("--contrast-delta", type=float, default=PhantomSpec.contrast_delta)
    g.add_argument("--noise-sigma", type=float, default=PhantomSpec.noise_sigma)
    g.add_argument("--texture-amp", type=float, default=PhantomSpec.texture_amp)
    g.set_defaults(fn=_cmd_generate)

    t = sub.add_parser("train", help="train a model")
    _add_config_flags(t)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on test volumes")
    _add_config_flags(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--test-dir", required=True)
    e.add_argument("--out")
    e.set_defaults(fn=_cmd_evaluate)

    i = sub.add_parser("infer", help="segment one volume")
    _add_config_flags(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--volume", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=_cmd_infer)

    s = sub.add_parser("sweep", help="train/evaluate across a parameter grid")
    _add_config_flags(s)
    s.add_argument("--parameter", choices=["alpha", "wavelet", "bg_size"], required=True)
    s.add_argument("--values", nargs="+", required=True)
    s.add_argument("--test-dir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_sweep)

    d = sub.add_parser("dwt", help="dump wavelet subband slices as PGM images")
    d.add_argument("--volume", required=True)
    d.add_argument("--wavelet", choices=basis_names(), default="db2")
    d.add_argument("--out", required=True)
    d.add_argument("--slice", type=int)
    d.set_defaults(fn=_cmd_dwt)

    k = sub.add_parser("keypoints", help="dump retained boundary keypoints as CSV")
    k.add_argument("--volume", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--ec-radius", type=int, default=5)
    k.add_argument("--ec-k", type=int, default=10)
    k.add_argument("--ec-edges", choices=["mask", "image"], default="mask")
    k.set_defaults(fn=_cmd_keypoints)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FassError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
