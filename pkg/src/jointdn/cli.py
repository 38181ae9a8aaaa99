"""Command-line entry point: ``jointdn <command> ...``.

Commands: gen-data, train, denoise, eval, mask-study. Every command accepts
``--config FILE`` (``key=value`` lines, ``#`` comments) and repeated
``--set key=value`` overrides; explicit flags win over both.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data as D
from . import eval as E
from . import nn
from . import pipeline as P
from .blindspot import POSITIONS, derive_seed, make_mask_plan

log = logging.getLogger("jointdn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _fmt(value) -> str:
    if isinstance(value, list):
        return ",".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], object]
    default: object
    help: str


SCHEMA: dict[str, Key] = {
    "seed": Key(int, 0, "global seed (falls back to $JNT_SEED)"),
    "lr": Key(float, 7e-4, "Adam learning rate"),
    "steps": Key(int, 300, "training steps"),
    "mask_count": Key(int, 169, "masked pixels per step"),
    "mask_position": Key(_choice(*POSITIONS), "random", "masked pixel inside each cell"),
    "w1": Key(float, None, "denoising loss weight (mode default if unset)"),
    "w2": Key(float, None, "task loss weight (mode default if unset)"),
    "weak_fraction": Key(float, 0.2, "fraction of steps used for weak segmentation pretraining"),
    "log_every": Key(int, 1, "log one row every N steps"),
    "scales": Key(int, 2, "U-Net downsampling levels"),
    "base_width": Key(int, 8, "channels at the first level"),
    "seg_checkpoint": Key(str, "", "frozen segmentation branch (unsupervised mode)"),
    "seg_objective": Key(_choice("bce", "mse"), "mse", "loss for --mode pretrain-seg"),
    "count": Key(int, 16, "gen-data: number of images"),
    "size": Key(int, 64, "gen-data: image side length"),
    "style": Key(_choice(*D.STYLES), "soma", "gen-data: blob style"),
    "sigma": Key(_floats, [0.2], "gen-data: noise std list"),
    "blob_min": Key(int, 2, "gen-data: minimum blobs per image"),
    "blob_max": Key(int, 5, "gen-data: maximum blobs per image"),
    "min_area": Key(int, E.MIN_AREA, "eval: minimum detection area"),
    "mask_counts": Key(_ints, [1, 169], "mask-study: mask counts"),
    "replicates": Key(int, 5, "mask-study: replicates per count"),
    "workers": Key(int, 1, "mask-study: parallel worker processes"),
}


def parse_config_text(text: str, source: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(config_file: str | None, overrides: Sequence[str], flags: dict[str, object]) -> dict[str, object]:
    """Merge defaults < $JNT_SEED < config file < --set < explicit flags."""
    raw: dict[str, str] = {}
    if "JNT_SEED" in os.environ:
        raw["seed"] = os.environ["JNT_SEED"]
    if config_file:
        path = Path(config_file)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        raw.update(parse_config_text(path.read_text(), str(path)))
    raw.update(parse_config_text("\n".join(overrides), "--set"))

    cfg = {k: v.default for k, v in SCHEMA.items()}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise UsageError(f"unknown config key {key!r}")
        if value == "" and SCHEMA[key].default is None:
            cfg[key] = None
            continue
        try:
            cfg[key] = SCHEMA[key].parse(value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {value!r} ({exc})") from None
    cfg.update({k: v for k, v in flags.items() if v is not None})
    return cfg


def write_effective_config(cfg: dict[str, object], out_dir: Path) -> None:
    lines = [f"{k}={'' if v is None else _fmt(v)}" for k, v in cfg.items()]
    (out_dir / "effective_config.txt").write_text("\n".join(lines) + "\n")


def _train_config(cfg: dict, mode: str, **extra) -> P.TrainConfig:
    try:
        return P.TrainConfig(mode=mode, lr=cfg["lr"], steps=cfg["steps"], mask_count=cfg["mask_count"],
                             mask_position=cfg["mask_position"], w1=cfg["w1"], w2=cfg["w2"], seed=cfg["seed"],
                             weak_fraction=cfg["weak_fraction"], log_every=cfg["log_every"], **extra)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def _load(root: str, require_labels: bool = False) -> list[D.ImageSample]:
    try:
        samples = D.load_dataset(root, require_labels=require_labels)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc)) from None
    if not samples:
        raise DataError(f"{root}: dataset is empty")
    return samples


def _load_checkpoint(path: str, what: str) -> nn.Network:
    if not path or not Path(path).is_file():
        raise DataError(f"{what} checkpoint not found: {path or '(not given)'}")
    try:
        return nn.load_checkpoint(path)
    except ValueError as exc:
        raise DataError(f"{what} checkpoint rejected: {exc}") from None


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args.config, args.set, {
        "count": args.count, "size": args.size, "style": args.style,
        "sigma": _floats(args.sigma) if args.sigma else None, "seed": args.seed,
    })
    out = Path(args.out)
    _prepare_out(out, args.force)
    try:
        samples = D.gen_blobs(cfg["count"], cfg["size"], (cfg["blob_min"], cfg["blob_max"]), cfg["style"], cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = D.write_dataset(samples, cfg["sigma"], out, cfg["seed"])
    write_effective_config(cfg, out)
    log.info("wrote %d manifest rows to %s", len(rows), out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set, {"seed": args.seed, "steps": args.steps,
                                                 "seg_checkpoint": args.seg})
    out = Path(args.out)
    _prepare_out(out, args.force)
    mode = args.mode
    # validate before any data access so usage errors win
    tcfg = _train_config(cfg, {"n2v": "n2v", "supervised": "supervised_joint",
                               "unsupervised": "unsupervised_joint", "pretrain-seg": "pretrain_seg"}[mode])
    scales, width = cfg["scales"], cfg["base_width"]

    if mode == "n2v":
        samples = _load(args.data)
        dn = nn.build_unet(1, 1, scales, width, "residual", seed=cfg["seed"])
        dn, trace = P.train_n2v(dn, [s.noisy for s in samples], tcfg)
        nn.save_checkpoint(dn, out / "denoiser.ckpt")
    elif mode == "supervised":
        samples = _load(args.data, require_labels=True)
        pairs = [(s.noisy, s.label) for s in samples]
        seg = nn.build_unet(1, 1, scales, width, "sigmoid", seed=derive_seed(cfg["seed"], 1))
        seg = P.pretrain_segmentation(seg, pairs, tcfg, objective="bce")
        dn = nn.build_unet(1, 1, scales, width, "residual", seed=cfg["seed"])
        dn, seg, trace = P.train_supervised_joint(dn, seg, pairs, tcfg)
        nn.save_checkpoint(dn, out / "denoiser.ckpt")
        nn.save_checkpoint(seg, out / "seg.ckpt")
    elif mode == "unsupervised":
        if not cfg["seg_checkpoint"]:
            raise DataError("unsupervised mode needs a pretrained frozen segmentation branch (--seg or seg_checkpoint)")
        seg = _load_checkpoint(cfg["seg_checkpoint"], "frozen segmentation")
        if not seg.frozen:
            raise DataError(f"{cfg['seg_checkpoint']}: segmentation branch is not frozen")
        samples = _load(args.data)
        dn = nn.build_unet(1, 1, scales, width, "residual", seed=cfg["seed"])
        dn, trace = P.train_unsupervised_joint(dn, seg, [s.noisy for s in samples], tcfg)
        nn.save_checkpoint(dn, out / "denoiser.ckpt")
    else:
        samples = _load(args.data, require_labels=True)
        seg = nn.build_unet(1, 1, scales, width, "sigmoid", seed=derive_seed(cfg["seed"], 1))
        seg = P.pretrain_segmentation(seg, [(s.noisy, s.label) for s in samples], tcfg, objective=cfg["seg_objective"])
        nn.save_checkpoint(seg, out / "seg.ckpt")
        trace = None

    if trace is not None:
        trace.write_csv(out / "train_log.csv")
    write_effective_config(cfg, out)
    return EXIT_OK


def cmd_denoise(args) -> int:
    net = _load_checkpoint(args.model, "denoiser")
    if net.head != "residual" or net.in_channels != 1:
        raise DataError(f"{args.model}: not a single-channel denoiser (head={net.head})")
    src, out = Path(args.inp), Path(args.out)
    if not src.is_dir():
        raise DataError(f"input directory not found: {src}")
    out.mkdir(parents=True, exist_ok=True)
    for path in sorted(src.glob("*.pgm")):
        try:
            img = D.load_pgm(path)
            den = P.denoise(net, img)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None
        D.save_pgm(den, out / path.name)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args.config, args.set, {})
    dn = _load_checkpoint(args.denoiser, "denoiser")
    seg = _load_checkpoint(args.seg, "segmentation") if args.seg else None
    samples = _load(args.data)
    try:
        summary, _ = E.evaluate_dataset(
            lambda img: P.denoise(dn, img),
            (lambda img: P.segment(seg, img)) if seg is not None else None,
            samples, args.out, min_area=cfg["min_area"])
    except ValueError as exc:
        raise DataError(str(exc)) from None
    print(",".join(summary.row()))
    return EXIT_OK


def _replicate(job: tuple) -> tuple[int, int, list[float]]:
    count, rep, seed, images, cfg = job
    net = nn.build_unet(1, 1, cfg["scales"], cfg["base_width"], "residual", seed=seed)
    tcfg = P.TrainConfig(mode="n2v", lr=cfg["lr"], steps=cfg["steps"], mask_count=count,
                         mask_position=cfg["mask_position"], seed=seed, log_every=1)
    _, trace = P.train_n2v(net, images, tcfg)
    return count, rep, [r[3] for r in trace.rows]


def mask_study_summary(losses: np.ndarray) -> tuple[float, float]:
    """(variance of final-quartile mean loss across replicates, mean per-step variance)."""
    tail = losses[:, losses.shape[1] * 3 // 4:].mean(axis=1)
    return float(np.var(tail)), float(np.var(losses, axis=0).mean())


def run_mask_study(images: Sequence[np.ndarray], counts: Sequence[int], replicates: int, cfg: dict,
                   out_csv: str | Path, workers: int = 1) -> dict[int, tuple[float, float]]:
    if replicates < 2:
        raise UsageError(f"mask-study needs at least 2 replicates, got {replicates}")
    h, w = np.shape(images[0])
    for k in counts:
        try:
            make_mask_plan(h, w, k, 0)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    jobs = [(k, r, derive_seed(cfg["seed"], k, r), list(images), cfg) for k in counts for r in range(replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate, jobs))
    else:
        results = [_replicate(j) for j in jobs]

    summary = {}
    with open(out_csv, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["kind", "mask_count", "replicate", "step", "loss", "tail_variance", "step_variance"])
        for k in counts:
            runs = [res for res in results if res[0] == k]
            for _, rep, losses in runs:
                for step, loss in enumerate(losses):
                    wr.writerow(["loss", k, rep, step, repr(loss), "", ""])
            tail_var, step_var = mask_study_summary(np.array([res[2] for res in runs]))
            summary[k] = (tail_var, step_var)
            wr.writerow(["summary", k, "", "", "", repr(tail_var), repr(step_var)])
    return summary


def cmd_mask_study(args) -> int:
    cfg = resolve_config(args.config, args.set, {
        "mask_counts": _ints(args.mask_counts) if args.mask_counts else None,
        "replicates": args.replicates, "steps": args.steps, "workers": args.workers, "seed": args.seed,
    })
    if cfg["steps"] < 1:
        raise UsageError("steps must be >= 1")
    samples = _load(args.data)
    run_mask_study([s.noisy for s in samples], cfg["mask_counts"], cfg["replicates"], cfg, args.out,
                   workers=max(1, cfg["workers"]))
    write_effective_config(cfg, Path(args.out).parent)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointdn", description="Joint blind-spot denoising and segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")

    p = sub.add_parser("gen-data", help="write a synthetic PGM dataset and manifest")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--style", choices=D.STYLES)
    p.add_argument("--sigma", help="comma-separated noise std values")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a denoiser / segmentation model")
    common(p)
    p.add_argument("--mode", required=True, choices=["n2v", "supervised", "unsupervised", "pretrain-seg"])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seg", help="frozen segmentation checkpoint (unsupervised mode)")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise every PGM in a directory")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="write a per-image metrics CSV")
    common(p)
    p.add_argument("--denoiser", required=True)
    p.add_argument("--seg")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mask-study", help="loss stability versus masked-pixel count")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--mask-counts")
    p.add_argument("--replicates", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask_study)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"jointdn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"jointdn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"jointdn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
