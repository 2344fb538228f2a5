"""Command-line entry point: synth, extract, train, score, eval, ablate, sweep-k."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

from . import synth, track_io
from .evaluation import evaluate, format_report
from .features import FEATURE_GROUPS, FEATURE_NAMES, compute_features, group_mask
from .model import load_model, save_model
from .pipeline import Timer, build_segments, load_split, score
from .preprocess import segment_track, smooth_track
from .training import TrainConfig, train

logger = logging.getLogger("trajvad")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


@contextmanager
def stage(name: str, timer: Timer | None = None):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # surfaced with the stage name, exit code 1
        raise StageError(name, exc) from exc
    finally:
        if timer is not None:
            timer.add(name, time.perf_counter() - t0)


# ---------------------------------------------------------------- config

_TRAIN_FLAGS = {
    # flag name -> (TrainConfig field, type)
    "variant": ("variant", str), "K": ("K", int), "K-p": ("K_p", int), "T": ("T", int),
    "E": ("E", int), "mu0": ("mu0", float), "lam": ("lam", float), "epochs": ("epochs", int),
    "batch-size": ("batch_size", int), "lr": ("lr", float), "lr-min": ("lr_min", float),
    "clip-norm": ("clip_norm", float), "hidden": ("hidden", int), "s-max": ("s_max", float),
    "person-class": ("person_class", int), "val-fraction": ("val_fraction", float),
    "patience": ("patience", int),
}


def read_config_file(path) -> dict:
    """Flat ``key=value`` file; blank lines and ``#`` comments are ignored."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ValueError(f"{path}:{n}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def _coerce(key: str, value: str):
    default = getattr(TrainConfig(), key)
    if key == "feature_mask":
        return tuple(v.strip() in ("1", "true", "True") for v in value.split(","))
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def build_train_config(args, **overrides) -> TrainConfig:
    """Merge defaults < config file < flags < ``overrides``."""
    merged = TrainConfig().to_dict()
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    for flag, (name, _) in _TRAIN_FLAGS.items():
        value = getattr(args, flag.replace("-", "_"), None)
        if value is not None:
            merged[name] = value
    if args.seed is not None:
        merged["seed"] = args.seed
    if getattr(args, "drop_group", None):
        merged["feature_mask"] = list(group_mask(*args.drop_group))
    merged.update(overrides)
    return TrainConfig.from_dict(merged)


# ---------------------------------------------------------------- parser

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--time", action="store_true", help="print per-stage timing to stderr")
    p.add_argument("--verbose", "-v", action="store_true", help="log training progress")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file of training settings")
    for flag, (name, typ) in _TRAIN_FLAGS.items():
        kw = {"choices": ("t", "p")} if name == "variant" else {}
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=typ, default=None,
                       help=f"override {name} (default {getattr(TrainConfig(), name)})", **kw)
    p.add_argument("--drop-group", action="append", choices=sorted(FEATURE_GROUPS),
                   help="remove a feature group (repeatable)")


def _add_data(p: argparse.ArgumentParser, name: str = "data", required: bool = True) -> None:
    p.add_argument(f"--{name}", required=required,
                   help="directory with tracks.csv, meta.csv and optional poses.csv, labels.txt")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajvad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded train/test scenario")
    p.add_argument("--out", required=True, help="output directory (train/ and test/ inside)")
    p.add_argument("--preset", default="benchmark", choices=sorted(synth.PRESETS))
    p.add_argument("--train-videos", type=int, default=20)
    p.add_argument("--test-videos", type=int, default=10)
    p.add_argument("--anomaly-rate", type=float, default=0.3)
    p.add_argument("--no-pose", action="store_true", help="skip synthetic keypoints")
    _add_common(p)

    p = sub.add_parser("extract", help="dump per-frame window features")
    _add_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--T", type=int, default=16)
    p.add_argument("--stride", type=int, default=16)
    _add_common(p)

    p = sub.add_parser("train", help="fit a flow model on normal tracks")
    _add_data(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("score", help="frame-level anomaly scores from a checkpoint")
    p.add_argument("--model", required=True)
    _add_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=("t", "p"), default=None,
                   help="expected checkpoint variant (checked when given)")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--smooth-sigma", type=float, default=0.0)
    _add_common(p)

    p = sub.add_parser("eval", help="AUROC / AP of a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", help="also write the report here")
    _add_common(p)

    for name, helptext in (("ablate", "leave-one-group-out comparison"),
                           ("sweep-k", "AUROC as a function of flow depth K")):
        p = sub.add_parser(name, help=helptext)
        _add_data(p, "train")
        _add_data(p, "test")
        _add_train_flags(p)
        p.add_argument("--stride", type=int, default=1)
        p.add_argument("--smooth-sigma", type=float, default=0.0)
        if name == "ablate":
            p.add_argument("--group", action="append", required=True,
                           choices=sorted(FEATURE_GROUPS), help="group(s) to drop")
        else:
            p.add_argument("--values", default="6,10,14,18,22",
                           help="comma-separated K values")
        _add_common(p)
    return parser


# ---------------------------------------------------------------- commands

def cmd_synth(args, timer):
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    tr, te = synth.benchmark_scenarios(args.preset, seed, args.train_videos, args.test_videos,
                                       args.anomaly_rate)
    if args.no_pose:
        tr.with_pose = te.with_pose = False
    for cfg, name in ((tr, "train"), (te, "test")):
        with stage(f"synth:{name}", timer):
            scene = synth.generate(cfg)
            scene.write(out / name)
        print(f"{name}: {cfg.videos} videos, {len(scene.detections)} detections -> {out / name}")
    return 0


def cmd_extract(args, timer):
    with stage("load", timer):
        split = load_split(args.data)
    n_frames = 0
    with stage("preprocess", timer), open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "track_id", "start_frame", "t", "class_id", *FEATURE_NAMES])
        for track in split.tracks:
            for win in segment_track(smooth_track(track), args.T, args.stride):
                feats = compute_features(win)
                for t, row in enumerate(feats):
                    w.writerow([track.video_id, track.track_id, win.start_frame, t,
                                track.class_id, *(repr(float(v)) for v in row)])
                n_frames += len(feats)
    timer.counts["frames"] = n_frames
    print(f"wrote {n_frames} feature rows to {args.out}")
    return 0


def _train(cfg: TrainConfig, split, timer, verbose=False):
    with stage("preprocess", timer):
        segs = build_segments(split.tracks, cfg.T, 1, person_class=cfg.person_class,
                              with_pose=cfg.variant == "p")
    timer.counts["frames"] = timer.counts.get("frames", 0) + sum(len(t) for t in split.tracks)
    timer.counts["train_segments"] = timer.counts.get("train_segments", 0) + len(segs)
    with stage("train", timer):
        model = train(cfg, segs, log_every=10 if verbose else 0)
    return model


def _score(model, split, args, timer):
    with stage("score", timer):
        sub = Timer()
        series, n = score(model, split, args.stride, args.smooth_sigma, sub)
    for k, v in sub.stages.items():
        timer.add(f"score:{k}", v)
    timer.counts["segments"] = timer.counts.get("segments", 0) + n
    timer.counts["score_frames"] = (timer.counts.get("score_frames", 0)
                                    + sum(len(t) for t in split.tracks))
    return series


def cmd_train(args, timer):
    cfg = build_train_config(args)
    with stage("load", timer):
        split = load_split(args.data)
    model = _train(cfg, split, timer, args.verbose)
    with stage("checkpoint", timer):
        save_model(model, args.out, {"config": cfg.to_dict(), "history": model.history})
    print(f"variant={cfg.variant} K={cfg.K} epochs={cfg.epochs} "
          f"final_loss={model.history[-1]:.6f} -> {args.out}")
    return 0


def cmd_score(args, timer):
    with stage("load", timer):
        model = load_model(args.model)
        if args.variant is not None and args.variant != model.config.variant:
            raise ValueError(f"checkpoint is variant {model.config.variant!r}, "
                             f"requested {args.variant!r}")
        split = load_split(args.data)
    series = _score(model, split, args, timer)
    header = {"variant": model.config.variant, "stride": args.stride}
    if args.smooth_sigma > 0:
        header["smooth_sigma"] = args.smooth_sigma
    with stage("write", timer):
        track_io.write_scores(series, args.out, header)
    print(f"scored {len(series)} videos -> {args.out}")
    return 0


def cmd_eval(args, timer):
    with stage("eval", timer):
        scores = track_io.read_scores(args.scores)
        truths = track_io.read_labels(args.labels)
        text = format_report(evaluate(scores, truths))
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


def _load_pair(args, timer):
    with stage("load", timer):
        return load_split(args.train), load_split(args.test)


def _auroc(cfg, train_split, test_split, args, timer, verbose=False):
    model = _train(cfg, train_split, timer, verbose)
    series = _score(model, test_split, args, timer)
    with stage("eval", timer):
        return evaluate(series, test_split.truths)


def cmd_ablate(args, timer):
    train_split, test_split = _load_pair(args, timer)
    base = build_train_config(args)
    full = _auroc(base, train_split, test_split, args, timer, args.verbose)
    dropped = TrainConfig.from_dict({**base.to_dict(),
                                     "feature_mask": list(group_mask(*args.group))})
    abl = _auroc(dropped, train_split, test_split, args, timer, args.verbose)
    label = "+".join(args.group)
    delta = abl["auroc"] - full["auroc"]
    print(f"{'model':<20}{'D':>4}{'AUROC':>10}{'AP':>10}")
    print(f"{'full':<20}{sum(base.feature_mask):>4}{100 * full['auroc']:>10.2f}"
          f"{100 * full['ap']:>10.2f}")
    print(f"{'- ' + label:<20}{sum(dropped.feature_mask):>4}{100 * abl['auroc']:>10.2f}"
          f"{100 * abl['ap']:>10.2f}")
    print(f"delta_auroc={delta!r}")
    return 0


def cmd_sweep_k(args, timer):
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise StageError("args", ValueError(f"bad --values {args.values!r}")) from None
    train_split, test_split = _load_pair(args, timer)
    print(f"{'K':>4}{'AUROC':>10}{'AP':>10}")
    for k in values:
        cfg = build_train_config(args, K=k)
        rep = _auroc(cfg, train_split, test_split, args, timer, args.verbose)
        print(f"{k:>4}{100 * rep['auroc']:>10.2f}{100 * rep['ap']:>10.2f}", flush=True)
    return 0


COMMANDS = {"synth": cmd_synth, "extract": cmd_extract, "train": cmd_train,
            "score": cmd_score, "eval": cmd_eval, "ablate": cmd_ablate,
            "sweep-k": cmd_sweep_k}


class _CountingTimer(Timer):
    def __init__(self):
        super().__init__()
        self.counts: dict[str, int] = {}


def print_timing(timer: _CountingTimer, out=None) -> None:
    """Wall time per stage, normalized per frame or per segment where meaningful."""
    out = sys.stderr if out is None else out
    frames = timer.counts.get("frames", 0)
    segments = timer.counts.get("segments", 0)
    score_frames = timer.counts.get("score_frames", 0)
    per = {"preprocess": ("frame", frames), "score:preprocess": ("frame", score_frames),
           "score:inference": ("segment", segments), "score:aggregate": ("frame", score_frames),
           "train": ("segment", timer.counts.get("train_segments", 0))}
    for name in sorted(timer.stages):
        secs = timer.stages[name]
        line = f"time {name:<18}{1000 * secs:>12.1f} ms"
        unit, n = per.get(name, (None, 0))
        if unit and n:
            line += f"  {1000 * secs / n:.4f} ms/{unit}"
        print(line, file=out)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    timer = _CountingTimer()
    try:
        code = COMMANDS[args.command](args, timer)
    except StageError as exc:
        print(f"trajvad {args.command}: failed in stage {exc}", file=sys.stderr)
        return 1
    if args.time:
        print_timing(timer)
    return code


if __name__ == "__main__":
    sys.exit(main())
