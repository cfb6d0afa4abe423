"""Command-line entry point: ``vmrec <subcommand> [options]``.

Subcommands: synth, aggregate, split, train, eval, recommend. Failures exit
non-zero after printing one line starting with ``error:`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import features, retrieval
from .features import FeatureFormatError
from .loss import TripletLossConfig
from .model import (
    REFERENCE_HEAD_WIDTHS,
    REFERENCE_MUSIC_WIDTHS,
    REFERENCE_VIDEO_WIDTHS,
    BranchSpec,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import RngStream
from .synth import SynthConfig, generate_synthetic_dataset
from .training import (
    REFERENCE_BATCH_SIZE,
    REFERENCE_BCE_EPOCHS,
    REFERENCE_DROPOUT,
    REFERENCE_LR,
    TrainConfig,
    fresh_model,
    load_train_config,
    subsample_for_config,
    train,
)

REFERENCE_BLOCK = (
    f"reference defaults: lr {REFERENCE_LR:g}, batch {REFERENCE_BATCH_SIZE}, dropout {REFERENCE_DROPOUT}, "
    f"BCE epochs {REFERENCE_BCE_EPOCHS}, music widths {','.join(map(str, REFERENCE_MUSIC_WIDTHS))}, "
    f"video widths {','.join(map(str, REFERENCE_VIDEO_WIDTHS))}, head widths {','.join(map(str, REFERENCE_HEAD_WIDTHS))}"
)
ARCH_KEYS = ("music_widths", "video_widths", "head_widths")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _ints(text):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    return vals


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="vmrec", description=__doc__.splitlines()[0], epilog=REFERENCE_BLOCK)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic paired dataset", formatter_class=fmt, epilog=REFERENCE_BLOCK)
    s.add_argument("--pairs", type=int, default=SynthConfig.n_pairs)
    s.add_argument("--latent-dim", type=int, default=SynthConfig.latent_dim)
    s.add_argument("--music-dim", type=int, default=SynthConfig.music_dim)
    s.add_argument("--video-dim", type=int, default=SynthConfig.video_dim)
    s.add_argument("--noise", type=float, default=SynthConfig.noise_sigma, help="noise standard deviation")
    s.add_argument("--seed", type=_u64, required=True)
    s.add_argument("--out-dir", type=Path, required=True)

    a = sub.add_parser("aggregate", help="frame features -> timeless feature table", formatter_class=fmt, epilog=REFERENCE_BLOCK)
    a.add_argument("--frames", type=Path, required=True, help="frame feature file")
    a.add_argument("--method", choices=("stats", "mean"), default="stats", help="stats: mean|var|max; mean: mean only")
    a.add_argument("--segments", type=int, default=0, help="if > 0, aggregate over this many random segments")
    a.add_argument("--segment-seconds", type=float, default=12.0)
    a.add_argument("--seed", type=_u64, default=None, help="required with --segments")
    a.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("split", help="assign train/val/test", formatter_class=fmt, epilog=REFERENCE_BLOCK)
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--val", type=int, default=0)
    sp.add_argument("--test", type=int, default=0)
    sp.add_argument("--seed", type=_u64, required=True)
    sp.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train a model", epilog=REFERENCE_BLOCK)
    t.add_argument("--manifest", type=Path, required=True)
    t.add_argument("--config", type=Path, default=None, help="TrainConfig JSON; flags below override it")
    t.add_argument("--arch", type=Path, default=None, help="JSON with music_widths, video_widths, head_widths")
    t.add_argument("--seed", type=_u64, required=True)
    t.add_argument("--loss", choices=("tl", "bce"), default=None, help="training mode (config default: tl)")
    t.add_argument("--margin", type=float, default=None, help=f"(config default: {TripletLossConfig.margin})")
    t.add_argument("--lambdas", type=_floats, default=None, help="l1,l2,l3,l4 (config default: 1,1,0.1,0.1)")
    t.add_argument("--lr", type=float, default=None, help=f"(config default: {REFERENCE_LR:g})")
    t.add_argument("--batch", type=int, default=None, help=f"(config default: {REFERENCE_BATCH_SIZE})")
    t.add_argument("--epochs", type=int, default=None, help=f"(config default: {REFERENCE_BCE_EPOCHS})")
    t.add_argument("--patience", type=int, default=None, help="0 disables early stopping (config default: 10)")
    t.add_argument("--dropout", type=float, default=None, help=f"(config default: {REFERENCE_DROPOUT})")
    t.add_argument("--val-every", type=int, default=None, help="(config default: 1)")
    t.add_argument("--train-size", type=int, default=None, help="train on this many random train pairs")
    t.add_argument("--music-features", type=Path, default=None, help="music feature table replacing the manifest's")
    t.add_argument("--video-features", type=Path, default=None, help="video feature table replacing the manifest's")
    t.add_argument("--music-widths", type=_ints, default=None, help=f"(default: {','.join(map(str, REFERENCE_MUSIC_WIDTHS))})")
    t.add_argument("--video-widths", type=_ints, default=None, help=f"(default: {','.join(map(str, REFERENCE_VIDEO_WIDTHS))})")
    t.add_argument("--head-widths", type=_ints, default=None, help=f"(default: {','.join(map(str, REFERENCE_HEAD_WIDTHS))})")
    t.add_argument("--checkpoint", type=Path, required=True)
    t.add_argument("--history", type=Path, required=True)
    t.add_argument("--timing", action="store_true", help="fill the seconds column of the history (default: off)")

    e = sub.add_parser("eval", help="Recall@k both ways and dispersion", formatter_class=fmt, epilog=REFERENCE_BLOCK)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--split", choices=features.SPLITS, default="test")
    e.add_argument("--k", type=_ints, default=(1, 10, 25))
    e.add_argument("--scorer", choices=("auto", "distance", "fusion"), default="auto",
                   help="auto: fusion for BCE checkpoints, distance otherwise")
    e.add_argument("--music-features", type=Path, default=None)
    e.add_argument("--video-features", type=Path, default=None)
    e.add_argument("--out", type=Path, required=True, help="recall CSV")
    e.add_argument("--dispersion-out", type=Path, default=None, help="CSV: modality,dispersion")

    r = sub.add_parser("recommend", help="per-query recommendation report", formatter_class=fmt, epilog=REFERENCE_BLOCK)
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--manifest", type=Path, required=True)
    r.add_argument("--query", required=True, help="clip id of the query")
    r.add_argument("--direction", choices=tuple(retrieval.DIRECTIONS), default="video_to_music")
    r.add_argument("--split", choices=features.SPLITS, default="test")
    r.add_argument("--scorer", choices=("auto", "distance", "fusion"), default="auto")
    r.add_argument("--top-n", type=int, default=3)
    r.add_argument("--bins", type=int, default=20)
    r.add_argument("--music-features", type=Path, default=None)
    r.add_argument("--video-features", type=Path, default=None)
    r.add_argument("--out-dir", type=Path, required=True)
    return p


def _tables(args):
    out = {}
    if getattr(args, "music_features", None):
        out["music"] = args.music_features
    if getattr(args, "video_features", None):
        out["video"] = args.video_features
    return out


def cmd_synth(args):
    cfg = SynthConfig(args.pairs, args.latent_dim, args.music_dim, args.video_dim, args.noise, args.seed)
    data = generate_synthetic_dataset(cfg)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    features.save_dataset(data.manifest, args.out_dir / "manifest.json", "music.csv", "video.csv")
    print(f"wrote {cfg.n_pairs} pairs to {args.out_dir}")


def cmd_aggregate(args):
    seqs = features.read_frame_file(args.frames)
    if not seqs:
        raise CliError(f"{args.frames}: no frames")
    agg = features.aggregate_stats if args.method == "stats" else features.aggregate_mean
    if args.segments > 0:
        if args.seed is None:
            raise CliError("--segments needs --seed")
        root = RngStream(args.seed)
        pooled = []
        for i, seq in enumerate(seqs):
            segs = features.sample_segments(seq, args.segments, args.segment_seconds, root.child(i))
            frames = np.concatenate([s.frames for s in segs])
            pooled.append(features.FrameFeatureSequence(seq.clip_id, seq.modality, frames, seq.frame_rate))
        seqs = pooled
    clips = [agg(s) for s in seqs]
    features.write_feature_table(args.out, [c.clip_id for c in clips], [c.vector for c in clips])
    print(f"wrote {len(clips)} clips, dim {len(clips[0].vector)}, to {args.out}")


def cmd_split(args):
    ds = features.ingest_dataset(args.manifest)
    ds = features.split_dataset(ds, args.val, RngStream(args.seed), test_count=args.test)
    doc = json.loads(args.manifest.read_text(encoding="utf-8"))
    src_dir, dst_dir = args.manifest.parent.resolve(), args.out.parent.resolve()

    def rebase(ref):
        p = Path(ref)
        return ref if p.is_absolute() else os.path.relpath(src_dir / p, dst_dir)

    for pair in doc["pairs"]:
        pair["music_path_ref"] = rebase(pair["music_path_ref"])
        pair["video_path_ref"] = rebase(pair["video_path_ref"])
    doc["split"] = {c: ds.split[c] for c in ds.clip_ids}
    args.out.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    counts = {s: sum(v == s for v in doc["split"].values()) for s in features.SPLITS}
    print(" ".join(f"{k}={v}" for k, v in counts.items()))


def _train_config(args):
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    loss = cfg.loss
    if args.margin is not None:
        loss = replace(loss, margin=args.margin)
    if args.lambdas is not None:
        loss = replace(loss, weights=args.lambdas)
    overrides = {
        "mode": args.loss, "lr": args.lr, "batch_size": args.batch, "max_epochs": args.epochs,
        "patience": args.patience, "dropout_p": args.dropout, "val_every": args.val_every,
    }
    return replace(cfg, loss=loss, seed=args.seed, **{k: v for k, v in overrides.items() if v is not None})


def _arch(args):
    arch = {"music_widths": REFERENCE_MUSIC_WIDTHS, "video_widths": REFERENCE_VIDEO_WIDTHS, "head_widths": REFERENCE_HEAD_WIDTHS}
    if args.arch:
        doc = json.loads(args.arch.read_text(encoding="utf-8"))
        unknown = sorted(set(doc) - set(ARCH_KEYS))
        if unknown:
            raise CliError(f"{args.arch}: unknown key(s) {', '.join(unknown)}")
        arch.update({k: tuple(v) for k, v in doc.items()})
    for key in ARCH_KEYS:
        if getattr(args, key) is not None:
            arch[key] = getattr(args, key)
    return arch


def cmd_train(args):
    cfg = _train_config(args)
    arch = _arch(args)
    ds = features.ingest_dataset(args.manifest, _tables(args))
    if args.train_size is not None:
        ds = subsample_for_config(ds, cfg, args.train_size)
    model = fresh_model(
        BranchSpec(ds.music_dim, arch["music_widths"]),
        BranchSpec(ds.video_dim, arch["video_widths"]),
        cfg,
        arch["head_widths"],
    )
    model, history = train(model, ds, cfg)
    save_checkpoint(args.checkpoint, model, cfg.to_dict())
    history.write_csv(args.history, timing=args.timing)
    print(f"trained {len(history.records)} evaluations; checkpoint {args.checkpoint}")


def _scorer(choice, train_cfg):
    if choice != "auto":
        return choice
    return "fusion" if train_cfg and str(train_cfg.get("mode", "")).upper() == "BCE" else "distance"


def _load_eval(args):
    model, train_cfg = load_checkpoint(args.checkpoint)
    ds = features.ingest_dataset(args.manifest, _tables(args)).subset(args.split)
    if len(ds) == 0:
        raise CliError(f"split {args.split!r} of {args.manifest} is empty")
    return model, train_cfg, ds


def cmd_eval(args):
    model, train_cfg, ds = _load_eval(args)
    scorer = _scorer(args.scorer, train_cfg)
    reports = retrieval.evaluate_recall(model, ds.clip_ids, ds.music, ds.video, args.k, scorer)
    retrieval.write_recall_csv(args.out, reports.values())
    disp = {
        m: retrieval.dispersion(retrieval.build_index(model, ds.clip_ids, X, m))
        for m, X in (("music", ds.music), ("video", ds.video))
    }
    if args.dispersion_out:
        lines = ["modality,dispersion"] + [f"{m},{v!r}" for m, v in disp.items()]
        args.dispersion_out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    for rep in reports.values():
        print(rep.direction, " ".join(f"R@{k}={rep.recall[k]:.2f}" for k in rep.ks), f"N={rep.n}")
    print(" ".join(f"dispersion_{m}={v:.4f}" for m, v in disp.items()))


def cmd_recommend(args):
    model, train_cfg, ds = _load_eval(args)
    scorer = _scorer(args.scorer, train_cfg)
    q_mod, db_mod = retrieval.DIRECTIONS[args.direction]
    if args.query not in ds.clip_ids:
        raise CliError(f"query clip {args.query!r} not in split {args.split!r}")
    i = ds.clip_ids.index(args.query)
    X_q = ds.music if q_mod == "music" else ds.video
    X_db = ds.video if db_mod == "video" else ds.music
    query = features.ClipFeature(args.query, q_mod, X_q[i])
    index = retrieval.build_index(model, ds.clip_ids, X_db, db_mod)
    report = retrieval.recommend_report(query, index, model, scorer, args.top_n, args.bins)
    txt, js = retrieval.write_report(report, args.out_dir)
    print(f"ground truth rank {report.gt_rank}; wrote {txt} and {js}")


COMMANDS = {
    "synth": cmd_synth,
    "aggregate": cmd_aggregate,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "recommend": cmd_recommend,
}


def run(argv=None):
    """Run one subcommand; returns the process exit code."""
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (CliError, FeatureFormatError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {msg}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())
