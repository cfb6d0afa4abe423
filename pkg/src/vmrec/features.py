"""Per-clip feature tables, temporal aggregation, manifests and splits.

File formats
------------
Feature table (one per modality), UTF-8 text::

    clip_id,dim=<D>
    <clip_id>,<v0>,...,<v(D-1)>

Frame feature file::

    clip_id,frame_index,dim=<D>,frame_rate=<hz>
    <clip_id>,<frame_index>,<v0>,...,<v(D-1)>

Manifest (JSON)::

    {"pairs": [{"clip_id": ..., "music_path_ref": ..., "video_path_ref": ...}],
     "split": {"<clip_id>": "train" | "val" | "test"}}

Relative ``*_path_ref`` values resolve against the manifest's directory.
Floats are written with ``repr`` so a write/read cycle is bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")


class FeatureFormatError(ValueError):
    """A feature table, frame file or manifest failed validation."""


@dataclass(frozen=True)
class FrameFeatureSequence:
    clip_id: str
    modality: str
    frames: np.ndarray
    frame_rate: float

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise FeatureFormatError(f"{self.clip_id}: empty frame sequence")
        if not self.frame_rate > 0:
            raise FeatureFormatError(f"{self.clip_id}: frame_rate must be positive")

    @property
    def duration(self):
        return self.frames.shape[0] / self.frame_rate


@dataclass(frozen=True)
class ClipFeature:
    clip_id: str
    modality: str
    vector: np.ndarray
    source: str = ""


@dataclass(frozen=True)
class ClipPair:
    clip_id: str
    music: ClipFeature
    video: ClipFeature


@dataclass(frozen=True)
class DatasetManifest:
    """An ingested paired dataset.

    Features are held as two aligned matrices: row ``i`` of ``music`` and of
    ``video`` both belong to ``clip_ids[i]``.
    """

    clip_ids: tuple
    music: np.ndarray
    video: np.ndarray
    split: dict = field(default_factory=dict)
    music_source: str = ""
    video_source: str = ""

    def __post_init__(self):
        n = len(self.clip_ids)
        if len(set(self.clip_ids)) != n:
            raise FeatureFormatError("duplicate clip_id in dataset")
        if self.music.shape[0] != n or self.video.shape[0] != n:
            raise FeatureFormatError("feature matrices do not align with clip ids")
        missing = [c for c in self.clip_ids if c not in self.split]
        if missing:
            raise FeatureFormatError(f"split does not cover clip {missing[0]!r}")

    def __len__(self):
        return len(self.clip_ids)

    @property
    def music_dim(self):
        return self.music.shape[1]

    @property
    def video_dim(self):
        return self.video.shape[1]

    @property
    def pairs(self):
        return [
            ClipPair(
                cid,
                ClipFeature(cid, "music", self.music[i], self.music_source),
                ClipFeature(cid, "video", self.video[i], self.video_source),
            )
            for i, cid in enumerate(self.clip_ids)
        ]

    def indices(self, part):
        return np.array([i for i, c in enumerate(self.clip_ids) if self.split[c] == part], dtype=np.int64)

    def subset(self, part):
        """Dataset restricted to one split, order preserved."""
        idx = self.indices(part)
        return self.take(idx)

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        ids = tuple(self.clip_ids[i] for i in idx)
        return replace(
            self,
            clip_ids=ids,
            music=self.music[idx],
            video=self.video[idx],
            split={c: self.split[c] for c in ids},
        )


def aggregate_stats(seq):
    """Concatenate per-dimension mean, population variance and max over frames."""
    f = seq.frames
    vec = np.concatenate([f.mean(axis=0), f.var(axis=0), f.max(axis=0)])
    return ClipFeature(seq.clip_id, seq.modality, vec, "stats(mean,var,max)")


def aggregate_mean(seq):
    return ClipFeature(seq.clip_id, seq.modality, seq.frames.mean(axis=0), "mean")


def segment_length(segment_seconds, frame_rate):
    # tolerance keeps 12 s * 1 Hz from rounding up to 13 frames
    return max(1, math.ceil(segment_seconds * frame_rate - 1e-9))


def sample_segments(seq, n_segments=24, segment_seconds=12.0, rng=None):
    """Draw ``n_segments`` contiguous windows with uniform random start frames, with replacement."""
    if rng is None:
        raise ValueError("sample_segments needs an explicit RngStream")
    length = segment_length(segment_seconds, seq.frame_rate)
    total = seq.frames.shape[0]
    if total < length:
        raise FeatureFormatError(
            f"{seq.clip_id}: clip lasts {seq.duration:g} s, shorter than one {segment_seconds:g} s segment"
        )
    starts = rng.integers(0, total - length + 1, size=n_segments)
    return [
        FrameFeatureSequence(seq.clip_id, seq.modality, seq.frames[s:s + length], seq.frame_rate)
        for s in starts
    ]


def split_dataset(manifest, val_count, rng, test_count=0):
    """Reassign every clip: ``test_count`` to test, ``val_count`` to val, the rest to train."""
    n = len(manifest)
    if val_count < 0 or test_count < 0 or val_count + test_count >= n:
        raise ValueError(f"cannot hold out {val_count} val + {test_count} test of {n} pairs")
    order = rng.permutation(n)
    split = {}
    for rank, i in enumerate(order):
        cid = manifest.clip_ids[i]
        split[cid] = "test" if rank < test_count else "val" if rank < test_count + val_count else "train"
    return replace(manifest, split=split)


def subsample_train(manifest, train_size, rng):
    """Keep ``train_size`` randomly chosen train clips; val and test are untouched."""
    train_idx = manifest.indices("train")
    if train_size > len(train_idx):
        raise ValueError(f"train size {train_size} exceeds the {len(train_idx)} train pairs")
    keep = set(train_idx[np.sort(rng.choice(len(train_idx), train_size, replace=False))].tolist())
    idx = [i for i, c in enumerate(manifest.clip_ids) if manifest.split[c] != "train" or i in keep]
    return manifest.take(idx)


# -- file I/O ---------------------------------------------------------------


def _parse_header(line, path):
    fields = {}
    tokens = line.strip().split(",")
    if not tokens or tokens[0] != "clip_id":
        raise FeatureFormatError(f"{path}: header must start with 'clip_id'")
    for tok in tokens[1:]:
        if "=" in tok:
            k, v = tok.split("=", 1)
            fields[k.strip()] = v.strip()
        elif tok != "frame_index":
            raise FeatureFormatError(f"{path}: unexpected header token {tok!r}")
    if "dim" not in fields:
        raise FeatureFormatError(f"{path}: header lacks dim=<D>")
    return fields


def _parse_values(parts, dim, clip_id, path):
    if len(parts) != dim:
        raise FeatureFormatError(f"{path}: clip {clip_id!r} has {len(parts)} values, header says dim={dim}")
    try:
        vals = [float(v) for v in parts]
    except ValueError as exc:
        raise FeatureFormatError(f"{path}: clip {clip_id!r}: {exc}") from None
    if not all(math.isfinite(v) for v in vals):
        raise FeatureFormatError(f"{path}: clip {clip_id!r} has non-finite values")
    return vals


def read_feature_table(path):
    """Return ``(clip_ids, matrix)`` from a feature table file."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = _parse_header(fh.readline(), path)
        dim = int(header["dim"])
        ids, rows = [], []
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split(",")
            cid = parts[0]
            rows.append(_parse_values(parts[1:], dim, cid, path))
            ids.append(cid)
    if len(set(ids)) != len(ids):
        raise FeatureFormatError(f"{path}: duplicate clip_id")
    return ids, np.array(rows, dtype=np.float64).reshape(len(rows), dim)


def write_feature_table(path, clip_ids, matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    lines = [f"clip_id,dim={matrix.shape[1]}"]
    lines += [",".join([cid] + [repr(v) for v in row]) for cid, row in zip(clip_ids, matrix.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_frame_file(path, modality="music"):
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = _parse_header(fh.readline(), path)
        if "frame_rate" not in header:
            raise FeatureFormatError(f"{path}: header lacks frame_rate=<hz>")
        dim = int(header["dim"])
        rate = float(header["frame_rate"])
        clips: dict[str, dict[int, list]] = {}
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split(",")
            cid, fidx = parts[0], int(parts[1])
            frames = clips.setdefault(cid, {})
            if fidx in frames:
                raise FeatureFormatError(f"{path}: clip {cid!r} repeats frame {fidx}")
            frames[fidx] = _parse_values(parts[2:], dim, cid, path)
    return [
        FrameFeatureSequence(cid, modality, np.array([fr[k] for k in sorted(fr)], dtype=np.float64), rate)
        for cid, fr in clips.items()
    ]


def write_frame_file(path, sequences):
    sequences = list(sequences)
    dim = sequences[0].frames.shape[1]
    rate = sequences[0].frame_rate
    lines = [f"clip_id,frame_index,dim={dim},frame_rate={rate!r}"]
    for seq in sequences:
        if seq.frames.shape[1] != dim or seq.frame_rate != rate:
            raise FeatureFormatError(f"{seq.clip_id}: dimension or frame rate differs within file")
        for t, row in enumerate(seq.frames.tolist()):
            lines.append(",".join([seq.clip_id, str(t)] + [repr(v) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_manifest(path, clip_ids, split, music_ref, video_ref):
    doc = {
        "pairs": [{"clip_id": c, "music_path_ref": music_ref, "video_path_ref": video_ref} for c in clip_ids],
        "split": {c: split[c] for c in clip_ids},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def save_dataset(manifest, path, music_ref=None, video_ref=None):
    """Write the manifest and, if the refs are new, the two feature tables beside it."""
    path = Path(path)
    if music_ref is None or video_ref is None:
        music_ref = music_ref or path.stem + ".music.csv"
        video_ref = video_ref or path.stem + ".video.csv"
    write_feature_table(path.parent / music_ref, manifest.clip_ids, manifest.music)
    write_feature_table(path.parent / video_ref, manifest.clip_ids, manifest.video)
    write_manifest(path, manifest.clip_ids, manifest.split, music_ref, video_ref)


def ingest_dataset(manifest_path, feature_table_paths=None):
    """Load a manifest and its feature tables into a validated :class:`DatasetManifest`.

    ``feature_table_paths`` may map ``"music"`` and/or ``"video"`` to a table
    that replaces every pair's reference for that modality.
    """
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FeatureFormatError(f"{manifest_path}: {exc}") from None
    if not isinstance(doc, dict) or "pairs" not in doc or "split" not in doc:
        raise FeatureFormatError(f"{manifest_path}: manifest needs 'pairs' and 'split'")
    overrides = feature_table_paths or {}
    base = manifest_path.parent
    tables: dict[Path, dict] = {}

    def table(ref):
        p = Path(ref) if Path(ref).is_absolute() else base / ref
        if p not in tables:
            if not p.exists():
                raise FeatureFormatError(f"feature table not found: {p}")
            ids, mat = read_feature_table(p)
            tables[p] = {"rows": {c: i for i, c in enumerate(ids)}, "mat": mat, "path": p}
        return tables[p]

    clip_ids, music_rows, video_rows = [], [], []
    seen_pairs = set()
    for entry in doc["pairs"]:
        cid = entry["clip_id"]
        mt = table(overrides.get("music", entry["music_path_ref"]))
        vt = table(overrides.get("video", entry["video_path_ref"]))
        key = (mt["path"], vt["path"])
        if key not in seen_pairs:
            seen_pairs.add(key)
            only_m = sorted(set(mt["rows"]) - set(vt["rows"]))
            only_v = sorted(set(vt["rows"]) - set(mt["rows"]))
            if only_m:
                raise FeatureFormatError(f"clip {only_m[0]!r} present only in music table {mt['path']}")
            if only_v:
                raise FeatureFormatError(f"clip {only_v[0]!r} present only in video table {vt['path']}")
        if cid not in mt["rows"]:
            raise FeatureFormatError(f"clip {cid!r} missing from music table {mt['path']}")
        if cid not in vt["rows"]:
            raise FeatureFormatError(f"clip {cid!r} missing from video table {vt['path']}")
        clip_ids.append(cid)
        music_rows.append(mt["mat"][mt["rows"][cid]])
        video_rows.append(vt["mat"][vt["rows"][cid]])

    dims = {(len(m), len(v)) for m, v in zip(music_rows, video_rows)}
    if len(dims) > 1:
        raise FeatureFormatError(f"{manifest_path}: feature dimensions differ across tables: {sorted(dims)}")
    split = doc["split"]
    bad = {v for v in split.values() if v not in SPLITS}
    if bad:
        raise FeatureFormatError(f"{manifest_path}: unknown split label {sorted(bad)[0]!r}")
    uncovered = [c for c in clip_ids if c not in split]
    if uncovered:
        raise FeatureFormatError(f"{manifest_path}: split does not cover clip {uncovered[0]!r}")
    mdim, vdim = dims.pop() if dims else (0, 0)
    return DatasetManifest(
        tuple(clip_ids),
        np.array(music_rows, dtype=np.float64).reshape(len(clip_ids), mdim),
        np.array(video_rows, dtype=np.float64).reshape(len(clip_ids), vdim),
        {c: split[c] for c in clip_ids},
        str(overrides.get("music", "")),
        str(overrides.get("video", "")),
    )
