"""Cross-modal ranking, Recall@k, dispersion and per-query recommendation reports.

Two scorers are supported. ``distance`` ranks candidates by squared Euclidean
distance between embeddings, smallest first. ``fusion`` ranks by the fusion
head's match probability, largest first. Ties keep index order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .model import embed, fusion_score
from .numerics import ShapeError, pairwise_sq_dist

DIRECTIONS = {"music_to_video": ("music", "video"), "video_to_music": ("video", "music")}
DEFAULT_KS = (1, 10, 25)
# caps the number of (query, candidate) pairs pushed through the fusion head at once
_FUSION_PAIRS_PER_CHUNK = 1 << 16


@dataclass(frozen=True)
class EmbeddingIndex:
    clip_ids: tuple
    E: np.ndarray
    modality: str

    def __post_init__(self):
        if len(set(self.clip_ids)) != len(self.clip_ids):
            raise ValueError("index clip ids must be unique")
        if self.E.shape[0] != len(self.clip_ids):
            raise ShapeError("index rows do not match clip ids")
        if not np.all(np.isfinite(self.E)):
            raise ValueError("index embeddings contain non-finite values")

    def __len__(self):
        return len(self.clip_ids)

    def position(self, clip_id):
        try:
            return self.clip_ids.index(clip_id)
        except ValueError:
            raise KeyError(f"clip {clip_id!r} not in the {self.modality} index") from None


@dataclass(frozen=True)
class RankedList:
    query_id: str
    candidates: list
    score_kind: str

    def rank_of(self, clip_id):
        for r, (cid, _) in enumerate(self.candidates, start=1):
            if cid == clip_id:
                return r
        raise KeyError(f"clip {clip_id!r} is not among the candidates")


@dataclass(frozen=True)
class RecallReport:
    """Recall@k in percent for one retrieval direction.

    Construction checks that recalls lie in [0, 100], do not decrease with k,
    and that every ground-truth rank lies within the database (so R@N = 100).
    """

    direction: str
    ks: tuple
    recall: dict
    n: int
    ranks: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        values = [self.recall[k] for k in sorted(self.ks)]
        if any(not 0.0 <= v <= 100.0 for v in values):
            raise AssertionError(f"{self.direction}: recall outside [0, 100]: {values}")
        if any(b < a for a, b in zip(values, values[1:])):
            raise AssertionError(f"{self.direction}: recall decreases with k: {values}")
        if self.ranks is not None and len(self.ranks) and not (1 <= self.ranks.min() and self.ranks.max() <= self.n):
            raise AssertionError(f"{self.direction}: ground-truth rank outside 1..{self.n}")
        if self.n in self.recall and self.recall[self.n] != 100.0:
            raise AssertionError(f"{self.direction}: R@N is {self.recall[self.n]}, not 100")


def build_index(model, clip_ids, X, modality):
    """Infer-mode embeddings of every clip of one modality."""
    X = np.asarray(X, dtype=np.float64)
    clip_ids = tuple(clip_ids)
    if len(clip_ids) == 0:
        return EmbeddingIndex((), np.zeros((0, model.embedding_dim)), modality)
    E, _ = embed(X, modality, model, mode="infer")
    return EmbeddingIndex(clip_ids, E, modality)


def score_matrix(E_query, query_modality, index, model, scorer="distance"):
    """Scores of every query against every index row; returns ``(S, descending)``."""
    if query_modality == index.modality:
        raise ValueError(f"query and index are both {query_modality}; cross-modal ranking needs opposite modalities")
    E_query = np.atleast_2d(np.asarray(E_query, dtype=np.float64))
    if scorer == "distance":
        return pairwise_sq_dist(E_query, index.E), False
    if scorer != "fusion":
        raise ValueError(f"unknown scorer {scorer!r}")
    if model.head_widths is None:
        raise ValueError("fusion scorer needs a model with a fusion head")
    q, n = E_query.shape[0], len(index)
    S = np.empty((q, n))
    step = max(1, _FUSION_PAIRS_PER_CHUNK // max(1, n))
    for start in range(0, q, step):
        rows = np.arange(start, min(q, start + step))
        qi = np.repeat(rows - start, n)
        ci = np.tile(np.arange(n), len(rows))
        chunk = E_query[rows]
        if query_modality == "music":
            s, _ = fusion_score(chunk, index.E, model, music_rows=qi, video_rows=ci)
        else:
            s, _ = fusion_score(index.E, chunk, model, music_rows=ci, video_rows=qi)
        S[rows] = s.reshape(len(rows), n)
    return S, True


def rank_cross_modal(query, index, model, scorer="distance"):
    """Rank every index clip for one query (a ``ClipFeature``)."""
    E_q, _ = embed(np.asarray(query.vector, dtype=np.float64)[None, :], query.modality, model, mode="infer")
    S, descending = score_matrix(E_q, query.modality, index, model, scorer)
    s = S[0]
    order = np.argsort(-s if descending else s, kind="stable")
    kind = "likelihood" if descending else "sq_distance"
    return RankedList(query.clip_id, [(index.clip_ids[j], float(s[j])) for j in order], kind)


def recall_from_ranks(ranks, ks, n, direction):
    ranks = np.asarray(ranks, dtype=np.int64)
    ks = tuple(int(k) for k in ks)
    recall = {k: 100.0 * float(np.mean(ranks <= k)) if len(ranks) else 0.0 for k in ks}
    return RecallReport(direction, ks, recall, n, ranks)


def recall_at_k(ranked_lists, ground_truth, ks, direction="music_to_video"):
    """Recall from explicit ranked lists; ``ground_truth[i]`` is the correct clip for list ``i``."""
    if not ranked_lists:
        raise ValueError("no ranked lists")
    n = len(ranked_lists[0].candidates)
    ranks = []
    for rl, gt in zip(ranked_lists, ground_truth):
        try:
            ranks.append(rl.rank_of(gt))
        except KeyError:
            raise ValueError(f"ground truth {gt!r} of query {rl.query_id!r} is not in the index") from None
    return recall_from_ranks(ranks, ks, n, direction)


def ground_truth_ranks(S, gt, descending):
    return kernels.gt_ranks(S, np.asarray(gt, dtype=np.int64), descending)


def evaluate_recall(model, clip_ids, X_M, X_V, ks=DEFAULT_KS, scorer="distance"):
    """Recall@k both ways over a paired set; clip ``i`` is the ground truth of query ``i``.

    Returns ``{direction: RecallReport}``.
    """
    idx_m = build_index(model, clip_ids, X_M, "music")
    idx_v = build_index(model, clip_ids, X_V, "video")
    gt = np.arange(len(clip_ids))
    out = {}
    for direction, (q_mod, _) in DIRECTIONS.items():
        query_idx, db = (idx_m, idx_v) if q_mod == "music" else (idx_v, idx_m)
        S, descending = score_matrix(query_idx.E, q_mod, db, model, scorer)
        out[direction] = recall_from_ranks(ground_truth_ranks(S, gt, descending), ks, len(db), direction)
    return out


def dispersion(index):
    """Mean Euclidean distance of the index embeddings to their centroid."""
    if len(index) == 0:
        raise ValueError("dispersion of an empty index")
    E = index.E
    return float(np.mean(np.sqrt(np.sum((E - E.mean(axis=0)) ** 2, axis=1))))


def write_recall_csv(path, reports):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["direction", "k", "recall_percent", "n"])
        for rep in reports:
            for k in rep.ks:
                w.writerow([rep.direction, k, repr(rep.recall[k]), rep.n])


def read_recall_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {"direction": r["direction"], "k": int(r["k"]), "recall_percent": float(r["recall_percent"]), "n": int(r["n"])}
            for r in csv.DictReader(fh)
        ]


# -- qualitative reports ------------------------------------------------------

DISTANCE_DISPLAY_SCALE = 1000.0


@dataclass
class RecommendationReport:
    query_id: str
    ground_truth_id: str
    gt_rank: int
    score_kind: str
    top: list
    edges: list
    counts: list
    gt_bin: int

    def to_json(self):
        return {
            "query_id": self.query_id,
            "gt_rank": self.gt_rank,
            "top": [{"clip_id": c, "score": s} for c, s in self.top],
            "histogram": {"edges": self.edges, "counts": self.counts, "gt_bin": self.gt_bin},
        }

    def render_text(self):
        distance = self.score_kind == "sq_distance"
        label = "distance x1000" if distance else "likelihood"
        fmt = ".1f" if distance else ".4f"
        lines = [f"query: {self.query_id}", f"ground truth: {self.ground_truth_id} (rank {self.gt_rank})", ""]
        for r, (cid, s) in enumerate(self.top, start=1):
            shown = s * DISTANCE_DISPLAY_SCALE if distance else s
            mark = "  <- ground truth" if cid == self.ground_truth_id else ""
            lines.append(f"{r:>4}. {cid}  {label} = {shown:{fmt}}{mark}")
        lines += ["", f"score histogram ({len(self.counts)} bins):"]
        peak = max(self.counts) if self.counts else 1
        scale = DISTANCE_DISPLAY_SCALE if distance else 1.0
        for b, c in enumerate(self.counts):
            lo, hi = self.edges[b] * scale, self.edges[b + 1] * scale
            bar = "#" * int(round(30 * c / peak)) if peak else ""
            flag = "  <- ground truth" if b == self.gt_bin else ""
            lines.append(f"[{lo:12.1f}, {hi:12.1f}) {c:6d} {bar}{flag}")
        return "\n".join(lines) + "\n"


def recommend_report(query, index, model, scorer="distance", top_n=3, histogram_bins=20, ground_truth_id=None):
    """Top candidates, full score histogram and ground-truth rank for one query.

    The ground truth defaults to the index clip sharing the query's id.
    """
    ranked = rank_cross_modal(query, index, model, scorer)
    gt_id = query.clip_id if ground_truth_id is None else ground_truth_id
    gt_rank = ranked.rank_of(gt_id)
    scores = np.array([s for _, s in ranked.candidates])
    counts, edges = np.histogram(scores, bins=histogram_bins)
    gt_score = ranked.candidates[gt_rank - 1][1]
    gt_bin = int(min(np.searchsorted(edges, gt_score, side="right") - 1, histogram_bins - 1))
    return RecommendationReport(
        query.clip_id,
        gt_id,
        gt_rank,
        ranked.score_kind,
        ranked.candidates[:top_n],
        [float(e) for e in edges],
        [int(c) for c in counts],
        gt_bin,
    )


def write_report(report, out_dir):
    """Write ``<query_id>.txt`` and ``<query_id>.json`` into ``out_dir``; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / f"{report.query_id}.txt"
    js = out_dir / f"{report.query_id}.json"
    txt.write_text(report.render_text(), encoding="utf-8")
    js.write_text(json.dumps(report.to_json(), indent=1) + "\n", encoding="utf-8")
    return txt, js
