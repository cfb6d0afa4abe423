import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vmrec.features import ClipFeature
from vmrec.model import BranchSpec, init_model
from vmrec.numerics import RngStream
from vmrec.retrieval import (
    EmbeddingIndex,
    RankedList,
    RecallReport,
    build_index,
    dispersion,
    evaluate_recall,
    ground_truth_ranks,
    rank_cross_modal,
    read_recall_csv,
    recall_at_k,
    recall_from_ranks,
    recommend_report,
    score_matrix,
    write_recall_csv,
    write_report,
)


def small(head=False):
    return init_model(BranchSpec(5, (6, 3)), BranchSpec(4, (6, 3)), head, RngStream(0), head_widths=(5, 1))


def brute_force_order(scores, descending):
    """Candidate order by repeated selection of the best remaining score, lowest index first on ties."""
    left = list(range(len(scores)))
    out = []
    while left:
        best = left[0]
        for j in left[1:]:
            better = scores[j] > scores[best] if descending else scores[j] < scores[best]
            if better:
                best = j
        out.append(best)
        left.remove(best)
    return out


def test_rank_cross_modal_orders_by_distance():
    m = small()
    r = RngStream(1)
    idx = build_index(m, ["a", "b", "c", "d"], r.normal((4, 4)), "video")
    q = ClipFeature("q", "music", r.normal(5))
    ranked = rank_cross_modal(q, idx, m)
    scores = [s for _, s in ranked.candidates]
    assert scores == sorted(scores) and ranked.score_kind == "sq_distance"
    assert [c for c, _ in ranked.candidates] == [idx.clip_ids[j] for j in brute_force_order(scores_by_id(ranked, idx), False)]


def scores_by_id(ranked, idx):
    d = dict(ranked.candidates)
    return [d[c] for c in idx.clip_ids]


def test_fusion_ranking_is_descending():
    m = small(True)
    r = RngStream(2)
    idx = build_index(m, [f"v{i}" for i in range(6)], r.normal((6, 4)), "video")
    ranked = rank_cross_modal(ClipFeature("q", "music", r.normal(5)), idx, m, "fusion")
    scores = [s for _, s in ranked.candidates]
    assert scores == sorted(scores, reverse=True) and ranked.score_kind == "likelihood"


def test_same_modality_query_rejected():
    m = small()
    idx = build_index(m, ["a"], np.zeros((1, 5)), "music")
    with pytest.raises(ValueError, match="opposite"):
        score_matrix(np.zeros((1, 3)), "music", idx, m)


def test_ties_keep_index_order():
    S = np.zeros((1, 5))
    for gt in range(5):
        assert ground_truth_ranks(S, [gt], False)[0] == gt + 1
        assert ground_truth_ranks(S, [gt], True)[0] == gt + 1


def test_recall_examples():
    rep = recall_from_ranks([1, 3, 11, 30], (1, 10, 25), 30, "music_to_video")
    assert rep.recall == {1: 25.0, 10: 50.0, 25: 75.0}
    assert recall_from_ranks([1, 2], (1, 2), 2, "x").recall[2] == 100.0


def test_recall_report_invariants_are_enforced():
    with pytest.raises(AssertionError):
        RecallReport("x", (1, 10), {1: 50.0, 10: 40.0}, 20)
    with pytest.raises(AssertionError):
        RecallReport("x", (1, 5), {1: 10.0, 5: 90.0}, 5)
    with pytest.raises(AssertionError):
        RecallReport("x", (1,), {1: 101.0}, 5)


def test_recall_at_k_from_ranked_lists():
    lists = [
        RankedList("q0", [("a", 0.1), ("b", 0.2)], "sq_distance"),
        RankedList("q1", [("a", 0.1), ("b", 0.2)], "sq_distance"),
    ]
    rep = recall_at_k(lists, ["a", "a"], (1, 2))
    assert rep.recall == {1: 100.0, 2: 100.0}
    assert recall_at_k(lists, ["b", "a"], (1, 2)).recall == {1: 50.0, 2: 100.0}
    with pytest.raises(ValueError, match="not in the index"):
        recall_at_k(lists, ["z", "a"], (1,))


def test_perfect_embeddings_give_full_recall():
    E = 5.0 * np.eye(8)
    S = ((E[:, None] - E[None]) ** 2).sum(-1)
    ranks = ground_truth_ranks(S, np.arange(8), False)
    assert list(ranks) == [1] * 8


def test_evaluate_recall_covers_both_directions():
    m = small(True)
    r = RngStream(3)
    X_M, X_V = r.normal((12, 5)), r.normal((12, 4))
    ids = [f"c{i}" for i in range(12)]
    for scorer in ("distance", "fusion"):
        out = evaluate_recall(m, ids, X_M, X_V, (1, 5, 12), scorer)
        assert set(out) == {"music_to_video", "video_to_music"}
        assert all(rep.recall[12] == 100.0 and rep.n == 12 for rep in out.values())


def test_fusion_scores_match_unchunked(monkeypatch):
    import vmrec.retrieval as rt

    m = small(True)
    r = RngStream(4)
    idx = build_index(m, [f"v{i}" for i in range(9)], r.normal((9, 4)), "video")
    q = r.normal((7, 3))
    full, _ = score_matrix(q, "music", idx, m, "fusion")
    monkeypatch.setattr(rt, "_FUSION_PAIRS_PER_CHUNK", 10)
    chunked, _ = score_matrix(q, "music", idx, m, "fusion")
    assert np.array_equal(full, chunked)


def test_dispersion_examples():
    idx = EmbeddingIndex(("a", "b"), np.array([[0.0, 0.0], [2.0, 0.0]]), "music")
    assert dispersion(idx) == 1.0
    assert dispersion(EmbeddingIndex(("a", "b"), np.ones((2, 3)), "music")) == 0.0


def test_recall_csv_round_trip(tmp_path):
    reps = [recall_from_ranks([1, 2, 9], (1, 10), 9, "music_to_video")]
    write_recall_csv(tmp_path / "r.csv", reps)
    rows = read_recall_csv(tmp_path / "r.csv")
    assert rows[0] == {"direction": "music_to_video", "k": 1, "recall_percent": reps[0].recall[1], "n": 9}
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "direction,k,recall_percent,n"


def test_recommend_report(tmp_path):
    m = small()
    r = RngStream(5)
    ids = [f"c{i}" for i in range(10)]
    idx = build_index(m, ids, r.normal((10, 4)), "video")
    rep = recommend_report(ClipFeature("c3", "music", r.normal(5)), idx, m, top_n=3, histogram_bins=4)
    assert len(rep.top) == 3 and sum(rep.counts) == 10 and 0 <= rep.gt_bin < 4
    assert 1 <= rep.gt_rank <= 10
    txt, js = write_report(rep, tmp_path)
    assert "distance x1000" in txt.read_text() and js.exists()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 12)), elements=st.integers(-3, 3).map(float)), st.booleans())
def test_gt_ranks_match_brute_force(S, descending):
    n = S.shape[1]
    gt = np.arange(S.shape[0]) % n
    ranks = ground_truth_ranks(S, gt, descending)
    for i in range(S.shape[0]):
        assert ranks[i] == brute_force_order(list(S[i]), descending).index(gt[i]) + 1
    rep = recall_from_ranks(ranks, sorted({1, min(5, n), n}), n, "x")
    assert rep.recall[n] == 100.0
