import numpy as np
import pytest

from eventsae.errors import EmptyClusterSet, InsufficientAliveFeatures, ValidationError
from eventsae.events import EventCluster
from eventsae.keyframes import Keyframe
from eventsae.ranking import (RankingResult, event_aligned, make_templates, overlap_table,
                              per_event_score, random_alive, rank_all, raw_templates,
                              read_rankings_csv, task_mean, top_k_ids, top_k_overlap, window,
                              window_mean, write_rankings_csv)

from oracles import event_aligned_loop, task_mean_loop, window_mean_loop


def random_instance(rng, n_clusters=3, m=2, n_eps=2, T=12):
    codes = {f"e{i}": np.maximum(rng.standard_normal((T, m)), 0) for i in range(n_eps)}
    clusters = []
    for r in range(n_clusters):
        ks = [Keyframe(f"e{int(rng.integers(n_eps))}", int(rng.integers(T)), 0, "t")
              for _ in range(int(rng.integers(1, 5)))]
        clusters.append(EventCluster(f"t/c{r}", "t", ks, 1.0))
    return codes, clusters


def Qmat(w):
    t = make_templates(w)
    return [t[k].values for k in ("pulse", "up", "down")]


def test_raw_templates():
    r = raw_templates(5)
    assert r["pulse"][5] == 1.0 and r["pulse"][0] == pytest.approx(1 / 6)
    assert raw_templates(1)["up"].tolist() == [-1, 1, 1]


def test_templates_centered_unit():
    for t in make_templates(3).values():
        assert abs(t.values.sum()) < 1e-12 and np.linalg.norm(t.values) == pytest.approx(1)
    with pytest.raises(ValidationError):
        make_templates(0)


def test_per_event_score_examples():
    t = make_templates(5)
    assert per_event_score(np.full(11, 3.0), t["pulse"]) == 0.0
    assert per_event_score(t["pulse"].values + 7.0, t["pulse"]) == pytest.approx(1.0)
    assert per_event_score(-t["up"].values, t["up"]) == 0.0


def test_window_padding():
    Z = np.arange(5.0)[:, None]
    assert window(Z, 0, 2).ravel().tolist() == [0, 0, 0, 1, 2]
    assert window(Z, 4, 2, pad="zero").ravel().tolist() == [2, 3, 4, 0, 0]
    with pytest.raises(ValidationError):
        window(Z, 0, 1, pad="wrap")


def test_single_event_reduces_to_template_max():
    rng = np.random.default_rng(0)
    Z = rng.random((20, 3))
    c = EventCluster("t/c", "t", [Keyframe("e", 10, 0, "t")], 1.0)
    S, R = event_aligned({"e": Z}, [c], 5)
    for f in range(3):
        tr = Z[5:16, f]
        assert S.A[0, f] == pytest.approx(max(per_event_score(tr, t)
                                              for t in make_templates(5).values()))
    assert np.array_equal(R, S.A[0])


def test_equal_episode_weighting():
    # feature 0 carries a scaled pulse in each episode: scores 0.2 and 0.8
    q = make_templates(2)["pulse"].values
    codes = {"a": np.zeros((5, 1)), "b": np.zeros((5, 1))}
    codes["a"][:, 0] = 0.2 * q + 1
    codes["b"][:, 0] = 0.8 * q + 1
    c = EventCluster("t/c", "t", [Keyframe("a", 2, 0, "t"), Keyframe("b", 2, 0, "t")], 1.0)
    S, _ = event_aligned(codes, [c], 2)
    assert S.A[0, 0] == pytest.approx(0.5)


def test_window_mean_examples():
    codes = {"a": np.full((8, 2), 0.7)}
    c = EventCluster("t/c", "t", [Keyframe("a", 1, 0, "t")], 1.0)
    assert np.allclose(window_mean(codes, [c], 2), 0.7)
    codes = {"a": np.zeros((20, 1))}
    codes["a"][:6] = 1.0
    c1 = EventCluster("t/c1", "t", [Keyframe("a", 0, 0, "t")], 1.0)
    c3 = EventCluster("t/c3", "t", [Keyframe("a", 15, 0, "t")] * 3, 1.0)
    assert window_mean(codes, [c1, c3], 2)[0] == pytest.approx(0.25)


def test_task_mean_examples():
    assert task_mean({"a": np.array([[1.0, 0.0, 2.0]])}).tolist() == [1.0, 0.0, 2.0]
    with pytest.raises(ValidationError):
        task_mean({})


@pytest.mark.parametrize("seed", range(10))
def test_brute_force_oracles(seed):
    rng = np.random.default_rng(seed)
    for w in (1, 2, 5):
        codes, clusters = random_instance(rng, m=int(rng.integers(1, 4)))
        S, R = event_aligned(codes, clusters, w)
        A = event_aligned_loop(codes, clusters, w, Qmat(w))
        assert np.max(np.abs(S.A - A)) < 1e-9
        assert np.max(np.abs(R - A.mean(axis=0))) < 1e-9
        assert np.max(np.abs(window_mean(codes, clusters, w)
                             - window_mean_loop(codes, clusters, w))) < 1e-9
        assert np.max(np.abs(task_mean(codes) - task_mean_loop(codes))) < 1e-9


def test_constant_feature_scores_zero_even_at_edges():
    codes = {"a": np.hstack([np.full((10, 1), 2.0), np.random.default_rng(1).random((10, 1))])}
    c = EventCluster("t/c", "t", [Keyframe("a", 0, 0, "t"), Keyframe("a", 9, 0, "t")], 1.0)
    S, _ = event_aligned(codes, [c], 5)
    assert S.A[0, 0] == 0.0


def test_scores_invariant_to_feature_offset():
    rng = np.random.default_rng(2)
    codes, clusters = random_instance(rng)
    shifted = {k: v + 3.0 for k, v in codes.items()}
    assert np.allclose(event_aligned(codes, clusters)[0].A, event_aligned(shifted, clusters)[0].A)


def test_empty_clusters():
    with pytest.raises(EmptyClusterSet):
        event_aligned({"a": np.zeros((3, 1))}, [])


def test_top_k_ties_and_candidates():
    assert top_k_ids([1.0, 3.0, 3.0, 0.5], 2) == [1, 2]
    assert top_k_ids([1.0, 3.0, 3.0, 0.5], 2, candidates=[0, 3]) == [0, 3]


def test_random_alive_contract():
    alive = range(1, 11)
    a = random_alive(alive, {2, 5}, 3, seed=4)
    assert len(a) == 3 and not set(a) & {2, 5}
    assert a == random_alive(alive, {2, 5}, 3, seed=4)
    with pytest.raises(InsufficientAliveFeatures):
        random_alive([1, 2], [1, 2, 3], 1, seed=0)


def test_overlap():
    a = RankingResult("a", [1, 2, 3])
    assert top_k_overlap(a, a, 3) == 1.0
    assert top_k_overlap(a, RankingResult("b", [4, 5, 6]), 3) == 0.0
    with pytest.raises(ValidationError):
        RankingResult("c", [1, 1])
    with pytest.raises(ValidationError):
        top_k_overlap(a, a, 4)


def test_rank_all_random_is_disjoint(tmp_path):
    rng = np.random.default_rng(3)
    codes, clusters = random_instance(rng, m=20)
    res, _ = rank_all(codes, clusters, np.ones(20, bool), K=3, seed=1)
    table = overlap_table(res, 3)
    for other in ("event_aligned", "window_mean", "task_mean"):
        key = (other, "random_alive")
        assert table[key] == 0.0
    write_rankings_csv(res, tmp_path / "r.csv")
    back = read_rankings_csv(tmp_path / "r.csv")
    assert {k: v.top_k for k, v in back.items()} == {k: v.top_k for k, v in res.items()}


def test_scale_equivariance_and_episode_balance():
    rng = np.random.default_rng(4)
    codes, clusters = random_instance(rng, m=3)
    scaled = {k: 2.5 * v for k, v in codes.items()}
    assert np.allclose(event_aligned(scaled, clusters)[0].A, 2.5 * event_aligned(codes, clusters)[0].A)
    assert np.allclose(window_mean(scaled, clusters), 2.5 * window_mean(codes, clusters))
    assert np.allclose(task_mean(scaled), 2.5 * task_mean(codes))
    doubled = [EventCluster(c.cluster_id, c.task_id, c.members + c.members, 1.0) for c in clusters]
    assert np.allclose(event_aligned(codes, doubled)[0].A, event_aligned(codes, clusters)[0].A)
