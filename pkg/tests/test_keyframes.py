import numpy as np
import pytest

from eventsae.errors import IndexOutOfRange, ValidationError
from eventsae.keyframes import (awe_extract, extract_suite, feasibility, make_bundles,
                                mean_keyframes_per_rollout, read_keyframes_csv, segment_error,
                                write_keyframes_csv)

from conftest import make_rollout, make_set
from oracles import awe_count_dp, awe_count_exhaustive, seg_err_loop

TRI = np.array([[0, 0, 0], [1, 1, 0], [2, 0, 0]], dtype=float)


def test_segment_error_examples():
    assert segment_error(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.]]), 0, 2) == 0.0
    assert segment_error(TRI, 0, 2) == 1.0


def test_segment_error_matches_loop():
    traj = np.random.default_rng(0).standard_normal((20, 3))
    for i in range(19):
        for j in range(i + 1, 20):
            assert segment_error(traj, i, j) == pytest.approx(seg_err_loop(traj, i, j), abs=1e-12)


def test_segment_error_bad_indices():
    with pytest.raises(IndexOutOfRange):
        segment_error(TRI, 2, 1)
    with pytest.raises(IndexOutOfRange):
        segment_error(TRI, 0, 3)


def test_straight_line_keeps_endpoints():
    traj = np.outer(np.linspace(0, 1, 12), [1.0, 2.0, -0.5])
    assert awe_extract(traj, 0.05) == [0, 11]


def test_triangle_forces_apex():
    assert awe_extract(TRI, 0.5) == [0, 1, 2]
    assert awe_extract(TRI, 1.0) == [0, 2]


def test_awe_errors():
    with pytest.raises(ValidationError):
        awe_extract(TRI[:1], 0.1)
    with pytest.raises(ValidationError):
        awe_extract(TRI, 0.0)


def random_traj(rng, T):
    return np.cumsum(0.05 * rng.standard_normal((T, 3)), axis=0)


def test_small_trajectories_match_exhaustive_search():
    rng = np.random.default_rng(1)
    for _ in range(30):
        traj = random_traj(rng, int(rng.integers(2, 10)))
        assert len(awe_extract(traj, 0.05)) == awe_count_exhaustive(traj, 0.05)


def test_random_trajectories_match_dp_and_stay_feasible():
    rng = np.random.default_rng(2)
    for _ in range(50):
        traj = random_traj(rng, int(rng.integers(2, 31)))
        eta = float(rng.uniform(0.02, 0.1))
        wp = awe_extract(traj, eta)
        assert len(wp) == awe_count_dp(traj, eta)
        assert wp[0] == 0 and wp[-1] == len(traj) - 1
        assert all(segment_error(traj, a, b) <= eta for a, b in zip(wp, wp[1:]))


def test_feasibility_adjacent_always_true():
    F = feasibility(np.random.default_rng(3).standard_normal((6, 3)) * 10, 1e-6)
    assert all(F[i, i + 1] for i in range(5))


def test_bundle_clipping_at_start():
    r = make_rollout(T=10)
    (b,) = make_bundles(r, [1])
    assert b.frames == (0, 1, 3, 5) and b.clipped
    assert b.strip == (0, 0, 1, 3, 5)


def test_bundle_last_frame_progress_one():
    r = make_rollout(T=10)
    bs = make_bundles(r, [0, 5, 9])
    assert bs[-1].progress == 1.0 and bs[0].progress == 0.0
    assert [b.keyframe.waypoint_rank for b in bs] == [0, 1, 2]
    assert not bs[1].clipped


def test_bundle_out_of_range():
    with pytest.raises(IndexOutOfRange):
        make_bundles(make_rollout(T=10), [10])


def test_suite_extraction_and_csv(tmp_path):
    rset = make_set(3, T=10)
    by_ep = extract_suite(rset)
    assert list(by_ep) == [r.episode_id for r in rset]
    float(mean_keyframes_per_rollout(by_ep))
    write_keyframes_csv(by_ep, tmp_path / "k.csv")
    back = read_keyframes_csv(tmp_path / "k.csv")
    assert {e: [b.keyframe for b in bs] for e, bs in by_ep.items()} == back
