"""Kinematic keyframes: exact minimal waypoint extraction over end-effector
positions, and observation bundles around each waypoint."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange, ValidationError

DEFAULT_ETA = 0.05
STRIP_OFFSETS = (-4, -2, 0, 2, 4)


@dataclass(frozen=True)
class Keyframe:
    episode_id: str
    t_i: int
    waypoint_rank: int
    task_id: str


@dataclass
class KeyframeBundle:
    keyframe: Keyframe
    frames: tuple          # sorted, de-duplicated strip frame indices
    clipped: bool          # True when any offset fell outside [0, T-1]
    ee_pos: np.ndarray
    ee_quat: np.ndarray | None
    gripper: float
    progress: float
    task_description: str
    episode_index: int
    success: bool
    T: int

    @property
    def strip(self):
        """The five strip frame indices before de-duplication."""
        return tuple(min(max(self.keyframe.t_i + o, 0), self.T - 1) for o in STRIP_OFFSETS)


def segment_error(traj, i, j):
    """Max distance between ``traj[i..j]`` and the time-linear interpolation
    from ``traj[i]`` to ``traj[j]``."""
    traj = np.asarray(traj, dtype=np.float64)
    T = len(traj)
    if not (0 <= i < T and 0 <= j < T):
        raise IndexOutOfRange(f"segment ({i}, {j}) outside [0, {T})")
    if i >= j:
        raise IndexOutOfRange(f"segment needs i < j, got ({i}, {j})")
    u = (np.arange(i, j + 1) - i) / (j - i)
    interp = traj[i] + u[:, None] * (traj[j] - traj[i])
    return float(np.max(np.linalg.norm(traj[i:j + 1] - interp, axis=1)))


def feasibility(traj, eta):
    """``F[i, j]`` is True when segment (i, j) stays within ``eta``."""
    T = len(traj)
    F = np.zeros((T, T), dtype=bool)
    for i in range(T - 1):
        F[i, i + 1] = True
        for j in range(i + 2, T):
            F[i, j] = segment_error(traj, i, j) <= eta
    return F


def awe_extract(traj, eta=DEFAULT_ETA):
    """Smallest waypoint subsequence (always containing 0 and T-1) whose
    consecutive segments all stay within ``eta``; lexicographically smallest
    among the minimal ones."""
    traj = np.asarray(traj, dtype=np.float64)
    T = len(traj)
    if T < 2:
        raise ValidationError("awe_extract needs T >= 2")
    if not eta > 0:
        raise ValidationError("eta must be positive")
    F = feasibility(traj, eta)
    # hops[i] = fewest segments from i to T-1
    hops = np.full(T, np.iinfo(np.int64).max // 2, dtype=np.int64)
    hops[T - 1] = 0
    for i in range(T - 2, -1, -1):
        js = np.flatnonzero(F[i, i + 1:]) + i + 1
        hops[i] = 1 + hops[js].min()
    path = [0]
    i = 0
    while i != T - 1:
        js = np.flatnonzero(F[i, i + 1:]) + i + 1
        i = int(js[hops[js] == hops[i] - 1][0])
        path.append(i)
    return path


def make_bundles(rollout, waypoints, task_description="", episode_index=0):
    T = rollout.T
    out = []
    for rank, t in enumerate(waypoints):
        if not 0 <= t < T:
            raise IndexOutOfRange(f"{rollout.episode_id}: waypoint {t} outside [0, {T})")
        raw = [t + o for o in STRIP_OFFSETS]
        clipped_frames = [min(max(f, 0), T - 1) for f in raw]
        frames = tuple(sorted(set(clipped_frames)))
        b = KeyframeBundle(
            keyframe=Keyframe(rollout.episode_id, int(t), rank, rollout.task_id),
            frames=frames,
            clipped=any(f != c for f, c in zip(raw, clipped_frames)),
            ee_pos=np.asarray(rollout.ee_pos[t], dtype=np.float64),
            ee_quat=None if rollout.ee_quat is None else np.asarray(rollout.ee_quat[t], np.float64),
            gripper=float(rollout.gripper[t]),
            progress=t / (T - 1),
            task_description=task_description,
            episode_index=episode_index,
            success=rollout.success,
            T=T,
        )
        out.append(b)
    return out


def extract_suite(rset, eta=DEFAULT_ETA):
    """AWE bundles for every rollout, keyed by episode id (manifest order)."""
    per_task_index = {}
    out = {}
    for r in rset.rollouts:
        idx = per_task_index.get(r.task_id, 0)
        per_task_index[r.task_id] = idx + 1
        wps = awe_extract(r.ee_pos, eta)
        out[r.episode_id] = make_bundles(r, wps, rset.task_description(r.task_id), idx)
    return out


def mean_keyframes_per_rollout(bundles_by_episode):
    """Suite statistic; endpoints are counted as keyframes."""
    counts = [len(b) for b in bundles_by_episode.values()]
    return f"{np.mean(counts):.2f}" if counts else "0.00"


KEYFRAME_COLUMNS = ("task_id", "episode_id", "t_i", "waypoint_rank", "progress", "success")


def write_keyframes_csv(bundles_by_episode, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(KEYFRAME_COLUMNS)
        for bundles in bundles_by_episode.values():
            for b in bundles:
                k = b.keyframe
                w.writerow([k.task_id, k.episode_id, k.t_i, k.waypoint_rank,
                            f"{b.progress:.6f}", int(b.success)])


def read_keyframes_csv(path):
    """Keyframes grouped by episode as ``{episode_id: [Keyframe, ...]}``."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            k = Keyframe(row["episode_id"], int(row["t_i"]), int(row["waypoint_rank"]),
                         row["task_id"])
            out.setdefault(k.episode_id, []).append(k)
    return out
