"""Event descriptors, task-local agglomerative clustering, recurrence filtering."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import AllZeroDescriptor, ValidationError
from .keyframes import Keyframe

DEFAULT_THRESHOLD = 0.18
DEFAULT_MIN_COVERAGE = 0.5
PHASES = ("pre_grasp", "immobilization", "contact", "detach", "post_grasp", "transition")


@dataclass(frozen=True)
class DescriptorWeights:
    lambda_v: float = 1.0
    lambda_s: float = 0.5
    lambda_p: float = 0.4

    def __post_init__(self):
        ws = (self.lambda_v, self.lambda_s, self.lambda_p)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ValidationError(f"descriptor weights must be >= 0 and not all zero: {ws}")


@dataclass
class EventDescriptor:
    vector: np.ndarray
    dims: tuple  # (visual_dim, state_dim, progress_dim)


@dataclass
class EventCluster:
    cluster_id: str
    task_id: str
    members: list
    coverage: float
    phrase: str | None = None
    phase: str | None = None
    label: str | None = field(default=None, repr=False)  # ground-truth event type, if known

    def __post_init__(self):
        if not self.members:
            raise ValidationError(f"cluster {self.cluster_id} has no members")
        if any(k.task_id != self.task_id for k in self.members):
            raise ValidationError(f"cluster {self.cluster_id} mixes tasks")
        if self.phase is not None and self.phase not in PHASES:
            raise ValidationError(f"phase {self.phase!r} not in {PHASES}")

    @property
    def n_events(self):
        return len(self.members)

    def episodes(self):
        return sorted({k.episode_id for k in self.members})


def _unit(v):
    v = np.asarray(v, dtype=np.float64).ravel()
    if not np.all(np.isfinite(v)):
        raise ValidationError("descriptor components must be finite")
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.zeros_like(v)


def progress_block(p):
    """Progress in [0, 1] as a unit 2-vector on the quarter circle."""
    a = 0.5 * np.pi * float(p)
    return np.array([np.cos(a), np.sin(a)])


def bundle_state(bundle):
    """Robot state vector: ee position, orientation (if logged), gripper."""
    parts = [bundle.ee_pos]
    if bundle.ee_quat is not None:
        parts.append(bundle.ee_quat)
    parts.append([bundle.gripper])
    return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])


def bundle_visual(visual, bundle):
    """Concatenate per-frame visual embeddings over the five-frame strip."""
    return np.concatenate([np.asarray(visual[f], dtype=np.float64) for f in bundle.strip])


def build_descriptor(bundle, visual_embed, state_vec, weights=DescriptorWeights()):
    v = _unit(visual_embed)
    s = _unit(state_vec)
    p = progress_block(bundle.progress)
    raw = np.concatenate([weights.lambda_v * v, weights.lambda_s * s, weights.lambda_p * p])
    n = np.linalg.norm(raw)
    if n == 0:
        raise AllZeroDescriptor(f"all descriptor components are zero for {bundle.keyframe}")
    return EventDescriptor(vector=raw / n, dims=(v.size, s.size, p.size))


def cosine_distances(X):
    X = np.asarray(X, dtype=np.float64)
    D = 1.0 - X @ X.T
    np.clip(D, 0.0, 2.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def cluster_events(descriptors, threshold=DEFAULT_THRESHOLD):
    """Average-linkage agglomerative clustering on cosine distance.

    Merging stops once the closest pair of clusters is farther apart than
    ``threshold``. Equal merge distances resolve to the pair with the smallest
    (min member index, min member index). Returns sorted member-index lists,
    ordered by their smallest member.
    """
    X = np.array([getattr(d, "vector", d) for d in descriptors], dtype=np.float64)
    n = len(X)
    if n == 0:
        raise ValidationError("cluster_events needs at least one descriptor")
    if not 0 < threshold < 2:
        raise ValidationError("threshold must lie in (0, 2)")
    S = cosine_distances(X)  # S[a, b] = sum of pairwise distances between clusters a, b
    size = np.ones(n)
    members = {i: [i] for i in range(n)}
    active = np.ones(n, dtype=bool)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    while active.sum() > 1:
        avg = S / np.outer(size, size)
        valid = upper & np.outer(active, active)
        avg = np.where(valid, avg, np.inf)
        flat = int(np.argmin(avg))
        a, b = divmod(flat, n)
        if avg[a, b] > threshold:
            break
        S[a, :] += S[b, :]
        S[:, a] += S[:, b]
        size[a] += size[b]
        active[b] = False
        members[a].extend(members.pop(b))
    return [sorted(members[i]) for i in sorted(members)]


def coverage_of(member_keyframes, n_episodes_in_task):
    if n_episodes_in_task < 1:
        raise ValidationError("task has no episodes")
    return len({k.episode_id for k in member_keyframes}) / n_episodes_in_task


def filter_recurring(clusters, n_episodes_in_task, min_coverage=DEFAULT_MIN_COVERAGE):
    """Keep clusters whose members span at least ``min_coverage`` of the task's
    episodes (boundary inclusive)."""
    if not 0 < min_coverage <= 1:
        raise ValidationError("min_coverage must lie in (0, 1]")
    out = []
    for c in clusters:
        distinct = len({k.episode_id for k in c.members})
        if distinct >= min_coverage * n_episodes_in_task - 1e-9:
            out.append(c)
    return out


def cluster_suite(rset, bundles_by_episode, weights=DescriptorWeights(),
                  threshold=DEFAULT_THRESHOLD, min_coverage=DEFAULT_MIN_COVERAGE):
    """Cluster every task independently. Returns ``(all_clusters, retained)``.

    Rollouts without precomputed visual embeddings contribute a zero visual
    block.
    """
    by_ep = rset.by_episode()
    task_order = [t["task_id"] for t in rset.tasks]
    all_clusters, retained = [], []
    for task_id in task_order:
        eps = [r.episode_id for r in rset.rollouts if r.task_id == task_id]
        bundles = [b for e in eps for b in bundles_by_episode.get(e, [])]
        if not bundles:
            continue
        descs = []
        for b in bundles:
            r = by_ep[b.keyframe.episode_id]
            vis = bundle_visual(r.visual, b) if r.visual is not None else np.zeros(1)
            descs.append(build_descriptor(b, vis, bundle_state(b), weights).vector)
        groups = cluster_events(descs, threshold)
        task_clusters = []
        for ci, g in enumerate(groups):
            mem = [bundles[i].keyframe for i in g]
            task_clusters.append(EventCluster(
                cluster_id=f"{task_id}/c{ci:03d}", task_id=task_id, members=mem,
                coverage=coverage_of(mem, len(eps))))
        all_clusters.extend(task_clusters)
        retained.extend(filter_recurring(task_clusters, len(eps), min_coverage))
    return all_clusters, retained


# -- export ---------------------------------------------------------------------

CLUSTER_COLUMNS = ("cluster_id", "task_id", "size", "coverage", "phrase", "phase")


def write_clusters_csv(clusters, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CLUSTER_COLUMNS)
        for c in clusters:
            w.writerow([c.cluster_id, c.task_id, c.n_events, f"{c.coverage:.4f}",
                        c.phrase or "", c.phase or ""])


def clusters_to_json(clusters):
    return [{"cluster_id": c.cluster_id, "task_id": c.task_id, "coverage": c.coverage,
             "phrase": c.phrase, "phase": c.phase,
             "members": [[k.episode_id, k.t_i, k.waypoint_rank] for k in c.members]}
            for c in clusters]


def clusters_from_json(items):
    return [EventCluster(
        cluster_id=it["cluster_id"], task_id=it["task_id"],
        members=[Keyframe(e, int(t), int(r), it["task_id"]) for e, t, r in it["members"]],
        coverage=float(it["coverage"]), phrase=it.get("phrase"), phase=it.get("phase"))
        for it in items]


def save_clusters(clusters, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(clusters_to_json(clusters), fh, indent=1)


def load_clusters(path):
    with open(path, encoding="utf-8") as fh:
        return clusters_from_json(json.load(fh))
