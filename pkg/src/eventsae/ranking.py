"""Suite-level SAE feature rankings against retained event clusters.

Windows that run past an episode boundary are padded by repeating the edge
value by default, so a feature with constant activation scores zero everywhere;
``pad="zero"`` fills the missing slots with zeros instead.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EmptyClusterSet, InsufficientAliveFeatures, ValidationError

DEFAULT_W = 5
PADDING = ("replicate", "zero")
K_PRESETS = {"large": 5, "small": 3}  # top-K budgets for larger and smaller policies
STRATEGIES = ("event_aligned", "window_mean", "task_mean", "random_alive")


@dataclass
class Template:
    kind: str
    w: int
    values: np.ndarray


@dataclass
class ScoreMatrix:
    A: np.ndarray          # (n_clusters, m)
    cluster_ids: list
    m: int


@dataclass
class RankingResult:
    strategy: str
    top_k: list
    scores: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        if len(set(self.top_k)) != len(self.top_k):
            raise ValidationError(f"{self.strategy}: duplicate ids in top_k")


def raw_templates(w):
    delta = np.arange(-w, w + 1)
    pulse = 1.0 - np.abs(delta) / (w + 1)
    up = np.where(delta < 0, -1.0, 1.0)
    return {"pulse": pulse, "up": up, "down": -up}


def make_templates(w=DEFAULT_W):
    if w < 1:
        raise ValidationError("window radius w must be >= 1")
    out = {}
    for kind, q in raw_templates(w).items():
        q = q - q.mean()
        out[kind] = Template(kind, w, q / np.linalg.norm(q))
    return out


def window(codes, t, w, pad="replicate"):
    """Rows ``t-w .. t+w`` of ``codes`` (T, ...), padded past the edges."""
    T = len(codes)
    raw = np.arange(t - w, t + w + 1)
    out = codes[np.clip(raw, 0, T - 1)]
    if pad == "zero":
        out = np.where(((raw < 0) | (raw >= T)).reshape((-1,) + (1,) * (codes.ndim - 1)),
                       0.0, out)
    elif pad != "replicate":
        raise ValidationError(f"pad must be one of {PADDING}")
    return out


def per_event_score(trace, template):
    trace = np.asarray(trace, dtype=np.float64)
    q = getattr(template, "values", template)
    return float(max(np.dot(trace - trace.mean(), q), 0.0))


def _template_matrix(w):
    t = make_templates(w)
    return np.stack([t["pulse"].values, t["up"].values, t["down"].values])  # (3, 2w+1)


def _group_events(cluster):
    """{episode_id: [t_i, ...]} in first-seen order."""
    out = {}
    for k in cluster.members:
        out.setdefault(k.episode_id, []).append(k.t_i)
    return out


def _require(clusters):
    if not clusters:
        raise EmptyClusterSet("no retained clusters to score against")


def event_aligned(codes, clusters, w=DEFAULT_W, pad="replicate"):
    """Template-matched cluster scores ``A`` and their unweighted cluster mean."""
    _require(clusters)
    Q = _template_matrix(w)
    m = next(iter(codes.values())).shape[1]
    A = np.zeros((len(clusters), m))
    for r, c in enumerate(clusters):
        per_ep = []
        for eid, ts in _group_events(c).items():
            Z = np.asarray(codes[eid], dtype=np.float64)
            s = np.zeros((3, m))
            for t in ts:
                Wz = window(Z, t, w, pad)
                s += np.maximum(Q @ (Wz - Wz.mean(axis=0)), 0.0)
            per_ep.append((s / len(ts)).max(axis=0))
        A[r] = np.mean(per_ep, axis=0)
    return ScoreMatrix(A, [c.cluster_id for c in clusters], m), A.mean(axis=0)


def window_mean_matrix(codes, clusters, w=DEFAULT_W, pad="replicate"):
    _require(clusters)
    m = next(iter(codes.values())).shape[1]
    B = np.zeros((len(clusters), m))
    for r, c in enumerate(clusters):
        per_ep = []
        for eid, ts in _group_events(c).items():
            Z = np.asarray(codes[eid], dtype=np.float64)
            per_ep.append(np.mean([window(Z, t, w, pad).mean(axis=0) for t in ts], axis=0))
        B[r] = np.mean(per_ep, axis=0)
    return B


def window_mean(codes, clusters, w=DEFAULT_W, pad="replicate"):
    """Event-count-weighted mean of episode-balanced window means."""
    B = window_mean_matrix(codes, clusters, w, pad)
    n = np.array([c.n_events for c in clusters], dtype=np.float64)
    return (n[:, None] * B).sum(axis=0) / n.sum()


def task_mean(codes):
    rows = [np.asarray(z, dtype=np.float64) for z in codes.values()]
    if not rows or sum(len(z) for z in rows) == 0:
        raise ValidationError("task_mean needs at least one activation row")
    return np.concatenate(rows, axis=0).mean(axis=0)


def top_k_ids(scores, K, candidates=None):
    """Argmax-K with lower feature index winning ties."""
    scores = np.asarray(scores, dtype=np.float64)
    idx = np.arange(len(scores)) if candidates is None else np.asarray(sorted(candidates))
    order = np.lexsort((idx, -scores[idx]))
    return [int(i) for i in idx[order[:K]]]


def random_alive(alive, excluded, K, seed):
    pool = sorted(set(int(a) for a in alive) - set(int(e) for e in excluded))
    if len(pool) < K:
        raise InsufficientAliveFeatures(
            f"need {K} alive features outside the exclusion set, have {len(pool)}")
    rng = np.random.default_rng(seed)
    return [int(i) for i in rng.choice(pool, size=K, replace=False)]


def top_k_overlap(a, b, K):
    if len(a.top_k) < K or len(b.top_k) < K:
        raise ValidationError("both rankings need at least K ids")
    return len(set(a.top_k[:K]) & set(b.top_k[:K])) / K


def rank_all(codes, clusters, alive, K, w=DEFAULT_W, seed=0, pad="replicate"):
    """All four strategies; informed rankings choose among alive features only.

    Returns ``({strategy: RankingResult}, ScoreMatrix)``.
    """
    alive_ids = np.flatnonzero(np.asarray(alive)) if np.asarray(alive).dtype == bool else alive
    alive_ids = [int(i) for i in alive_ids]
    S, r_event = event_aligned(codes, clusters, w, pad)
    r_window = window_mean(codes, clusters, w, pad)
    r_task = task_mean(codes)
    out = {}
    for name, sc in (("event_aligned", r_event), ("window_mean", r_window), ("task_mean", r_task)):
        out[name] = RankingResult(name, top_k_ids(sc, K, alive_ids), sc)
    excluded = set().union(*(out[n].top_k for n in out))
    out["random_alive"] = RankingResult("random_alive", random_alive(alive_ids, excluded, K, seed),
                                        None, seed)
    return out, S


def overlap_table(results, K):
    """Pairwise top-K overlaps as ``{(a, b): fraction}`` for a < b in strategy order."""
    names = [s for s in STRATEGIES if s in results]
    return {(a, b): top_k_overlap(results[a], results[b], K)
            for i, a in enumerate(names) for b in names[i + 1:]}


RANKING_COLUMNS = ("strategy", "feature_id", "score", "rank")


def write_rankings_csv(results, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RANKING_COLUMNS)
        for name in STRATEGIES:
            if name not in results:
                continue
            r = results[name]
            for rank, f in enumerate(r.top_k):
                score = "" if r.scores is None else f"{r.scores[f]:.9g}"
                w.writerow([name, f, score, rank])


def read_rankings_csv(path):
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["strategy"], []).append(int(row["feature_id"]))
    return {k: RankingResult(k, v) for k, v in out.items()}
