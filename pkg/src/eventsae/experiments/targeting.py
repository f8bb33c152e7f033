"""Task specificity of cluster-selected features: zero each feature once on its
own task and once on a different task."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from ..intervention import latent_edit


@dataclass
class TargetRow:
    task_id: str
    cluster_id: str
    feature: int
    target_sr: float
    off_task_id: str
    off_sr: float


def select_features(clusters, score_matrix, alive, per_task=3, seed=0):
    """Up to ``per_task`` seeded clusters per task, each with its best alive feature."""
    alive = np.asarray(sorted(int(i) for i in alive))
    rng = np.random.default_rng(seed)
    row_of = {cid: r for r, cid in enumerate(score_matrix.cluster_ids)}
    by_task = {}
    for c in clusters:
        by_task.setdefault(c.task_id, []).append(c)
    picks = []
    for task_id in sorted(by_task):
        cs = by_task[task_id]
        chosen = sorted(rng.choice(len(cs), size=min(per_task, len(cs)), replace=False))
        for i in chosen:
            c = cs[i]
            scores = score_matrix.A[row_of[c.cluster_id], alive]
            picks.append((task_id, c.cluster_id, int(alive[int(np.argmax(scores))])))
    return picks


def _task_sr(world, params, task_index, feature, trials, seed, layer):
    hook = lambda x: latent_edit(params, x, [feature], 0.0)  # noqa: E731
    base = int(seed) * 1_000_003 + 500_000 + 1000 * task_index
    wins = [world.run_episode(task_index, base + j, hook=hook, layer=layer).success
            for j in range(trials)]
    return float(np.mean(wins))


def target_offtarget(world, clusters, params, score_matrix, alive, trials=5, seed=0, layer=1,
                     per_task=3):
    """Paired target / off-target SR table for cluster-selected features."""
    ids = [t.task_id for t in world.tasks]
    if len(ids) < 2:
        raise ValidationError("target/off-target probing needs at least two tasks")
    rng = np.random.default_rng([seed, 1])
    rows = []
    for task_id, cid, f in select_features(clusters, score_matrix, alive, per_task, seed):
        ti = ids.index(task_id)
        others = [j for j in range(len(ids)) if j != ti]
        oj = int(others[rng.integers(len(others))])
        rows.append(TargetRow(task_id, cid, f,
                              _task_sr(world, params, ti, f, trials, seed, layer),
                              ids[oj], _task_sr(world, params, oj, f, trials, seed, layer)))
    return rows


def summarize(rows):
    """``(mean target SR, mean off-target SR)`` over all rows."""
    if not rows:
        return float("nan"), float("nan")
    return (float(np.mean([r.target_sr for r in rows])),
            float(np.mean([r.off_sr for r in rows])))
