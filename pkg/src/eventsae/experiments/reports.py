"""Report tables and figures. Output bytes depend only on the inputs."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

from ..errors import IoError, ValidationError
from ..intervention import OUTCOME_COLUMNS, format_sr_delta, outcome_rows
from ..ranking import RANKING_COLUMNS, STRATEGIES
from . import plotting


@dataclass
class ReportBundle:
    score_matrix: object = None        # ranking.ScoreMatrix
    row_labels: list = field(default_factory=list)   # [(task_id, phase)] per cluster row
    feature_ids: list = field(default_factory=list)  # heatmap columns
    rankings: dict = field(default_factory=dict)     # strategy -> RankingResult
    overlaps: dict = field(default_factory=dict)     # (a, b) -> fraction
    campaigns: list = field(default_factory=list)    # InterventionOutcome
    curves: list = field(default_factory=list)       # DoseResponseCurve
    baseline_sr: float | None = None
    probe: object = None                             # ProbeResult
    targeting: list = field(default_factory=list)    # TargetRow

    def validate(self):
        if self.score_matrix is not None:
            m = self.score_matrix.m
            if any(not 0 <= f < m for f in self.feature_ids):
                raise ValidationError("heatmap feature id outside the score matrix")
            if len(self.row_labels) != len(self.score_matrix.cluster_ids):
                raise ValidationError("one row label per cluster is required")
        return self


def _csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_bytes(path, data):
    with open(path, "wb") as fh:
        fh.write(data)


def format_sr(sr):
    return f"{100 * sr:.1f}%"


def emit_reports(bundle, out_dir):
    """Write every report file; returns the sorted list of written paths."""
    bundle.validate()
    try:
        os.makedirs(out_dir, exist_ok=True)
        return sorted(_emit(bundle, out_dir))
    except OSError as e:
        raise IoError(f"cannot write reports to {out_dir}: {e}") from e


def _emit(b, out):
    written = []

    def path(name):
        p = os.path.join(out, name)
        written.append(p)
        return p

    # heatmap: clusters x selected features
    S = b.score_matrix
    rows = []
    if S is not None:
        for r, cid in enumerate(S.cluster_ids):
            task, phase = b.row_labels[r]
            rows.append([cid, task, phase or ""] + [f"{S.A[r, f]:.6g}" for f in b.feature_ids])
    _csv(path("heatmap.csv"), ["cluster_id", "task_id", "phase"] +
         [f"f{f}" for f in b.feature_ids], rows)
    if rows and b.feature_ids:
        vals = [[S.A[r, f] for f in b.feature_ids] for r in range(len(S.cluster_ids))]
        strips = [("task", [t for t, _ in b.row_labels]),
                  ("phase", [p or "" for _, p in b.row_labels])]
        _write_bytes(path("heatmap.svg"), plotting.heatmap_svg(
            vals, S.cluster_ids, b.feature_ids, strips, "event-aligned cluster scores"))

    # rankings and overlaps
    rank_rows = []
    for name in STRATEGIES:
        r = b.rankings.get(name)
        if r is None:
            continue
        for i, f in enumerate(r.top_k):
            rank_rows.append([name, f, "" if r.scores is None else f"{r.scores[f]:.6g}", i])
    _csv(path("rankings.csv"), RANKING_COLUMNS, rank_rows)
    _csv(path("overlap.csv"), ["ranking_a", "ranking_b", "overlap"],
         [[a, c, f"{v:.3f}"] for (a, c), v in sorted(b.overlaps.items())])

    # campaigns
    _csv(path("campaigns.csv"), OUTCOME_COLUMNS, list(outcome_rows(b.campaigns)))
    summary = []
    if b.baseline_sr is not None and b.campaigns:
        summary.append(["baseline", "", format_sr(b.baseline_sr)])
    for o in b.campaigns:
        summary.append([o.ranking or o.mode, o.mode, format_sr_delta(o.sr, o.delta_sr)])
    _csv(path("campaign_table.csv"), ["condition", "mode", "sr_delta"], summary)

    # dose response
    curve_rows = [[c.layer, c.ranking, ";".join(map(str, c.features)), f"{a:g}", f"{s:.4f}"]
                  for c in b.curves for a, s in zip(c.alphas, c.sr_at_alpha)]
    _csv(path("dose_response.csv"), ["layer", "ranking", "features", "alpha", "sr"], curve_rows)
    if b.curves:
        data = [(f"L{c.layer} {c.ranking} {';'.join(map(str, c.features))}", c.alphas,
                 c.sr_at_alpha) for c in b.curves]
        _write_bytes(path("dose_response.svg"), plotting.curves_svg(data))

    # probe and targeting
    probe_rows = []
    if b.probe is not None:
        probe_rows = [[k, f"{v:.3f}", b.probe.folds, b.probe.seed]
                      for k, v in b.probe.balanced_accuracy.items()]
    _csv(path("probe.csv"), ["condition", "balanced_accuracy", "folds", "seed"], probe_rows)
    trows = [[r.task_id, r.cluster_id, r.feature, f"{r.target_sr:.3f}", r.off_task_id,
              f"{r.off_sr:.3f}"] for r in b.targeting]
    if trows:
        t = sum(r.target_sr for r in b.targeting) / len(b.targeting)
        o = sum(r.off_sr for r in b.targeting) / len(b.targeting)
        trows.append(["all", "", "", f"{t:.3f}", "", f"{o:.3f}"])
    _csv(path("target_offtarget.csv"),
         ["task_id", "cluster_id", "feature", "target_sr", "off_task_id", "off_sr"], trows)
    return written
