"""Hidden-state hooks built from an SAE and closed-loop intervention campaigns.

All edits are computed in float64. A latent edit only moves the state along the
decoder columns of the targeted features, so the SAE reconstruction error is
carried through unchanged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .errors import (EventSaeError, IndexOutOfRange, InsufficientAliveFeatures, InvalidConfig,
                     ZeroState)

MODES = ("latent_scale", "recon_only", "decoder_add", "joint_dropout")
DEFAULT_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class InterventionSpec:
    mode: str
    layer: int = 1
    features: tuple = ()
    alpha: float = 0.0
    episodes_per_condition: int = 100
    seed: int = 0
    per_feature: bool = False      # run every feature of S separately, report the mean
    topk_inference: bool = False   # per-state top-k encoding instead of the theta rule
    ranking: str = ""              # label carried into exported rows

    def validate(self, m=None):
        if self.mode not in MODES:
            raise InvalidConfig(f"mode {self.mode!r} not in {MODES}")
        if not self.alpha >= 0:
            raise InvalidConfig("alpha must be >= 0")
        if self.episodes_per_condition < 1:
            raise InvalidConfig("episodes_per_condition must be >= 1")
        S = list(self.features)
        if self.mode in ("latent_scale", "joint_dropout") and not S:
            raise InvalidConfig(f"{self.mode} needs a nonempty feature set")
        if self.mode == "decoder_add" and len(S) != 1 and not self.per_feature:
            raise InvalidConfig("decoder_add needs exactly one feature")
        if m is not None and any(not 0 <= i < m for i in S):
            raise IndexOutOfRange(f"feature ids must lie in [0, {m})")
        return self


@dataclass
class InterventionOutcome:
    sr: float
    delta_sr: float
    per_episode: list
    diagnostics: dict | None = None
    mode: str = ""
    layer: int = 1
    features: tuple = ()
    alpha: float = 0.0
    seed: int = 0
    ranking: str = ""
    per_feature: list = field(default_factory=list)
    partial: bool = False

    def row(self):
        return format_sr_delta(self.sr, self.delta_sr)


@dataclass
class DoseResponseCurve:
    alphas: list
    sr_at_alpha: list
    layer: int
    ranking: str
    features: tuple
    baseline_sr: float

    def spearman(self):
        if len(set(self.sr_at_alpha)) < 2:
            return float("nan")
        return float(spearmanr(self.alphas, self.sr_at_alpha).statistic)

    def monotone(self, tolerance=0.0):
        s = self.sr_at_alpha
        return all(b >= a - tolerance for a, b in zip(s, s[1:]))


def format_sr_delta(sr, delta):
    """``"48.8% (-21.2)"``; non-negative deltas carry a plus sign."""
    return f"{100 * sr:.1f}% ({delta:+.1f})"


def format_mean_std(values):
    v = 100 * np.asarray(values, dtype=np.float64)
    return f"{v.mean():.1f} ± {v.std(ddof=1) if len(v) > 1 else 0.0:.1f}"


# -- state edits -----------------------------------------------------------------------

def _encode(params, x, topk_inference):
    return params.encode(x, mode="topk" if topk_inference else "inference")


def latent_edit(params, x, S, alpha, topk_inference=False):
    """``x + W_dec (z' - z) / s`` with ``z'_i = alpha z_i`` on ``S``."""
    x = np.asarray(x, dtype=np.float64)
    S = np.asarray(sorted(set(int(i) for i in S)), dtype=np.int64)
    if S.size == 0:
        return x.copy()
    if S.min() < 0 or S.max() >= params.m:
        raise IndexOutOfRange(f"feature ids must lie in [0, {params.m})")
    z = _encode(params, x, topk_inference)
    zs = z[..., S]
    dz = alpha * zs - zs
    W = params.W_dec.astype(np.float64)[:, S]
    return x + ((dz @ W.T) / float(params.input_scale)).reshape(x.shape)


def recon_hook(params, x, topk_inference=False):
    x = np.asarray(x, dtype=np.float64)
    return params.decode(_encode(params, x, topk_inference)).reshape(x.shape)


def _cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def decoder_add(params, x, i, alpha, control_rng=None):
    """``x + alpha d_i`` with steering diagnostics.

    With ``control_rng`` a matched-norm random-direction edit is returned as
    well: ``(x', diag, x_ctrl)``; otherwise ``(x', diag)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= i < params.m:
        raise IndexOutOfRange(f"feature {i} outside [0, {params.m})")
    nx = float(np.linalg.norm(x))
    if nx == 0:
        raise ZeroState("state has zero norm; steering cosines are undefined")
    d = params.W_dec[:, i].astype(np.float64)
    upd = alpha * d
    xp = x + upd
    diag = {"rho": float(np.linalg.norm(upd) / nx), "c_before": _cos(x, d),
            "c_after": _cos(xp, d), "norm_x": nx, "norm_x_prime": float(np.linalg.norm(xp))}
    if control_rng is None:
        return xp, diag
    r = control_rng.standard_normal(x.shape)
    r *= np.linalg.norm(upd) / np.linalg.norm(r)
    return xp, diag, x + r


class _DiagAccumulator:
    def __init__(self):
        self.rows = []

    def mean(self):
        if not self.rows:
            return None
        return {k: float(np.mean([r[k] for r in self.rows])) for k in self.rows[0]}


def make_hook(params, spec, features=None):
    """State-edit function for one campaign cell; returns ``(hook, accumulator)``."""
    S = list(spec.features if features is None else features)
    acc = _DiagAccumulator()
    if spec.mode == "recon_only":
        return (lambda x: recon_hook(params, x, spec.topk_inference)), acc
    if spec.mode in ("latent_scale", "joint_dropout"):
        alpha = spec.alpha if spec.mode == "latent_scale" else 0.0
        return (lambda x: latent_edit(params, x, S, alpha, spec.topk_inference)), acc

    def steer(x):
        xp, diag = decoder_add(params, x, S[0], spec.alpha)
        acc.rows.append(diag)
        return xp
    return steer, acc


# -- campaigns ---------------------------------------------------------------------------

def _run_cell(world, params, spec, baseline, features):
    hook, acc = make_hook(params, spec, features)
    plan = world.episode_plan(spec.episodes_per_condition, spec.seed)
    wins = []
    try:
        for task, s in plan:
            wins.append(bool(world.run_episode(task, s, hook=hook, layer=spec.layer).success))
    except EventSaeError as e:
        e.partial = _outcome(spec, baseline, features, wins, acc, partial=True)
        raise
    return _outcome(spec, baseline, features, wins, acc)


def _outcome(spec, baseline, features, wins, acc, partial=False):
    sr = float(np.mean(wins)) if wins else 0.0
    return InterventionOutcome(sr=sr, delta_sr=100.0 * (sr - baseline), per_episode=wins,
                               diagnostics=acc.mean(), mode=spec.mode, layer=spec.layer,
                               features=tuple(features), alpha=spec.alpha, seed=spec.seed,
                               ranking=spec.ranking, partial=partial)


def run_intervention(world, params, spec, baseline_sr):
    """Closed-loop SR under the spec's hook, installed at every timestep.

    In per-feature mode every feature of ``S`` is edited on its own and the
    returned outcome carries the means over features.
    """
    spec.validate(params.m)
    if not spec.per_feature:
        return _run_cell(world, params, spec, baseline_sr, spec.features)
    cells = [_run_cell(world, params, spec, baseline_sr, (f,)) for f in spec.features]
    sr = float(np.mean([c.sr for c in cells]))
    return InterventionOutcome(sr=sr, delta_sr=float(np.mean([c.delta_sr for c in cells])),
                               per_episode=[], mode=spec.mode, layer=spec.layer,
                               features=tuple(spec.features), alpha=spec.alpha, seed=spec.seed,
                               ranking=spec.ranking, per_feature=cells)


def alpha_sweep(world, params, base_spec, alpha_grid=DEFAULT_GRID, baseline_sr=None):
    grid = [float(a) for a in alpha_grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise InvalidConfig("alpha grid must be strictly increasing")
    if grid[0] != 0.0 or grid[-1] != 1.0:
        raise InvalidConfig("alpha grid must include both 0 and 1")
    if baseline_sr is None:
        from .synthworld import baseline_sr as _bsr
        baseline_sr = _bsr(world, base_spec.episodes_per_condition, base_spec.seed)
    srs = []
    for a in grid:
        spec = InterventionSpec(**{**base_spec.__dict__, "mode": "latent_scale", "alpha": a})
        srs.append(run_intervention(world, params, spec, baseline_sr).sr)
    return DoseResponseCurve(grid, srs, base_spec.layer, base_spec.ranking,
                             tuple(base_spec.features), baseline_sr)


def joint_dropout(world, params, layer, n_features, seeds, alive, baseline_sr,
                  episodes_per_condition=100):
    """Zero ``n_features`` randomly chosen alive features jointly, once per seed."""
    alive = sorted(int(i) for i in (np.flatnonzero(alive) if np.asarray(alive).dtype == bool
                                    else alive))
    if n_features > len(alive):
        raise InsufficientAliveFeatures(f"need {n_features} alive features, have {len(alive)}")
    outs = []
    for s in seeds:
        S = tuple(int(i) for i in np.random.default_rng(s).choice(alive, n_features, replace=False))
        spec = InterventionSpec("joint_dropout", layer, S, 0.0, episodes_per_condition, s,
                                ranking="joint_dropout")
        if n_features == 0:
            outs.append(_run_cell(world, params, spec, baseline_sr, ()))
        else:
            outs.append(run_intervention(world, params, spec, baseline_sr))
    return outs


# -- export ------------------------------------------------------------------------------

OUTCOME_COLUMNS = ("mode", "layer", "ranking", "feature", "alpha", "sr", "delta_sr", "seed")


def outcome_rows(outcomes):
    """Flatten outcomes (expanding per-feature cells) into CSV rows."""
    for o in outcomes:
        for c in (o.per_feature or [o]):
            feat = ";".join(str(f) for f in c.features)
            yield [c.mode, c.layer, c.ranking, feat, f"{c.alpha:g}", f"{c.sr:.4f}",
                   f"{c.delta_sr:.1f}", c.seed]


def write_outcomes_csv(outcomes, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OUTCOME_COLUMNS)
        w.writerows(outcome_rows(outcomes))


def write_curve_csv(curves, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("layer", "ranking", "features", "alpha", "sr"))
        for c in curves:
            feat = ";".join(str(f) for f in c.features)
            for a, s in zip(c.alphas, c.sr_at_alpha):
                w.writerow([c.layer, c.ranking, feat, f"{a:g}", f"{s:.4f}"])
