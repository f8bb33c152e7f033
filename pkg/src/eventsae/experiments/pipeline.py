"""Pipeline stages as plain functions over a work directory.

Every stage reads its inputs from files written by earlier stages and writes
its own outputs, so stages run as independent processes. Paths default to
fixed names under the work directory.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import __version__
from ..annotation import RemoteAnnotator, StubAnnotator, annotate_all
from ..errors import InvalidConfig, MissingFile
from ..events import (DescriptorWeights, cluster_suite, load_clusters, save_clusters,
                      write_clusters_csv)
from ..intervention import (DEFAULT_GRID, InterventionSpec, alpha_sweep, joint_dropout,
                            run_intervention, write_curve_csv, write_outcomes_csv)
from ..keyframes import (extract_suite, make_bundles, mean_keyframes_per_rollout,
                         read_keyframes_csv, write_keyframes_csv)
from ..ranking import (K_PRESETS, STRATEGIES, RankingResult, ScoreMatrix, overlap_table,
                       rank_all, read_rankings_csv, write_rankings_csv)
from ..rollout_store import ingest, write_suite
from ..sae import (SaeTrainConfig, diagnostics_on, load_params, save_params, suite_codes,
                   train_sae)
from ..synthworld import (WorldConfig, baseline_sr, gen_world, generate_suite, load_world,
                          read_event_log, write_event_log, write_truth)
from .probe import ProbeConfig, success_probe
from .reports import ReportBundle, emit_reports
from .targeting import target_offtarget

# SAE settings sized for the synthetic world (the library defaults target
# large real-policy activation logs).
SYNTH_SAE = {"m": 48, "k": 6, "learning_rate": 3e-3, "batch_size": 1024, "steps": 3000,
             "warmup_steps": 100}


@dataclass
class PipelineConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    sae: SaeTrainConfig = field(default_factory=lambda: SaeTrainConfig(**SYNTH_SAE))
    layer: int = 1
    eta: float = 0.05
    weights: DescriptorWeights = field(default_factory=DescriptorWeights)
    threshold: float = 0.18
    min_coverage: float = 0.5
    w: int = 5
    pad: str = "replicate"         # edge padding for scoring windows
    K: int | None = None           # default: planted event count when known, else 5
    episodes: int = 100
    alphas: tuple = DEFAULT_GRID
    targeting_trials: int = 5
    dropout_features: int = 0
    dropout_seeds: tuple = (0, 1, 2)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    annotator: str = "stub"
    stub_tolerance: int = 2

    def to_json(self):
        d = asdict(self)
        d["alphas"] = list(self.alphas)
        d["dropout_seeds"] = list(self.dropout_seeds)
        return d

    def resolved_K(self):
        if self.K is not None:
            return int(self.K)
        return self.world.n_event_features or K_PRESETS["large"]


_NESTED = {"world": WorldConfig, "sae": SaeTrainConfig, "weights": DescriptorWeights,
           "probe": ProbeConfig}


def load_config(path=None, overrides=None):
    """JSON config (sections mirror the module config types) plus overrides."""
    raw = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise MissingFile(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"{p}: invalid JSON: {e}") from e
    for key, val in (overrides or {}).items():
        section, _, name = key.rpartition(".")
        target = raw.setdefault(section, {}) if section else raw
        target[name] = val
    return config_from_dict(raw)


def config_from_dict(raw):
    top = {f.name for f in fields(PipelineConfig)}
    unknown = set(raw) - top
    if unknown:
        raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
    kw = {}
    for key, val in raw.items():
        if key in _NESTED:
            cls = _NESTED[key]
            allowed = {f.name for f in fields(cls)}
            bad = set(val) - allowed
            if bad:
                raise InvalidConfig(f"unknown {key} keys: {sorted(bad)}")
            base = asdict(getattr(PipelineConfig(), key))
            base.update(val)
            try:
                kw[key] = cls(**base)
            except (TypeError, ValueError) as e:
                raise InvalidConfig(f"bad {key} section: {e}") from e
        elif key in ("alphas", "dropout_seeds"):
            kw[key] = tuple(val)
        else:
            kw[key] = val
    return PipelineConfig(**kw)


def config_hash(cfg):
    blob = json.dumps(cfg.to_json(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def versions():
    import matplotlib
    import scipy
    import sklearn
    return {"eventsae": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__, "matplotlib": matplotlib.__version__,
            "python": platform.python_version()}


def write_run_record(out, verb, cfg, seed, inputs, outputs):
    """Merge one verb's provenance into ``out/run.json``."""
    out = Path(out)
    path = out / "run.json"
    record = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    record.setdefault("runs", {})[verb] = {
        "config_hash": config_hash(cfg), "config": cfg.to_json(), "seed": int(seed),
        "inputs": {k: str(v) for k, v in sorted(inputs.items())},
        "outputs": sorted(str(Path(o).relative_to(out)) if Path(o).is_relative_to(out) else str(o)
                          for o in outputs)}
    record["versions"] = versions()
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


# -- work directory layout -------------------------------------------------------------

class Work:
    def __init__(self, out):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)

    def __getattr__(self, name):
        names = {"manifest": "suite/manifest.json", "events": "events.csv",
                 "world": "world.json", "ckpt": "sae.ckpt", "history": "sae_history.csv",
                 "sae_diag": "sae_diagnostics.json", "sae_eval": "sae_eval.json",
                 "keyframes": "keyframes.csv", "clusters": "clusters.json",
                 "clusters_csv": "clusters.csv", "clusters_all_csv": "clusters_all.csv",
                 "rankings": "rankings.csv", "scores": "score_matrix.json",
                 "campaigns": "campaigns.json", "campaigns_csv": "campaigns.csv",
                 "curves": "curves.json", "curves_csv": "dose_response.csv",
                 "targeting": "targeting.json", "probe": "probe.json", "report": "report",
                 "ingest": "ingest.json"}
        if name not in names:
            raise AttributeError(name)
        return self.out / names[name]


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _load(path):
    p = Path(path)
    if not p.exists():
        raise MissingFile(f"required input not found: {p}")
    return json.loads(p.read_text(encoding="utf-8"))


# -- stages ------------------------------------------------------------------------------

def stage_synth_gen(cfg, work, seed):
    world, _ = gen_world(cfg.world)
    rset, logs = generate_suite(world, seed=seed)
    write_suite(rset, work.manifest.parent)
    write_event_log(logs, work.events)
    write_truth(world, work.world)
    sr = float(np.mean([r.success for r in rset.rollouts]))
    return [work.manifest, work.events, work.world], {"episodes": len(rset), "success_rate": sr}


def stage_ingest(cfg, work, manifest):
    rset = ingest(manifest)
    summary = {"suite_id": rset.suite_id, "episodes": len(rset), "tasks": len(rset.tasks),
               "layers": rset.layers(), "rows": {str(L): rset.total_rows(L) for L in rset.layers()}}
    _dump(work.ingest, summary)
    return [work.ingest], summary


def stage_sae_train(cfg, work, manifest, seed):
    rset = ingest(manifest, layers=[cfg.layer])
    H, _ = rset.stacked(cfg.layer)
    sae_cfg = SaeTrainConfig(**{**asdict(cfg.sae), "seed": seed})
    params, history = train_sae(sae_cfg, H)
    save_params(params, work.ckpt)
    with open(work.history, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "mse", "aux", "l0", "dead"))
        for h in history:
            w.writerow([h["step"], f"{h['mse']:.8g}", f"{h['aux']:.8g}", f"{h['l0']:.4f}", h["dead"]])
    dg = diagnostics_on(params, H)
    summary = {"fve": dg.fve, "alive_fraction": dg.alive_fraction, "avg_l0": dg.avg_l0,
               "alive": [int(i) for i in np.flatnonzero(dg.alive)]}
    _dump(work.sae_diag, summary)
    return [work.ckpt, work.history, work.sae_diag], summary


def stage_sae_eval(cfg, work, manifest, ckpt):
    rset = ingest(manifest, layers=[cfg.layer])
    params = load_params(ckpt)
    H, _ = rset.stacked(cfg.layer)
    dg = diagnostics_on(params, H)
    summary = {"fve": dg.fve, "alive_fraction": dg.alive_fraction, "avg_l0": dg.avg_l0,
               "alive": [int(i) for i in np.flatnonzero(dg.alive)]}
    _dump(work.sae_eval, summary)
    return [work.sae_eval], summary


def stage_keyframes(cfg, work, manifest):
    rset = ingest(manifest, layers=[cfg.layer])
    bundles = extract_suite(rset, cfg.eta)
    write_keyframes_csv(bundles, work.keyframes)
    return [work.keyframes], {"mean_keyframes": mean_keyframes_per_rollout(bundles)}


def bundles_from_keyframes(rset, path):
    kfs = read_keyframes_csv(path)
    out, idx = {}, {}
    for r in rset.rollouts:
        i = idx.get(r.task_id, 0)
        idx[r.task_id] = i + 1
        ts = [k.t_i for k in sorted(kfs.get(r.episode_id, []), key=lambda k: k.waypoint_rank)]
        out[r.episode_id] = make_bundles(r, ts, rset.task_description(r.task_id), i)
    return out


def stage_cluster(cfg, work, manifest, keyframes):
    rset = ingest(manifest, layers=[cfg.layer])
    bundles = bundles_from_keyframes(rset, keyframes)
    all_c, kept = cluster_suite(rset, bundles, cfg.weights, cfg.threshold, cfg.min_coverage)
    save_clusters(kept, work.clusters)
    write_clusters_csv(kept, work.clusters_csv)
    write_clusters_csv(all_c, work.clusters_all_csv)
    return ([work.clusters, work.clusters_csv, work.clusters_all_csv],
            {"clusters": len(all_c), "retained": len(kept)})


def stage_annotate(cfg, work, manifest, clusters_path, events_path):
    rset = ingest(manifest, layers=[cfg.layer])
    clusters = load_clusters(clusters_path)
    if cfg.annotator == "stub":
        annotator = StubAnnotator(read_event_log(events_path), cfg.stub_tolerance)
    elif cfg.annotator == "remote":
        annotator = RemoteAnnotator()
    else:
        raise InvalidConfig(f"annotator must be 'stub' or 'remote', got {cfg.annotator!r}")
    descs = {t["task_id"]: t.get("description", "") for t in rset.tasks}
    annotate_all(clusters, annotator, descs)
    save_clusters(clusters, work.clusters)
    write_clusters_csv(clusters, work.clusters_csv)
    return [work.clusters, work.clusters_csv], {"annotated": len(clusters)}


def stage_rank(cfg, work, manifest, ckpt, clusters_path, seed):
    rset = ingest(manifest, layers=[cfg.layer])
    params = load_params(ckpt)
    clusters = load_clusters(clusters_path)
    codes = suite_codes(params, rset, cfg.layer)
    alive = np.flatnonzero(np.concatenate(list(codes.values())).max(axis=0) > 0)
    K = cfg.resolved_K()
    results, S = rank_all(codes, clusters, alive, K, cfg.w, seed, cfg.pad)
    write_rankings_csv(results, work.rankings)
    _dump(work.scores, {"cluster_ids": S.cluster_ids, "m": S.m, "A": S.A.tolist(),
                        "labels": [[c.task_id, c.phase] for c in clusters],
                        "alive": [int(a) for a in alive], "K": K,
                        "overlaps": [[a, b, v] for (a, b), v in overlap_table(results, K).items()]})
    return [work.rankings, work.scores], {"K": K, "alive": len(alive)}


def _load_scores(path):
    raw = _load(path)
    return ScoreMatrix(np.array(raw["A"], dtype=np.float64).reshape(len(raw["cluster_ids"]), raw["m"]),
                       raw["cluster_ids"], raw["m"]), raw


def _outcome_json(o):
    d = {"mode": o.mode, "layer": o.layer, "ranking": o.ranking, "features": list(o.features),
         "alpha": o.alpha, "sr": o.sr, "delta_sr": o.delta_sr, "seed": o.seed,
         "diagnostics": o.diagnostics}
    if o.per_feature:
        d["per_feature"] = [_outcome_json(c) for c in o.per_feature]
    return d


def _outcome_from_json(d):
    from ..intervention import InterventionOutcome
    return InterventionOutcome(sr=d["sr"], delta_sr=d["delta_sr"], per_episode=[],
                               diagnostics=d.get("diagnostics"), mode=d["mode"], layer=d["layer"],
                               features=tuple(d["features"]), alpha=d["alpha"], seed=d["seed"],
                               ranking=d["ranking"],
                               per_feature=[_outcome_from_json(c) for c in d.get("per_feature", [])])


def stage_intervene(cfg, work, world_path, ckpt, rankings_path, scores_path, clusters_path, seed):
    world, _ = load_world(world_path)
    params = load_params(ckpt)
    rankings = read_rankings_csv(rankings_path)
    n = cfg.episodes
    base = baseline_sr(world, n, seed, layer=cfg.layer)
    outcomes = [run_intervention(world, params, InterventionSpec(
        "recon_only", cfg.layer, (), 1.0, n, seed, ranking="hooked"), base)]
    for name in STRATEGIES:
        if name not in rankings:
            continue
        spec = InterventionSpec("latent_scale", cfg.layer, tuple(rankings[name].top_k), 0.0, n,
                                seed, per_feature=True, ranking=name)
        outcomes.append(run_intervention(world, params, spec, base))
    S, raw = _load_scores(scores_path)
    if cfg.dropout_features:
        for o in joint_dropout(world, params, cfg.layer, cfg.dropout_features, cfg.dropout_seeds,
                               raw["alive"], base, n):
            outcomes.append(o)
    write_outcomes_csv(outcomes, work.campaigns_csv)
    _dump(work.campaigns, {"baseline_sr": base, "outcomes": [_outcome_json(o) for o in outcomes]})
    written = [work.campaigns, work.campaigns_csv]
    if cfg.targeting_trials and len(world.tasks) > 1:
        rows = target_offtarget(world, load_clusters(clusters_path), params, S, raw["alive"],
                                cfg.targeting_trials, seed, cfg.layer)
        _dump(work.targeting, [asdict(r) for r in rows])
        written.append(work.targeting)
    return written, {"baseline_sr": base}


def stage_sweep(cfg, work, world_path, ckpt, rankings_path, seed, features=None):
    world, _ = load_world(world_path)
    params = load_params(ckpt)
    n = cfg.episodes
    base = baseline_sr(world, n, seed, layer=cfg.layer)
    cells = []
    if features:
        cells.append(("custom", tuple(features)))
    else:
        rankings = read_rankings_csv(rankings_path)
        cells = [(name, tuple(rankings[name].top_k)) for name in STRATEGIES if name in rankings]
    curves = [alpha_sweep(world, params, InterventionSpec(
        "latent_scale", cfg.layer, S, 0.0, n, seed, ranking=name), cfg.alphas, base)
        for name, S in cells]
    write_curve_csv(curves, work.curves_csv)
    _dump(work.curves, {"baseline_sr": base, "curves": [
        {"layer": c.layer, "ranking": c.ranking, "features": list(c.features),
         "alphas": c.alphas, "sr": c.sr_at_alpha} for c in curves]})
    return [work.curves, work.curves_csv], {"curves": len(curves)}


def stage_probe(cfg, work, manifest, ckpt, seed):
    rset = ingest(manifest, layers=[cfg.layer])
    params = load_params(ckpt)
    res = success_probe(rset, params, cfg.layer, cfg.probe.folds, seed, cfg.probe)
    _dump(work.probe, {"balanced_accuracy": res.balanced_accuracy, "folds": res.folds,
                       "seed": res.seed})
    return [work.probe], res.balanced_accuracy


def stage_report(cfg, work):
    """Collect whatever stage outputs exist into report tables and figures."""
    from ..experiments.probe import ProbeResult
    from ..experiments.targeting import TargetRow
    from ..intervention import DoseResponseCurve
    b = ReportBundle()
    if work.scores.exists():
        S, raw = _load_scores(work.scores)
        b.score_matrix = S
        b.row_labels = [tuple(x) for x in raw["labels"]]
        b.overlaps = {(a, c): v for a, c, v in raw["overlaps"]}
    if work.rankings.exists():
        ranked = read_rankings_csv(work.rankings)
        scores = {}
        with open(work.rankings, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["score"]:
                    scores.setdefault(row["strategy"], {})[int(row["feature_id"])] = float(row["score"])
        for name, r in ranked.items():
            sc = None
            if name in scores and b.score_matrix is not None:
                sc = np.zeros(b.score_matrix.m)
                for f, v in scores[name].items():
                    sc[f] = v
            b.rankings[name] = RankingResult(name, r.top_k, sc)
        if "event_aligned" in ranked:
            b.feature_ids = list(ranked["event_aligned"].top_k)
    if work.campaigns.exists():
        raw = _load(work.campaigns)
        b.baseline_sr = raw["baseline_sr"]
        b.campaigns = [_outcome_from_json(d) for d in raw["outcomes"]]
    if work.curves.exists():
        raw = _load(work.curves)
        b.curves = [DoseResponseCurve(c["alphas"], c["sr"], c["layer"], c["ranking"],
                                      tuple(c["features"]), raw["baseline_sr"])
                    for c in raw["curves"]]
    if work.probe.exists():
        raw = _load(work.probe)
        b.probe = ProbeResult(raw["balanced_accuracy"], raw["folds"], raw["seed"])
    if work.targeting.exists():
        b.targeting = [TargetRow(**r) for r in _load(work.targeting)]
    files = emit_reports(b, work.report)
    return files, {"files": len(files)}
