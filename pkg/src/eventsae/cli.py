"""Command-line entry point: one verb per pipeline stage.

Exit codes: 0 success, 2 validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from .errors import EventSaeError, ValidationError
from .experiments import pipeline as P
from .sae import SaeTrainConfig
from .synthworld import WorldConfig

log = logging.getLogger("eventsae")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="master seed for the verb")
    p.add_argument("--config", help="JSON config file (sections mirror module configs)")
    p.add_argument("--out", default="out", help="work directory for inputs and outputs")
    p.add_argument("--layer", type=int, help="hook / activation layer")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _bool(s):
    return s.lower() in ("1", "true", "yes", "on")


_FLAG_TYPES = {"int": int, "float": float, "bool": _bool, "int | None": int}


def _add_fields(p, cls, prefix, skip=()):
    """One ``--prefix-name`` flag per dataclass field (annotations are strings)."""
    for f in fields(cls):
        if f.name in skip or f.type not in _FLAG_TYPES:
            continue
        p.add_argument(f"--{prefix}{f.name}".replace("_", "-"), dest=f"{prefix}{f.name}",
                       type=_FLAG_TYPES[f.type], metavar=f.type.split()[0].upper())


def build_parser():
    common = _common()
    ap = argparse.ArgumentParser(prog="eventsae", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate a rollout suite")
    p.add_argument("--manifest")

    p = sub.add_parser("synth-gen", parents=[common], help="generate a synthetic suite")
    _add_fields(p, WorldConfig, "world_", skip=("seed",))

    p = sub.add_parser("sae-train", parents=[common], help="train a BatchTopK SAE")
    p.add_argument("--manifest")
    _add_fields(p, SaeTrainConfig, "sae_", skip=("seed",))

    p = sub.add_parser("sae-eval", parents=[common], help="FVE, L0 and alive features")
    p.add_argument("--manifest")
    p.add_argument("--ckpt")

    p = sub.add_parser("keyframes", parents=[common], help="extract AWE keyframes")
    p.add_argument("--manifest")
    p.add_argument("--eta", type=float)

    p = sub.add_parser("cluster", parents=[common], help="cluster keyframes into events")
    p.add_argument("--manifest")
    p.add_argument("--keyframes")
    p.add_argument("--threshold", type=float)
    p.add_argument("--min-coverage", type=float)

    p = sub.add_parser("annotate", parents=[common], help="label clusters")
    p.add_argument("--manifest")
    p.add_argument("--clusters")
    p.add_argument("--events", help="event-log CSV used by the stub annotator")
    p.add_argument("--annotator", choices=("stub", "remote"))

    p = sub.add_parser("rank", parents=[common], help="rank SAE features")
    p.add_argument("--manifest")
    p.add_argument("--ckpt")
    p.add_argument("--clusters")
    p.add_argument("--K", type=int)
    p.add_argument("--preset", choices=sorted(P.K_PRESETS), help="named top-K budget")
    p.add_argument("--w", type=int)
    p.add_argument("--pad", choices=("replicate", "zero"))

    p = sub.add_parser("intervene", parents=[common], help="closed-loop zero-out campaigns")
    p.add_argument("--world")
    p.add_argument("--ckpt")
    p.add_argument("--rankings")
    p.add_argument("--scores")
    p.add_argument("--clusters")
    p.add_argument("--episodes", type=int)
    p.add_argument("--targeting-trials", type=int)
    p.add_argument("--dropout-features", type=int)

    p = sub.add_parser("sweep", parents=[common], help="alpha dose-response sweeps")
    p.add_argument("--world")
    p.add_argument("--ckpt")
    p.add_argument("--rankings")
    p.add_argument("--episodes", type=int)
    p.add_argument("--features", type=lambda s: [int(x) for x in s.split(",")])
    p.add_argument("--alphas", type=lambda s: [float(x) for x in s.split(",")])

    p = sub.add_parser("probe", parents=[common], help="success-prediction probe")
    p.add_argument("--manifest")
    p.add_argument("--ckpt")
    p.add_argument("--folds", type=int)

    sub.add_parser("report", parents=[common], help="emit tables and SVG figures")
    return ap


def _overrides(args):
    ov = {}
    a = vars(args)
    for key, val in a.items():
        if val is None:
            continue
        if key.startswith("world_"):
            ov[f"world.{key[6:]}"] = val
        elif key.startswith("sae_"):
            ov[f"sae.{key[4:]}"] = val
    simple = {"layer": "layer", "eta": "eta", "threshold": "threshold",
              "min_coverage": "min_coverage", "K": "K", "w": "w", "episodes": "episodes",
              "targeting_trials": "targeting_trials", "dropout_features": "dropout_features",
              "alphas": "alphas", "annotator": "annotator", "pad": "pad"}
    for key, name in simple.items():
        if a.get(key) is not None:
            ov[name] = a[key]
    if a.get("preset"):
        ov["K"] = P.K_PRESETS[a["preset"]]
    if a.get("folds") is not None:
        ov["probe.folds"] = a["folds"]
    if args.verb == "synth-gen":
        ov["world.seed"] = args.seed
    return ov


def run(args):
    cfg = P.load_config(args.config, _overrides(args))
    work = P.Work(args.out)
    pick = lambda name: getattr(args, name, None) or getattr(work, name)  # noqa: E731
    v, seed = args.verb, args.seed
    if v == "synth-gen":
        inputs = {}
        outputs, summary = P.stage_synth_gen(cfg, work, seed)
    elif v == "ingest":
        inputs = {"manifest": pick("manifest")}
        outputs, summary = P.stage_ingest(cfg, work, inputs["manifest"])
    elif v == "sae-train":
        inputs = {"manifest": pick("manifest")}
        outputs, summary = P.stage_sae_train(cfg, work, inputs["manifest"], seed)
    elif v == "sae-eval":
        inputs = {"manifest": pick("manifest"), "ckpt": pick("ckpt")}
        outputs, summary = P.stage_sae_eval(cfg, work, inputs["manifest"], inputs["ckpt"])
    elif v == "keyframes":
        inputs = {"manifest": pick("manifest")}
        outputs, summary = P.stage_keyframes(cfg, work, inputs["manifest"])
    elif v == "cluster":
        inputs = {"manifest": pick("manifest"), "keyframes": pick("keyframes")}
        outputs, summary = P.stage_cluster(cfg, work, inputs["manifest"], inputs["keyframes"])
    elif v == "annotate":
        inputs = {"manifest": pick("manifest"), "clusters": pick("clusters"),
                  "events": pick("events")}
        outputs, summary = P.stage_annotate(cfg, work, *inputs.values())
    elif v == "rank":
        inputs = {"manifest": pick("manifest"), "ckpt": pick("ckpt"), "clusters": pick("clusters")}
        outputs, summary = P.stage_rank(cfg, work, *inputs.values(), seed)
    elif v == "intervene":
        inputs = {"world": pick("world"), "ckpt": pick("ckpt"), "rankings": pick("rankings"),
                  "scores": pick("scores"), "clusters": pick("clusters")}
        outputs, summary = P.stage_intervene(cfg, work, *inputs.values(), seed)
    elif v == "sweep":
        inputs = {"world": pick("world"), "ckpt": pick("ckpt"), "rankings": pick("rankings")}
        outputs, summary = P.stage_sweep(cfg, work, *inputs.values(), seed, args.features)
    elif v == "probe":
        inputs = {"manifest": pick("manifest"), "ckpt": pick("ckpt")}
        outputs, summary = P.stage_probe(cfg, work, *inputs.values(), seed)
    elif v == "report":
        inputs = {}
        outputs, summary = P.stage_report(cfg, work)
    else:  # pragma: no cover - argparse rejects unknown verbs
        raise ValueError(v)
    P.write_run_record(work.out, v, cfg, seed, inputs, outputs)
    print(json.dumps({"verb": v, **summary}, sort_keys=True, default=str))
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ValidationError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except (EventSaeError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
