"""Rollout ingestion, validation and bit-exact persistence."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binfmt
from .errors import (
    IoError,
    MissingFile,
    NonFiniteActivation,
    ShapeMismatch,
    UnknownLayer,
    ValidationError,
)

MANIFEST_NAME = "manifest.json"
TRAJ_NAME = "traj.bin"
VISUAL_NAME = "visual.bin"
EPISODE_META = "episode.json"
_ACTS_RE = re.compile(r"acts_layer(\d+)\.bin$")


def acts_name(layer):
    return f"acts_layer{int(layer)}.bin"


@dataclass(eq=False)
class Rollout:
    """One episode: end-effector trajectory, gripper, and per-layer hidden states.

    ``activations[layer]`` is ``(T, d)`` or ``(T, n_tokens, d)``. ``visual`` holds
    optional precomputed per-frame embeddings ``(T, V)``.
    """

    episode_id: str
    task_id: str
    success: bool
    ee_pos: np.ndarray
    gripper: np.ndarray
    activations: dict = field(default_factory=dict)
    ee_quat: np.ndarray | None = None
    visual: np.ndarray | None = None

    def __post_init__(self):
        self.ee_pos = np.asarray(self.ee_pos, dtype=np.float32)
        self.gripper = np.asarray(self.gripper, dtype=np.float32)
        if self.ee_quat is not None:
            self.ee_quat = np.asarray(self.ee_quat, dtype=np.float32)
        if self.visual is not None:
            self.visual = np.asarray(self.visual, dtype=np.float32)
        self.activations = {
            int(k): np.asarray(v, dtype=np.float32) for k, v in self.activations.items()
        }
        self.success = bool(self.success)

    @property
    def T(self):
        return int(self.ee_pos.shape[0])

    def validate(self, declared_T=None):
        eid = self.episode_id
        T = self.T if declared_T is None else int(declared_T)
        if T < 2:
            raise ShapeMismatch(f"{eid}: length_T must be >= 2, got {T}")
        if self.ee_pos.shape != (T, 3):
            raise ShapeMismatch(f"{eid}: ee_pos shape {self.ee_pos.shape}, expected ({T}, 3)")
        if self.gripper.shape != (T,):
            raise ShapeMismatch(f"{eid}: gripper shape {self.gripper.shape}, expected ({T},)")
        if self.ee_quat is not None:
            if self.ee_quat.shape != (T, 4):
                raise ShapeMismatch(
                    f"{eid}: ee_quat shape {self.ee_quat.shape}, expected ({T}, 4)"
                )
            norms = np.linalg.norm(self.ee_quat.astype(np.float64), axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ShapeMismatch(f"{eid}: ee_quat rows are not unit quaternions")
        if self.visual is not None and self.visual.shape[0] != T:
            raise ShapeMismatch(f"{eid}: visual has {self.visual.shape[0]} rows, expected {T}")
        for layer, a in sorted(self.activations.items()):
            if a.ndim not in (2, 3) or a.shape[0] != T:
                raise ShapeMismatch(
                    f"{eid}: layer {layer} activations shape {a.shape}, expected ({T}, ...)"
                )
            bad = ~np.isfinite(a)
            if bad.any():
                t = int(np.argwhere(bad)[0][0])
                raise NonFiniteActivation(
                    f"{eid}: non-finite activation at timestep {t}, layer {layer}",
                )
        return self

    def rows(self, layer):
        """Activations at ``layer`` flattened to ``(rows, d)`` with their timesteps."""
        if layer not in self.activations:
            raise UnknownLayer(f"{self.episode_id}: no activations for layer {layer}")
        a = self.activations[layer]
        if a.ndim == 2:
            return a, np.arange(self.T)
        n_tok = a.shape[1]
        return a.reshape(-1, a.shape[2]), np.repeat(np.arange(self.T), n_tok)

    def __eq__(self, other):
        if not isinstance(other, Rollout):
            return NotImplemented
        if (self.episode_id, self.task_id, self.success) != (
            other.episode_id, other.task_id, other.success
        ):
            return False
        if sorted(self.activations) != sorted(other.activations):
            return False
        pairs = [(self.ee_pos, other.ee_pos), (self.gripper, other.gripper),
                 (self.ee_quat, other.ee_quat), (self.visual, other.visual)]
        pairs += [(self.activations[k], other.activations[k]) for k in self.activations]
        return all(_bit_equal(a, b) for a, b in pairs)


def _bit_equal(a, b):
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass
class ActivationBatch:
    data: np.ndarray
    provenance: list

    def __post_init__(self):
        if len(self.data) < 1 or len(self.provenance) != len(self.data):
            raise ValidationError("ActivationBatch needs B >= 1 rows with matching provenance")


@dataclass
class RolloutSet:
    suite_id: str
    tasks: list
    rollouts: list

    def __len__(self):
        return len(self.rollouts)

    def __iter__(self):
        return iter(self.rollouts)

    def task_description(self, task_id):
        for t in self.tasks:
            if t["task_id"] == task_id:
                return t["description"]
        raise KeyError(task_id)

    def by_episode(self):
        return {r.episode_id: r for r in self.rollouts}

    def layers(self):
        common = None
        for r in self.rollouts:
            ls = set(r.activations)
            common = ls if common is None else common & ls
        return sorted(common or ())

    def total_rows(self, layer):
        return sum(r.rows(layer)[0].shape[0] for r in self.rollouts)

    def stacked(self, layer):
        """All rows at ``layer`` in manifest order, with (episode_id, t) provenance."""
        mats, prov = [], []
        for r in self.rollouts:
            a, ts = r.rows(layer)
            mats.append(a)
            prov.extend((r.episode_id, int(t)) for t in ts)
        return np.concatenate(mats, axis=0), prov


def activation_batches(rset, layer, batch_size, seed):
    """One epoch of shuffled batches; the final partial batch is kept."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    for r in rset.rollouts:
        if layer not in r.activations:
            raise UnknownLayer(f"layer {layer} missing from episode {r.episode_id}")
    data, prov = rset.stacked(layer)
    order = np.random.default_rng(seed).permutation(len(data))
    out = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        out.append(ActivationBatch(data[idx], [prov[i] for i in idx]))
    return out


# -- persistence -------------------------------------------------------------

def write_rollout(rollout, path):
    """Write one episode directory (trajectory, per-layer activations, metadata)."""
    path = Path(path)
    quat = rollout.ee_quat if rollout.ee_quat is not None else np.zeros((0, 4), np.float32)
    binfmt.write_file(path / TRAJ_NAME, binfmt.pack_tensors([rollout.ee_pos, quat, rollout.gripper]))
    for layer, a in sorted(rollout.activations.items()):
        binfmt.write_file(path / acts_name(layer), binfmt.pack_tensors([a]))
    if rollout.visual is not None:
        binfmt.write_file(path / VISUAL_NAME, binfmt.pack_tensors([rollout.visual]))
    meta = {"episode_id": rollout.episode_id, "task_id": rollout.task_id,
            "success": rollout.success, "length_T": rollout.T,
            "layers": sorted(rollout.activations)}
    binfmt.write_file(path / EPISODE_META, json.dumps(meta, indent=1).encode())


def _read_single(path):
    _, arrays = binfmt.unpack_tensors(binfmt.read_file(path), path=str(path))
    if len(arrays) != 1:
        raise IoError(f"{path}: expected one tensor, found {len(arrays)}")
    return arrays[0]


def _read_traj(path):
    _, arrays = binfmt.unpack_tensors(binfmt.read_file(path), path=str(path))
    if len(arrays) != 3:
        raise IoError(f"{path}: expected 3 trajectory tensors, found {len(arrays)}")
    pos, quat, grip = arrays
    return pos, (quat if quat.shape[0] else None), grip


def _layer_files(path):
    found = {}
    for p in Path(path).iterdir():
        m = _ACTS_RE.match(p.name)
        if m:
            found[int(m.group(1))] = p
    return found


def read_rollout(path, episode_id=None, task_id=None, success=None, layers=None):
    """Read an episode directory written by :func:`write_rollout`.

    Identity fields come from ``episode.json`` unless given explicitly (manifest
    ingestion passes them). ``layers`` restricts which activation files are read.
    """
    path = Path(path)
    meta_path = path / EPISODE_META
    meta = {}
    if meta_path.exists():
        meta = json.loads(binfmt.read_file(meta_path).decode("utf-8"))
    pos, quat, grip = _read_traj(path / TRAJ_NAME)
    files = _layer_files(path)
    wanted = sorted(files) if layers is None else list(layers)
    acts = {}
    for layer in wanted:
        if layer not in files:
            raise MissingFile(f"{episode_id or meta.get('episode_id')}: missing {acts_name(layer)}")
        acts[layer] = _read_single(files[layer])
    visual = _read_single(path / VISUAL_NAME) if (path / VISUAL_NAME).exists() else None
    return Rollout(
        episode_id=episode_id if episode_id is not None else meta["episode_id"],
        task_id=task_id if task_id is not None else meta["task_id"],
        success=success if success is not None else meta["success"],
        ee_pos=pos, ee_quat=quat, gripper=grip, activations=acts, visual=visual,
    )


def episode_dir_name(episode_id):
    return f"episodes/{episode_id}"


def write_suite(rset, root):
    """Write a manifest plus one directory per episode under ``root``."""
    root = Path(root)
    episodes = []
    for r in rset.rollouts:
        rel = episode_dir_name(r.episode_id)
        write_rollout(r, root / rel)
        episodes.append({"episode_id": r.episode_id, "task_id": r.task_id,
                         "success": r.success, "length_T": r.T, "data_path": rel})
    manifest = {"suite_id": rset.suite_id, "format_version": binfmt.FORMAT_VERSION,
                "tasks": list(rset.tasks), "episodes": episodes}
    binfmt.write_file(root / MANIFEST_NAME, json.dumps(manifest, indent=1).encode())
    return root / MANIFEST_NAME


def _validate_manifest(m, path):
    for key in ("suite_id", "tasks", "episodes"):
        if key not in m:
            raise ValidationError(f"{path}: manifest missing '{key}'")
    task_ids = {t["task_id"] for t in m["tasks"]}
    seen = set()
    for e in m["episodes"]:
        eid = e["episode_id"]
        if eid in seen:
            raise ValidationError(f"{path}: duplicate episode_id {eid}")
        seen.add(eid)
        if e["task_id"] not in task_ids:
            raise ValidationError(f"{eid}: task_id {e['task_id']} not declared in tasks")
        if int(e["length_T"]) < 2:
            raise ValidationError(f"{eid}: length_T must be >= 2")


def ingest(manifest_path, layers=None):
    """Load and validate every rollout listed in a manifest, in manifest order."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFile(f"manifest not found: {manifest_path}")
    try:
        m = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"{manifest_path}: invalid JSON: {e}") from e
    _validate_manifest(m, manifest_path)
    root = manifest_path.parent
    rollouts = []
    for e in m["episodes"]:
        eid = e["episode_id"]
        d = root / e["data_path"]
        if not (d / TRAJ_NAME).exists():
            raise MissingFile(f"{eid}: missing {d / TRAJ_NAME}")
        if layers is None and not _layer_files(d):
            raise MissingFile(f"{eid}: no activation files in {d}")
        r = read_rollout(d, episode_id=eid, task_id=e["task_id"],
                         success=bool(e["success"]), layers=layers)
        r.validate(declared_T=e["length_T"])
        rollouts.append(r)
    return RolloutSet(suite_id=m["suite_id"], tasks=list(m["tasks"]), rollouts=rollouts)
