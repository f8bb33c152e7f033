"""Deterministic closed-loop pick-and-place world with planted sparse features.

A scripted kinematic point gripper drives a set of planted latents: motor
features (half-axis velocity commands), a hold feature (gripper closed while
carrying), pulses around grasp and release, tonic task-context features and
sparse noise features. Hidden states are ``x = D_true z* + eps`` at an early
layer and a rotated copy at a late layer; the action is a fixed linear readout
of the (possibly hooked) late state, so editing the hidden state changes
behaviour.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import HookShapeMismatch, InvalidConfig
from .rollout_store import Rollout, RolloutSet

EVENT_TYPES = ("approach_start", "grasp_close", "transport_start", "release_open", "withdraw")
LAYERS = (0, 1)
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])

_PHASE_APPROACH, _PHASE_GRASP, _PHASE_TRANSPORT, _PHASE_RELEASE, _PHASE_WITHDRAW = range(5)


@dataclass
class WorldConfig:
    seed: int = 0
    n_tasks: int = 3
    episodes_per_task: int = 20
    T_max: int = 100
    d: int = 32
    n_event_features: int = 9
    n_tonic_features: int = 6
    n_noise_features: int = 6
    noise_sigma: float = 0.02
    causal_gain: float = 1.0
    success_radius: float = 0.05
    m_true: int | None = None
    # kinematics
    speed: float = 0.03
    dwell: int = 4
    layout_radius: float = 0.18
    jitter: float = 0.03
    withdraw_height: float = 0.25
    # latent shapes
    motor_amp: float = 1.0
    hold_amp: float = 2.0
    pulse_amp: float = 2.0
    pulse_halfwidth: int = 3
    tonic_amp: float = 1.5
    tonic_on_prob: float = 0.6    # per-episode chance each of a task's tonic features is on
    noise_amp: float = 0.3
    noise_rate: float = 0.1
    visual_dim: int = 16
    # variants
    failure_rate: float = 0.0      # fraction of episodes with a misperceived target
    failure_offset: float = 0.15
    private_events: bool = False   # per-task hold and grasp features instead of shared ones

    def __post_init__(self):
        total = self.n_event_features + self.n_tonic_features + self.n_noise_features
        if self.m_true is None:
            self.m_true = total

    def validate(self):
        total = self.n_event_features + self.n_tonic_features + self.n_noise_features
        if self.m_true != total:
            raise InvalidConfig(f"m_true={self.m_true} != event+tonic+noise={total}")
        if min(self.n_event_features, self.n_tonic_features, self.n_noise_features) < 0:
            raise InvalidConfig("feature counts must be >= 0")
        if self.n_tasks < 1 or self.episodes_per_task < 1 or self.T_max < 2 or self.d < 1:
            raise InvalidConfig("n_tasks, episodes_per_task, d must be >= 1 and T_max >= 2")
        if not self.causal_gain > 0:
            raise InvalidConfig("causal_gain must be > 0")
        if self.noise_sigma < 0 or not 0 <= self.failure_rate <= 1:
            raise InvalidConfig("noise_sigma must be >= 0 and failure_rate in [0, 1]")
        if self.failure_rate > 0 and self.n_tonic_features < 1:
            raise InvalidConfig("failure_rate > 0 needs a tonic feature for the distractor")
        if len(event_roles(self)) < self.n_event_features:
            raise InvalidConfig(
                f"at most {len(event_roles(self))} event features are defined for this layout")
        return self

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


def event_roles(config):
    """Ordered ``(kind, arg, task)`` roles for planted event features; ``task``
    is None for features shared by every task."""
    roles = [("motor", (a, s), None) for a in range(3) for s in (+1, -1)]
    tasks = range(config.n_tasks) if config.private_events else [None]
    roles += [("hold", None, t) for t in tasks]
    roles += [("pulse", "grasp_close", t) for t in tasks]
    roles += [("pulse", "release_open", None), ("pulse", "transport_start", None),
              ("pulse", "withdraw", None)]
    return roles


@dataclass
class GroundTruth:
    D_true: np.ndarray                 # (d, m_true), unit columns, early layer
    rotation: np.ndarray               # (d, d) orthogonal map early -> late
    readout: np.ndarray                # (5, d) late state -> (dx, dy, dz, grip, latch)
    event_idx: list
    tonic_idx: list
    noise_idx: list
    roles: list                        # role per event feature
    event_feature_map: dict            # event type -> planted indices
    causal_idx: list                   # hold features, then the grasp-latch pulse
    distractor_idx: int | None = None
    latch_required: bool = False       # attaching needs the grasp pulse read out as a latch

    @property
    def hold_idx(self):
        """Planted features with a graded effect on the gripper."""
        return [i for i, (kind, _, _) in zip(self.event_idx, self.roles) if kind == "hold"]

    def directions(self, layer):
        return self.D_true if layer == 0 else self.rotation @ self.D_true

    def kinds(self):
        out = {}
        for i in self.event_idx:
            out[i] = "event"
        for i in self.tonic_idx:
            out[i] = "tonic"
        for i in self.noise_idx:
            out[i] = "noise"
        return out


@dataclass
class EpisodeResult:
    rollout: Rollout
    success: bool
    events: list                       # [(event_type, t)], strictly increasing t
    latents: np.ndarray = field(repr=False, default=None)
    distracted: bool = False


@dataclass
class Task:
    task_id: str
    description: str
    source: np.ndarray
    target: np.ndarray


class World:
    def __init__(self, config, truth, tasks, home, visual_proj, sigma):
        self.config = config
        self.truth = truth
        self.tasks = tasks
        self.home = home
        self.visual_proj = visual_proj
        self.sigma = sigma

    # -- latents ---------------------------------------------------------------

    def _latents(self, st, rng_noise):
        c, tr = self.config, self.truth
        z = np.zeros(c.m_true)
        moving = st["phase"] in (_PHASE_APPROACH, _PHASE_TRANSPORT, _PHASE_WITHDRAW)
        vec = st["goal"] - st["ee"]
        dist = float(np.linalg.norm(vec))
        for i, (kind, arg, task) in zip(tr.event_idx, tr.roles):
            if task is not None and task != st["task"]:
                continue
            if kind == "motor" and moving and dist > 0:
                axis, sign = arg
                mag = np.clip(dist / c.speed, 0.5, 1.0)
                z[i] = c.motor_amp * mag * max(sign * vec[axis] / dist, 0.0)
            elif kind == "hold":
                if st["phase"] in (_PHASE_GRASP, _PHASE_TRANSPORT):
                    z[i] = c.hold_amp
            elif kind == "pulse":
                delta = self._pulse_offset(st, arg, dist)
                if delta is not None:
                    z[i] = c.pulse_amp * max(0.0, 1.0 - abs(delta) / (c.pulse_halfwidth + 1))
        for i in st["tonic_on"]:
            z[i] = st["tonic_level"][i]
        if tr.noise_idx:
            on = rng_noise.random(len(tr.noise_idx)) < c.noise_rate
            amp = rng_noise.uniform(1 / 3, 1.0, len(tr.noise_idx)) * c.noise_amp
            z[tr.noise_idx] = np.where(on, amp, 0.0)
        return z

    def _pulse_offset(self, st, event, dist):
        """Signed steps from the given event: negative while anticipating
        arrival, positive after the event fired, None when out of range."""
        c = self.config
        t = st["t"]
        if event in st["event_t"]:
            return t - st["event_t"][event]
        arrive = {"grasp_close": _PHASE_APPROACH, "release_open": _PHASE_TRANSPORT}
        dwell_end = {"transport_start": ("grasp_close", _PHASE_GRASP),
                     "withdraw": ("release_open", _PHASE_RELEASE)}
        if event in arrive and st["phase"] == arrive[event]:
            remaining = int(np.ceil(max(dist - self.arrive_tol, 0.0) / c.speed))
            return -remaining
        if event in dwell_end:
            src, phase = dwell_end[event]
            if st["phase"] == phase:
                return (t - st["event_t"][src]) - c.dwell
        return None

    @property
    def arrive_tol(self):
        return self.config.speed

    # -- scene featurizer ---------------------------------------------------------

    def scene_features(self, ee, obj, target, gripper, attached):
        g = np.concatenate([(ee - obj) / 0.2, (ee - target) / 0.2, (obj - target) / 0.2,
                            [gripper, float(attached), ee[2] / 0.2, 1.0]])
        return np.tanh(self.visual_proj @ g)

    # -- closed loop ----------------------------------------------------------------

    def episode_rng(self, seed, salt=7919):
        return np.random.default_rng([self.config.seed, salt, int(seed)])

    def run_episode(self, task_index, seed, hook=None, layer=1, record_latents=False, salt=7919):
        """Run one closed-loop episode; ``hook`` edits the hidden state at ``layer``."""
        c, tr = self.config, self.truth
        task = self.tasks[task_index]
        rng = self.episode_rng(seed, salt)
        src = task.source + np.r_[rng.normal(0, c.jitter, 2), 0.0]
        tgt = task.target + np.r_[rng.normal(0, c.jitter, 2), 0.0]
        home = self.home + np.r_[rng.normal(0, c.jitter, 2), 0.0]
        required_grip = rng.uniform(0.1, 0.8)
        distracted = bool(rng.random() < c.failure_rate)
        offset_angle = rng.uniform(0, 2 * np.pi)
        own = self._task_tonic(task_index)
        draws = rng.random(len(own))
        tonic_on = [i for i, u in zip(own, draws) if u < c.tonic_on_prob]
        level = {i: c.tonic_amp * rng.uniform(0.6, 1.4) for i in tr.tonic_idx}
        if distracted and tr.distractor_idx is not None:
            tonic_on = tonic_on + [tr.distractor_idx]
        perceived = tgt.copy()
        if distracted:
            perceived[:2] += c.failure_offset * np.array([np.cos(offset_angle), np.sin(offset_angle)])
        rng_noise = self.episode_rng(seed, salt + 1)

        st = {"t": 0, "phase": _PHASE_APPROACH, "task": task_index, "ee": home.copy(),
              "goal": src.copy(), "event_t": {"approach_start": 0}, "tonic_on": tonic_on,
              "tonic_level": level}
        obj = src.copy()
        gripper = 1.0
        attached = False
        events = [("approach_start", 0)]
        log_pos, log_grip, log_vis, log_z = [], [], [], []
        log_act = {L: [] for L in LAYERS}
        Rl = tr.readout

        for t in range(c.T_max):
            st["t"] = t
            ee = st["ee"]
            # phase transitions take effect at this timestep
            ph = st["phase"]
            fired = None
            if ph == _PHASE_APPROACH and np.linalg.norm(ee - obj) <= self.arrive_tol:
                st["phase"], fired = _PHASE_GRASP, "grasp_close"
            elif ph == _PHASE_GRASP and t - st["event_t"]["grasp_close"] >= c.dwell:
                st["phase"], fired = _PHASE_TRANSPORT, "transport_start"
                st["goal"] = perceived.copy()
            elif ph == _PHASE_TRANSPORT and np.linalg.norm(ee - perceived) <= self.arrive_tol:
                st["phase"], fired = _PHASE_RELEASE, "release_open"
            elif ph == _PHASE_RELEASE and t - st["event_t"]["release_open"] >= c.dwell:
                st["phase"], fired = _PHASE_WITHDRAW, "withdraw"
                st["goal"] = np.array([ee[0], ee[1], c.withdraw_height])
            elif ph == _PHASE_WITHDRAW and ee[2] >= c.withdraw_height - self.arrive_tol:
                break
            if fired:
                st["event_t"][fired] = t
                events.append((fired, t))
            if st["phase"] == _PHASE_APPROACH:
                st["goal"] = obj.copy()

            z = self._latents(st, rng_noise)
            eps = rng.normal(0.0, 1.0, c.d) * self.sigma
            x0 = tr.D_true @ z + eps
            log_act[0].append(x0)
            if hook is not None and layer == 0:
                x0 = _apply(hook, x0, c.d)
            x1 = tr.rotation @ x0
            log_act[1].append(x1)
            if hook is not None and layer == 1:
                x1 = _apply(hook, x1, c.d)
            action = Rl @ x1

            log_pos.append(ee.copy())
            log_grip.append(gripper)
            log_vis.append(self.scene_features(ee, obj, tgt, gripper, attached))
            if record_latents:
                log_z.append(z)

            step = action[:3]
            n = np.linalg.norm(step)
            if n > 2 * c.speed:
                step = step * (2 * c.speed / n)
            st["ee"] = ee + step
            gripper = float(np.clip(1.0 - action[3], 0.0, 1.0))
            grip = 1.0 - gripper
            latched = action[4] >= 0.5 or not tr.latch_required
            near = np.linalg.norm(st["ee"] - obj) <= 1.5 * c.speed
            if not attached and latched and near and grip >= required_grip:
                attached = True
            elif attached and grip < required_grip:
                attached = False
                obj = np.array([obj[0], obj[1], 0.0])
            if attached:
                obj = st["ee"].copy()
                obj[2] = 0.0
        success = bool(np.linalg.norm(obj - tgt) <= c.success_radius and not attached)
        T = len(log_pos)
        eid = f"{task.task_id}_ep{int(seed):05d}"
        rollout = Rollout(
            episode_id=eid, task_id=task.task_id, success=success,
            ee_pos=np.array(log_pos), ee_quat=np.tile(IDENTITY_QUAT, (T, 1)),
            gripper=np.array(log_grip),
            activations={L: np.array(v) for L, v in log_act.items()},
            visual=np.array(log_vis))
        return EpisodeResult(rollout, success, events,
                             np.array(log_z) if record_latents else None, distracted)

    def _task_tonic(self, task_index):
        tr = self.truth
        pool = [i for i in tr.tonic_idx if i != tr.distractor_idx]
        return [i for j, i in enumerate(pool) if j % self.config.n_tasks == task_index]

    def episode_plan(self, n_episodes, seed):
        """(task_index, episode_seed) for paired campaigns; tasks round-robin."""
        return [(i % self.config.n_tasks, int(seed) * 1_000_003 + i) for i in range(n_episodes)]


def _apply(hook, x, d):
    out = np.asarray(hook(x), dtype=np.float64)
    if out.shape != (d,):
        raise HookShapeMismatch(f"hook returned shape {out.shape}, expected ({d},)")
    return out


def gen_world(config):
    """Build the world and its ground truth deterministically from ``config``."""
    config.validate()
    c = config
    rng = np.random.default_rng([c.seed, 31337])
    D = rng.standard_normal((c.d, c.m_true))
    D /= np.linalg.norm(D, axis=0, keepdims=True)
    Q, Rq = np.linalg.qr(rng.standard_normal((c.d, c.d)))
    Q = Q * np.sign(np.diag(Rq))
    ev = list(range(c.n_event_features))
    ton = list(range(c.n_event_features, c.n_event_features + c.n_tonic_features))
    noi = list(range(c.n_event_features + c.n_tonic_features, c.m_true))
    roles = event_roles(c)[:c.n_event_features]
    emap = {}
    causal = []
    for i, (kind, arg, _) in zip(ev, roles):
        if kind == "motor":
            types = ("approach_start", "transport_start", "withdraw")
        elif kind == "hold":
            types = ("grasp_close", "release_open")
            causal.append(i)
        else:
            types = (arg,)
        for tname in types:
            emap.setdefault(tname, []).append(i)
    C = np.zeros((5, c.m_true))
    for i, (kind, arg, _) in zip(ev, roles):
        if kind == "motor":
            axis, sign = arg
            C[axis, i] = sign * c.speed * c.causal_gain / c.motor_amp
        elif kind == "hold":
            C[3, i] = c.causal_gain / c.hold_amp
        elif arg == "grasp_close":
            C[4, i] = c.causal_gain / c.pulse_amp
            causal.append(i)
    readout = C @ np.linalg.pinv(D) @ Q.T
    distractor = ton[-1] if (c.failure_rate > 0 and ton) else None
    truth = GroundTruth(D, Q, readout, ev, ton, noi, roles, emap, causal, distractor,
                        latch_required=bool(C[4].any()))

    center = np.array([0.0, 0.45, 0.0])
    phase0 = rng.uniform(0, 2 * np.pi)
    tasks = []
    for t in range(c.n_tasks):
        a = phase0 + 2 * np.pi * t / c.n_tasks
        u = np.array([np.cos(a), np.sin(a), 0.0])
        tasks.append(Task(f"task{t}", f"pick up object {t} and place it on pad {t}",
                          center + c.layout_radius * u, center - c.layout_radius * u))
    home = np.array([0.0, 0.15, c.withdraw_height])
    visual_proj = rng.standard_normal((c.visual_dim, 13)) / np.sqrt(13)
    world = World(c, truth, tasks, home, visual_proj, sigma=0.0)
    # noise level relative to the noiseless signal RMS
    acts = [world.run_episode(t, t, salt=1).rollout.activations[0] for t in range(c.n_tasks)]
    rms = float(np.sqrt(np.mean(np.concatenate(acts) ** 2)))
    world.sigma = c.noise_sigma * rms
    return world, truth


def baseline_sr(world, n_episodes, seed, hook=None, layer=1):
    """Success fraction over the seeded episode plan (shared with campaigns)."""
    if n_episodes < 1:
        raise InvalidConfig("n_episodes must be >= 1")
    plan = world.episode_plan(n_episodes, seed)
    wins = [world.run_episode(t, s, hook=hook, layer=layer).success for t, s in plan]
    return float(np.mean(wins))


def generate_suite(world, episodes_per_task=None, seed=0, suite_id=None, n_episodes=None):
    """Roll out the unhooked policy; returns ``(RolloutSet, {episode_id: events})``."""
    c = world.config
    n = n_episodes or (episodes_per_task or c.episodes_per_task) * c.n_tasks
    rollouts, logs = [], {}
    for t, s in world.episode_plan(n, seed):
        res = world.run_episode(t, s)
        rollouts.append(res.rollout)
        logs[res.rollout.episode_id] = res.events
    order = sorted(range(len(rollouts)), key=lambda i: (rollouts[i].task_id, i))
    rollouts = [rollouts[i] for i in order]
    tasks = [{"task_id": tk.task_id, "description": tk.description} for tk in world.tasks]
    return RolloutSet(suite_id or f"synth-{c.seed}", tasks, rollouts), logs


def oracle_precision(ranking, truth, sae, K, layer=1):
    """Fraction of the top-K SAE features whose best-matching planted direction
    is an event feature with |cos| >= 0.5."""
    top = list(getattr(ranking, "top_k", ranking))[:K]
    if not top:
        return 0.0
    dirs = truth.directions(layer)
    W = sae.W_dec.astype(np.float64)
    W = W / np.linalg.norm(W, axis=0, keepdims=True)
    C = np.abs(W[:, top].T @ dirs)
    best = C.argmax(axis=1)
    ev = set(truth.event_idx)
    hits = [(j in ev) and C[r, j] >= 0.5 for r, j in enumerate(best)]
    return float(np.mean(hits))


def best_match(sae, truth, layer=1):
    """For every SAE feature, (best planted index, |cos|)."""
    W = sae.W_dec.astype(np.float64)
    W = W / np.linalg.norm(W, axis=0, keepdims=True)
    C = np.abs(W.T @ truth.directions(layer))
    j = C.argmax(axis=1)
    return j, C[np.arange(len(j)), j]


# -- files -----------------------------------------------------------------------

def write_event_log(logs, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("episode_id", "event_type", "t"))
        for eid, evs in logs.items():
            for etype, t in evs:
                w.writerow((eid, etype, t))


def read_event_log(path):
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["episode_id"], []).append((row["event_type"], int(row["t"])))
    return out


def write_truth(world, path):
    tr = world.truth
    obj = {"config": world.config.to_json(), "event_idx": tr.event_idx,
           "tonic_idx": tr.tonic_idx, "noise_idx": tr.noise_idx,
           "roles": [list(r) for r in tr.roles], "event_feature_map": tr.event_feature_map,
           "causal_idx": tr.causal_idx, "distractor_idx": tr.distractor_idx,
           "D_true": tr.D_true.tolist(), "rotation": tr.rotation.tolist()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)


def load_world(path):
    """Regenerate the world from a ground-truth file's config."""
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return gen_world(WorldConfig.from_json(obj["config"]))
