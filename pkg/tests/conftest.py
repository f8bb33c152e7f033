import numpy as np
import pytest

from eventsae.experiments.pipeline import SYNTH_SAE
from eventsae.rollout_store import Rollout, RolloutSet
from eventsae.sae import SaeTrainConfig, diagnostics_on, train_sae
from eventsae.synthworld import WorldConfig, gen_world, generate_suite


def make_rollout(eid="ep0", task="t0", T=10, d=4, layers=(0,), seed=0, quat=True, visual=False,
                 tokens=None):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((T, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    shape = (T, d) if tokens is None else (T, tokens, d)
    return Rollout(
        episode_id=eid, task_id=task, success=bool(seed % 2),
        ee_pos=rng.standard_normal((T, 3)), gripper=rng.uniform(0, 1, T),
        activations={L: rng.standard_normal(shape) for L in layers},
        ee_quat=q if quat else None,
        visual=rng.standard_normal((T, 6)) if visual else None)


def make_set(n=2, T=10, d=4, tasks=("t0",), visual=False):
    rs = [make_rollout(f"ep{i}", tasks[i % len(tasks)], T, d, seed=i, visual=visual)
          for i in range(n)]
    return RolloutSet("suite", [{"task_id": t, "description": f"do {t}"} for t in tasks], rs)


@pytest.fixture(scope="session")
def synth():
    """Default synthetic world, its 60-episode suite and a trained SAE (layer 1)."""
    world, truth = gen_world(WorldConfig())
    rset, logs = generate_suite(world, seed=0)
    H, _ = rset.stacked(1)
    params, history = train_sae(SaeTrainConfig(**SYNTH_SAE), H)
    return {"world": world, "truth": truth, "rset": rset, "logs": logs, "params": params,
            "history": history, "diag": diagnostics_on(params, H), "H": H}
