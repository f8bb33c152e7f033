import itertools

import numpy as np
import pytest

from eventsae.errors import DegenerateVariance, InvalidBudget, ValidationError
from eventsae.sae import (SaeParams, SaeTrainConfig, batch_topk, batch_topk_mask,
                          diagnostics_on, fve, init_params, load_params, lr_at, row_topk,
                          sae_forward, sae_loss, sae_loss_and_grads, save_params, train_sae)


def identity_sae():
    one = np.ones((1, 1))
    return SaeParams(one.copy(), np.zeros(1), one.copy(), np.zeros(1), k=1)


def random_sae(d, m, k, seed):
    rng = np.random.default_rng(seed)
    p = init_params(d, m, k, seed)
    p.W_enc = rng.standard_normal((m, d))
    p.b_enc = 0.1 * rng.standard_normal(m)
    p.b_dec = 0.1 * rng.standard_normal(d)
    return p


# -- sparsity operator -----------------------------------------------------------

def test_batch_topk_worked_example():
    P = np.array([[1.0, 0.5, -2.0], [0.2, 3.0, 0.1]])
    assert batch_topk(P, 1).tolist() == [[1, 0, 0], [0, 3, 0]]


def test_all_negative_gives_zero_code():
    P = -np.abs(np.random.default_rng(0).standard_normal((1, 4))) - 0.1
    assert batch_topk_mask(P, 1).sum() == 1
    assert np.all(batch_topk(P, 1) == 0)


def test_brute_force_kept_set():
    rng = np.random.default_rng(1)
    for _ in range(20):
        P = rng.standard_normal((2, 3))
        k = int(rng.integers(1, 4))
        mask = batch_topk_mask(P, k)
        best = max(itertools.combinations(range(6), 2 * k), key=lambda c: P.ravel()[list(c)].sum())
        assert sorted(np.flatnonzero(mask.ravel())) == list(best)


def test_k_equals_m_is_identity_on_nonnegative():
    P = np.abs(np.random.default_rng(2).standard_normal((3, 4)))
    assert np.array_equal(batch_topk(P, 4), P)


def test_ties_prefer_lower_feature_then_row():
    P = np.ones((2, 3))
    assert batch_topk_mask(P, 1).tolist() == [[True, False, False], [True, False, False]]
    P = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    assert batch_topk_mask(P[:, ::-1], 1).sum() == 3


def test_budget_errors():
    with pytest.raises(InvalidBudget):
        batch_topk(np.ones((1, 2)), 0)
    with pytest.raises(InvalidBudget):
        batch_topk(np.ones((1, 2)), 3)
    with pytest.raises(InvalidBudget):
        row_topk(np.ones((1, 2)), -1)


def test_row_topk_keeps_k_per_row():
    P = np.random.default_rng(3).standard_normal((5, 6))
    assert ((row_topk(np.abs(P), 2) > 0).sum(axis=1) == 2).all()


# -- forward ------------------------------------------------------------------------

def test_identity_sae_forward():
    Z, Hh = sae_forward(identity_sae(), np.array([[2.0]]))
    assert Z.tolist() == [[2.0]] and Hh.tolist() == [[2.0]]


def test_zero_input_zero_output():
    p = init_params(3, 6, 2, 0)
    Z, Hh = sae_forward(p, np.zeros((4, 3)))
    assert not Z.any() and not Hh.any()


def test_forward_rejects_nonfinite():
    with pytest.raises(ValidationError):
        sae_forward(identity_sae(), np.array([[np.inf]]))


def test_inference_threshold_rule():
    p = identity_sae()
    p.theta = 1.5
    assert p.encode(np.array([[1.0], [2.0]])).ravel().tolist() == [0.0, 2.0]


def test_fve_matches_hand_rolled_ratio():
    rng = np.random.default_rng(4)
    p = random_sae(8, 16, 3, 4)
    H = rng.standard_normal((4, 8))
    _, Hh = sae_forward(p, H)
    num = sum((H[b, j] - Hh[b, j]) ** 2 for b in range(4) for j in range(8))
    mu = H.mean(axis=0)
    den = sum((H[b, j] - mu[j]) ** 2 for b in range(4) for j in range(8))
    assert abs(fve(H, Hh) - (1 - num / den)) < 1e-10


def test_fve_limits_and_degenerate():
    H = np.random.default_rng(5).standard_normal((10, 3))
    assert fve(H, H) == 1.0
    assert abs(fve(H, np.broadcast_to(H.mean(axis=0), H.shape))) < 1e-12
    with pytest.raises(DegenerateVariance):
        fve(np.ones((4, 2)), np.ones((4, 2)))


# -- loss and gradients ---------------------------------------------------------------

def test_loss_without_dead_features_is_mse():
    p = random_sae(4, 8, 2, 6)
    H = np.random.default_rng(6).standard_normal((5, 4))
    total, mse, aux = sae_loss(p, H, np.zeros(8, bool), 1 / 32, 4)
    assert aux == 0.0 and total == mse
    Z, Hh = sae_forward(p, H, train=True)
    assert abs(mse - np.sum((H - Hh) ** 2) / 5) < 1e-12


def test_perfect_reconstruction_total_is_aux_only():
    p = identity_sae()
    total, mse, aux = sae_loss(p, np.array([[1.0], [2.0]]), np.ones(1, bool), 0.5, 2)
    assert mse == 0.0 and total == 0.5 * aux


def test_aux_oracle():
    p = random_sae(3, 6, 1, 7)
    H = np.random.default_rng(7).standard_normal((4, 3))
    dead = np.array([0, 1, 0, 1, 1, 0], bool)
    total, mse, aux = sae_loss(p, H, dead, 0.25, 2)
    P = H @ p.W_enc.T + p.b_enc
    E = H - sae_forward(p, H, train=True)[1]
    ref = 0.0
    for b in range(4):
        idx = np.flatnonzero(dead)
        top = idx[np.argsort(-P[b, idx], kind="stable")[:2]]
        z = np.zeros(6)
        z[top] = np.maximum(P[b, top], 0)
        ref += np.sum((E[b] - p.W_dec @ z) ** 2)
    assert abs(aux - ref / 4) < 1e-12
    assert abs(total - (mse + 0.25 * aux)) < 1e-12


def _flat(p):
    return [p.W_enc, p.b_enc, p.W_dec, p.b_dec]


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_central_differences(seed):
    rng = np.random.default_rng(100 + seed)
    d, m, k, B = 3, 6, 2, 4
    p = random_sae(d, m, k, seed)
    H = rng.standard_normal((B, d))
    dead = rng.random(m) < 0.5
    r = sae_loss_and_grads(p, H, dead, 1 / 32, 2 * k)
    support, target = r["support"], r["E"]
    eps = 1e-6
    for a, g in zip(_flat(p), r["grads"]):
        num = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + eps
            up = sae_loss_and_grads(p, H, dead, 1 / 32, 2 * k, support, target)["total"]
            a[idx] = old - eps
            dn = sae_loss_and_grads(p, H, dead, 1 / 32, 2 * k, support, target)["total"]
            a[idx] = old
            num[idx] = (up - dn) / (2 * eps)
        rel = np.linalg.norm(num - g) / max(np.linalg.norm(num) + np.linalg.norm(g), 1e-12)
        assert rel < 1e-4


# -- training -------------------------------------------------------------------------

def sparse_data(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    D = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]).T
    Z = np.zeros((n, 4))
    Z[np.arange(n), rng.integers(0, 4, n)] = rng.uniform(0.5, 2.0, n)
    return Z @ D.T


def tiny_config(**kw):
    base = dict(m=4, k=1, learning_rate=1e-2, batch_size=256, steps=2000, warmup_steps=50, seed=1)
    return SaeTrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def tiny():
    H = sparse_data()
    params, hist = train_sae(tiny_config(), H)
    return H, params, hist


def test_training_recovers_sparse_data(tiny):
    H, params, hist = tiny
    d = diagnostics_on(params, H)
    assert d.fve >= 0.99
    assert params.W_dec.dtype == np.float32
    params.validate()
    assert len(hist) == 2000 and hist[-1]["mse"] < hist[0]["mse"]


def test_recon_within_tolerance_on_training_set(tiny):
    H, params, _ = tiny
    from eventsae.intervention import recon_hook
    assert np.max(np.abs(recon_hook(params, H, topk_inference=True) - H)) < 1e-6


def test_training_is_deterministic(tiny):
    H, params, hist = tiny
    p2, h2 = train_sae(tiny_config(), H)
    assert p2 == params and h2 == hist


def test_lr_schedule():
    c = SaeTrainConfig(learning_rate=1.0, steps=100, warmup_steps=10, decay_start_fraction=0.8)
    assert lr_at(c, 0) == pytest.approx(0.1)
    assert lr_at(c, 50) == 1.0
    assert lr_at(c, 90) == pytest.approx(0.5)


def test_config_validation():
    with pytest.raises(InvalidBudget):
        SaeTrainConfig(k=0).validate()
    with pytest.raises(ValidationError):
        SaeTrainConfig(steps=10, warmup_steps=10).validate()
    with pytest.raises(ValidationError):
        train_sae(tiny_config(m=1), sparse_data(50))
    assert SaeTrainConfig(k=8).resolved_k_aux() == 16


def test_checkpoint_round_trip(tmp_path, tiny):
    _, params, _ = tiny
    save_params(params, tmp_path / "sae.ckpt")
    back = load_params(tmp_path / "sae.ckpt")
    assert back == params


def test_diagnostics_row_format():
    from eventsae.sae import SaeDiagnostics
    assert SaeDiagnostics(0.911, 0.941, 63.6).row() == "0.911  94.1%  63.6"
