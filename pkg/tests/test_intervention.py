import numpy as np
import pytest

from eventsae.errors import IndexOutOfRange, InvalidConfig, ZeroState
from eventsae.intervention import (DoseResponseCurve, InterventionSpec, alpha_sweep,
                                   decoder_add, format_mean_std, format_sr_delta, joint_dropout,
                                   latent_edit, make_hook, outcome_rows, recon_hook,
                                   run_intervention, write_outcomes_csv)
from eventsae.sae import SaeParams, init_params
from eventsae.synthworld import baseline_sr

from test_sae import identity_sae, random_sae


def test_identity_sae_examples():
    p = identity_sae()
    assert latent_edit(p, np.array([2.0]), [0], 0.0).tolist() == [0.0]
    assert recon_hook(p, np.array([2.0])).tolist() == [2.0]
    assert recon_hook(p, np.zeros(1)).tolist() == [0.0]


def test_alpha_one_is_bitwise_identity():
    p = random_sae(6, 12, 3, 0)
    x = np.random.default_rng(0).standard_normal((50, 6))
    assert latent_edit(p, x, range(12), 1.0).tobytes() == x.tobytes()


def test_inactive_features_leave_state_unchanged():
    p = random_sae(6, 12, 3, 1)
    x = np.random.default_rng(1).standard_normal(6)
    z = p.encode(x)[0]
    off = np.flatnonzero(z == 0)
    assert np.array_equal(latent_edit(p, x, off, 0.3), x)


def test_residual_preserved_and_update_in_decoder_span():
    rng = np.random.default_rng(2)
    p = random_sae(8, 16, 4, 2)
    p.input_scale = 1.7
    X = rng.standard_normal((1000, 8))
    for alpha in (0.0, 0.5, 2.0):
        S = sorted(rng.choice(16, 5, replace=False))
        Xp = latent_edit(p, X, S, alpha)
        Z = p.encode(X)
        Zp = Z.copy()
        Zp[:, S] *= alpha
        assert np.max(np.abs((Xp - p.decode(Zp)) - (X - p.decode(Z)))) < 1e-12
        W = p.W_dec.astype(np.float64)[:, S]
        coef, *_ = np.linalg.lstsq(W, (Xp - X).T, rcond=None)
        assert np.max(np.abs(W @ coef - (Xp - X).T)) < 1e-9


def test_edit_bad_index():
    with pytest.raises(IndexOutOfRange):
        latent_edit(identity_sae(), np.ones(1), [3], 0.0)


def test_decoder_add_diagnostics():
    p = init_params(4, 4, 1, 0)
    p.W_dec = np.eye(4)
    x = np.array([4.0, 0, 0, 0])
    xp, diag = decoder_add(p, x, 1, 2.0)
    assert diag["rho"] == 0.5 and xp.tolist() == [4, 2, 0, 0]
    assert diag["c_before"] == 0.0 and diag["c_after"] == pytest.approx(2 / np.sqrt(20))
    xp, diag = decoder_add(p, x, 1, 0.0)
    assert np.array_equal(xp, x) and diag["c_after"] == diag["c_before"]
    xp, diag, xc = decoder_add(p, x, 1, 2.0, control_rng=np.random.default_rng(0))
    assert np.linalg.norm(xc - x) == pytest.approx(2.0)
    with pytest.raises(ZeroState):
        decoder_add(p, np.zeros(4), 0, 1.0)


def test_spec_validation():
    with pytest.raises(InvalidConfig):
        InterventionSpec("latent_scale").validate()
    with pytest.raises(InvalidConfig):
        InterventionSpec("teleport", features=(1,)).validate()
    with pytest.raises(InvalidConfig):
        InterventionSpec("latent_scale", features=(1,), alpha=-1).validate()
    with pytest.raises(InvalidConfig):
        InterventionSpec("decoder_add", features=(1, 2)).validate()
    with pytest.raises(IndexOutOfRange):
        InterventionSpec("latent_scale", features=(9,)).validate(m=4)


def test_formatting():
    assert format_sr_delta(0.488, -21.2) == "48.8% (-21.2)"
    assert format_sr_delta(0.7, 0.0) == "70.0% (+0.0)"
    assert format_mean_std([0.9, 0.86, 0.84]) == "86.7 ± 3.1"
    assert format_mean_std([0.5]) == "50.0 ± 0.0"


def test_curve_statistics():
    c = DoseResponseCurve([0, 0.5, 1], [0.2, 0.6, 0.9], 1, "event_aligned", (3,), 0.9)
    assert c.spearman() == pytest.approx(1.0) and c.monotone()
    c = DoseResponseCurve([0, 0.5, 1], [0.2, 0.19, 0.9], 1, "", (3,), 0.9)
    assert not c.monotone() and c.monotone(tolerance=0.01)


def test_joint_dropout_all_alive_matches_full_latent_edit(synth):
    p = synth["params"]
    alive = np.flatnonzero(synth["diag"].alive)
    spec = InterventionSpec("joint_dropout", features=tuple(alive))
    hook, _ = make_hook(p, spec)
    x = synth["H"][17]
    assert np.array_equal(hook(x), latent_edit(p, x, alive, 0.0))


def test_closed_loop_cells(synth, tmp_path):
    world, p = synth["world"], synth["params"]
    base = baseline_sr(world, 12, 5)
    f = int(synth["diag"].alive.argmax())
    out = run_intervention(world, p, InterventionSpec("latent_scale", features=(f,), alpha=1.0,
                                                      episodes_per_condition=12, seed=5), base)
    assert out.delta_sr == 0.0 and out.sr == base
    outs = joint_dropout(world, p, 1, 0, [0, 1], synth["diag"].alive, base, 12)
    assert all(o.sr == base for o in outs)
    step = run_intervention(world, p, InterventionSpec("decoder_add", features=(f,), alpha=0.5,
                                                       episodes_per_condition=3, seed=5), base)
    assert set(step.diagnostics) == {"rho", "c_before", "c_after", "norm_x", "norm_x_prime"}
    write_outcomes_csv([out, step], tmp_path / "o.csv")
    assert len((tmp_path / "o.csv").read_text().splitlines()) == 3


def test_sweep_grid_validation(synth):
    spec = InterventionSpec("latent_scale", features=(0,), episodes_per_condition=2)
    with pytest.raises(InvalidConfig):
        alpha_sweep(synth["world"], synth["params"], spec, (0.0, 0.5), 1.0)
    with pytest.raises(InvalidConfig):
        alpha_sweep(synth["world"], synth["params"], spec, (0.0, 1.0, 0.5), 1.0)
