import numpy as np
import pytest

from gpi.data import CausalDataset, make_folds
from gpi.errors import ConfigError, DegenerateTreatmentError, PartitionError
from gpi.nn import TrainConfig, spectral_normalize
from gpi.nuisance import (
    JointConfig,
    JointNuisanceModel,
    PropensityConfig,
    PropensityModel,
    SearchSpace,
    cross_fit,
    fit_joint,
    fit_propensity,
    tune_joint,
)

SMALL = JointConfig(learning_rate=3e-3, dropout_rate=0.0, head_width=8, deconfounder_widths=(16, 8), deconfounder_out_dim=4)
FAST = TrainConfig(batch_size=64, max_epochs=40, patience=5, seed=0)


def _toy(n=400, seed=0, levels=2):
    rng = np.random.default_rng(seed)
    reps = rng.normal(size=(n, 6))
    z = rng.normal(size=(n, 2))
    t = np.arange(n) % levels
    rng.shuffle(t)
    y = reps[:, 0] + t + 0.1 * rng.normal(size=n)
    return CausalDataset(y, t, z, np.arange(n) // 2, reps, levels)


def test_heads_only_see_their_level():
    model = JointNuisanceModel(6, 2, 2, SMALL, seed=1)
    ds = _toy(50)
    t = np.zeros(50, dtype=int)
    _, grads = model.loss_and_grad(ds.reps, ds.z, t, ds.y)
    n_dec = len(model.deconfounder.parameters())
    n_head = len(model.heads[0].parameters())
    head1 = grads[n_dec + n_head:]
    assert all(np.all(g == 0) for g in head1)
    assert any(np.any(g != 0) for g in grads[n_dec:n_dec + n_head])


def test_outcome_indicator_of_treatment():
    ds = _toy(600, seed=2)
    y = (ds.t == 1).astype(float)
    model, _ = fit_joint(ds.reps, ds.z, ds.t, y, 2, SMALL, FAST.replace(max_epochs=80))
    mu = model.predict(ds.reps, ds.z)
    assert np.mean(np.abs(mu[:, 0])) < 0.1
    assert np.mean(np.abs(mu[:, 1] - 1)) < 0.1


def test_constant_outcome_is_learned():
    ds = _toy(300, seed=3)
    y = np.full(ds.n, 2.5)
    model, _ = fit_joint(ds.reps, ds.z, ds.t, y, 2, SMALL, FAST.replace(max_epochs=300, patience=30))
    assert np.mean(np.abs(model.predict(ds.reps, ds.z) - 2.5)) < 0.1


def test_missing_level_in_training_slice():
    ds = _toy(100)
    with pytest.raises(PartitionError):
        fit_joint(ds.reps, ds.z, np.zeros(100, dtype=int), ds.y, 2, SMALL, FAST)


def test_single_class_propensity():
    ds = _toy(100)
    joint = JointNuisanceModel(6, 2, 2, SMALL)
    with pytest.raises(DegenerateTreatmentError):
        fit_propensity(ds.reps, ds.z, np.ones(100, dtype=int), joint, 2, FAST)


def test_propensity_without_signal_is_flat():
    ds = _toy(2000, seed=4)
    joint = JointNuisanceModel(6, 2, 2, SMALL)
    prop, _ = fit_propensity(ds.reps, ds.z, ds.t, joint, 2, FAST.replace(learning_rate=1e-3, patience=3), (16, 8))
    x = np.hstack([joint.features(ds.reps), ds.z])
    p = prop.predict_proba(x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert np.mean(np.abs(p[:, 1] - 0.5)) < 0.05


def test_layers_stay_spectrally_bounded_after_fit():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1000, 5))
    t = (x[:, 0] + rng.normal(size=1000) > 0).astype(int)
    ds = CausalDataset(np.zeros(1000), t, x[:, 1:3], np.arange(1000), x, 2)
    joint = JointNuisanceModel(5, 2, 2, SMALL)
    prop, _ = fit_propensity(ds.reps, ds.z, ds.t, joint, 2, FAST.replace(learning_rate=1e-2), (16, 8))
    for w in prop.net.weights:
        assert np.linalg.norm(w, 2) <= 1 + 1e-3


def test_lipschitz_gain_bounds_logits():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3000, 3))
    t = (3 * x[:, 0] + rng.normal(size=3000) > 0).astype(int)
    cfg = TrainConfig(batch_size=64, max_epochs=30, patience=30, learning_rate=1e-2, seed=0)
    spreads = []
    for gain in (0.25, 4.0):
        m = PropensityModel(3, 2, (16, 8), seed=0, lipschitz=gain)
        from gpi.nn import train_early_stopping

        train_early_stopping(m, (x[:2400], t[:2400]), (x[2400:], t[2400:]), cfg)
        lg = m.logits(x)
        spreads.append(np.max(np.abs(lg[:, 1] - lg[:, 0])))
    # two 1-Lipschitz logits differ by at most 2 * gain * |x - x'| in standardised units
    assert spreads[0] < spreads[1]
    with pytest.raises(ConfigError):
        PropensityModel(3, 2, lipschitz=0.0)


def test_single_trial_search_matches_fixed_config():
    ds = _toy(300, seed=7)
    space = SearchSpace(lr_range=(1e-3, 1e-3), dropout_range=(0.0, 0.0), head_widths=(8,),
                        deconfounder_widths=((16, 8),), trials=1, deconfounder_out_dim=4)
    cfg = JointConfig(1e-3, 0.0, 8, (16, 8), 4)
    a, tr_a = tune_joint(ds.reps, ds.z, ds.t, ds.y, 2, space, FAST, seed=3)
    b, tr_b = tune_joint(ds.reps, ds.z, ds.t, ds.y, 2, cfg, FAST, seed=3)
    np.testing.assert_array_equal(a.predict(ds.reps, ds.z), b.predict(ds.reps, ds.z))
    assert len(tr_a) == 1 and tr_a[0].val_loss == tr_b[0].val_loss


def test_cross_fit_honesty_and_determinism():
    ds = _toy(400, seed=8)
    folds = make_folds(ds, 2, 0)
    pc = PropensityConfig(learning_rate=1e-3, widths=(8, 4))
    a = cross_fit(ds, folds, SMALL, 0, FAST, pc)
    b = cross_fit(ds, folds, SMALL, 0, FAST, pc)
    np.testing.assert_array_equal(a.mu_hat, b.mu_hat)
    np.testing.assert_array_equal(a.pi_hat, b.pi_hat)
    np.testing.assert_allclose(a.pi_hat.sum(axis=1), 1.0)
    for k in range(2):
        held = set(ds.cluster[folds.held_out(k)])
        for part in (0, 1):
            assert held.isdisjoint(ds.cluster[folds.inner_rows(k, part)])
    # perturbing an outcome in fold 0 leaves fold-0 predictions unchanged
    row = int(folds.held_out(0)[0])
    y = ds.y.copy()
    y[row] += 100.0
    moved = CausalDataset(y, ds.t, ds.z, ds.cluster, ds.reps, 2)
    c = cross_fit(moved, folds, SMALL, 0, FAST, pc)
    out0 = folds.held_out(0)
    np.testing.assert_array_equal(c.mu_hat[out0], a.mu_hat[out0])


def test_threads_do_not_change_results():
    ds = _toy(300, seed=9)
    folds = make_folds(ds, 2, 1)
    pc = PropensityConfig(learning_rate=1e-3, widths=(8, 4))
    a = cross_fit(ds, folds, SMALL, 0, FAST, pc, threads=1)
    b = cross_fit(ds, folds, SMALL, 0, FAST, pc, threads=2)
    np.testing.assert_array_equal(a.mu_hat, b.mu_hat)
    np.testing.assert_array_equal(a.pi_hat, b.pi_hat)


def test_multilevel_cross_fit_shapes():
    ds = _toy(600, seed=10, levels=3)
    est = cross_fit(ds, make_folds(ds, 2, 0), SMALL, 0, FAST, PropensityConfig(1e-3, (8, 4)))
    assert est.mu_hat.shape == (600, 3) and est.n_levels == 3
    assert est.f_hat.shape == (600, 4)
