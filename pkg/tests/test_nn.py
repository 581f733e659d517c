import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpi.errors import ConfigError, DimensionError, TrainingDivergedError, ValidationError
from gpi.nn import (
    Adam,
    MlpSpec,
    Network,
    SupervisedNet,
    TrainConfig,
    adam_step,
    clip_gradients,
    global_norm,
    loss_and_grad,
    ordinal_nll,
    spectral_normalize,
    split_train_val,
    train_early_stopping,
)


def _power_sigma(w, iters=200, seed=0):
    # independent oracle: plain power iteration on W^T W from a fresh start
    v = np.random.default_rng(seed).standard_normal(w.shape[1])
    for _ in range(iters):
        v = w.T @ (w @ v)
        v /= np.linalg.norm(v)
    return float(np.linalg.norm(w @ v))


def _numeric_grads(f, params, h=1e-5):
    out = []
    for p in params:
        g = np.zeros_like(p)
        for i in range(p.size):
            old = p.flat[i]
            p.flat[i] = old + h
            up = f()
            p.flat[i] = old - h
            down = f()
            p.flat[i] = old
            g.flat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


# ---------------------------------------------------------------- forward


def test_zero_network_outputs_zero():
    net = Network(MlpSpec((3, 4, 2)), seed=1)
    for p in net.parameters():
        p[...] = 0.0
    assert np.all(net.forward(np.ones((5, 3))) == 0.0)


def test_hand_evaluated_two_layer_net():
    net = Network(MlpSpec((1, 1, 1)), seed=0)
    net.weights[0][...] = [[2.0]]
    net.biases[0][...] = [-1.0]
    net.weights[1][...] = [[3.0]]
    net.biases[1][...] = [0.0]
    assert net.forward(np.array([[1.0]]))[0, 0] == 3.0
    assert net.forward(np.array([[0.0]]))[0, 0] == 0.0


def test_no_dropout_train_equals_eval(rng):
    net = Network(MlpSpec((4, 8, 8, 2)), seed=3)
    x = rng.standard_normal((6, 4))
    np.testing.assert_array_equal(net.forward(x, "train"), net.forward(x, "eval"))


def test_inverted_dropout_matches_eval_in_expectation(rng):
    net = Network(MlpSpec((3, 6, 1), dropout_rate=0.4), seed=2)
    x = rng.standard_normal((1, 3))
    draws = net.forward(np.repeat(x, 10_000, axis=0), "train")[:, 0]
    se = draws.std() / np.sqrt(draws.size)
    assert abs(draws.mean() - net.forward(x, "eval")[0, 0]) < 3 * se + 1e-12


def test_forward_rejects_bad_input():
    net = Network(MlpSpec((3, 2, 1)))
    with pytest.raises(DimensionError):
        net.forward(np.zeros((2, 4)))
    with pytest.raises(ValidationError):
        net.forward(np.array([[0.0, np.nan, 1.0]]))
    with pytest.raises(ConfigError):
        net.forward(np.zeros((1, 3)), mode="sample")


def test_spec_validation():
    with pytest.raises(ConfigError):
        MlpSpec((3,))
    with pytest.raises(ConfigError):
        MlpSpec((3, 0, 1))
    with pytest.raises(ConfigError):
        MlpSpec((3, 1), activation="tanh")
    with pytest.raises(ConfigError):
        MlpSpec((3, 1), dropout_rate=1.0)


def test_initialisation_is_he_uniform():
    net = Network(MlpSpec((200, 300, 1)), seed=0)
    w = net.weights[0]
    limit = np.sqrt(6.0 / 200)
    assert np.abs(w).max() <= limit
    assert abs(w.var() - limit**2 / 3) < 0.05 * limit**2 / 3


# ---------------------------------------------------------------- losses and gradients


def test_squared_error_examples():
    net = Network(MlpSpec((1, 1)), seed=0)
    net.weights[0][...] = 0.0
    net.biases[0][...] = 2.0
    value, grads = loss_and_grad(net, np.zeros((1, 1)), np.array([0.0]), "squared_error")
    assert value == 4.0
    value, grads = loss_and_grad(net, np.zeros((1, 1)), np.array([2.0]), "squared_error")
    assert value == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_unknown_loss_kind():
    with pytest.raises(ConfigError):
        loss_and_grad(Network(MlpSpec((1, 1))), np.zeros((1, 1)), np.zeros(1), "hinge")


def test_ordinal_loss_hand_value():
    # one comparison, delta = (0, 1), eta = 0.5, y = 0
    raw = np.array([0.0, np.log(1.0)])
    total, _, _ = ordinal_nll(np.array([0.5]), np.array([0]), raw)
    expected = -np.log(1 / (1 + np.exp(-0.5))) - np.log(1 / (1 + np.exp(-1.5)))
    assert total == pytest.approx(expected, rel=1e-12)
    assert total == pytest.approx(0.6755, abs=1e-4)


@given(st.integers(0, 10_000), st.sampled_from(["squared_error", "ordinal_all_threshold"]))
def test_gradients_match_finite_differences(seed, kind):
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 4))
    widths = (int(rng.integers(1, 6)), *rng.integers(1, 8, size=depth - 1).tolist(), 1)
    net = Network(MlpSpec(widths), seed=seed)
    for b in net.biases:
        # nonzero biases keep pre-activations off the ReLU kink
        b[...] = rng.uniform(0.05, 0.3, size=b.shape) * rng.choice([-1, 1], size=b.shape)
    x = rng.standard_normal((5, widths[0]))
    y = rng.integers(0, 3, size=5) if kind == "ordinal_all_threshold" else rng.standard_normal(5)
    thr = np.array([rng.normal(), rng.normal(scale=0.3)]) if kind != "squared_error" else None
    value, grads = loss_and_grad(net, x, y, kind, thr)
    params = net.parameters() + ([thr] if thr is not None else [])
    numeric = _numeric_grads(lambda: loss_and_grad(net, x, y, kind, thr)[0], params)
    for p, g, n in zip(params, grads, numeric):
        assert g.shape == p.shape
        np.testing.assert_allclose(g, n, rtol=1e-4, atol=1e-7)


def test_cross_entropy_gradient(rng):
    net = Network(MlpSpec((3, 5, 4)), seed=7)
    x = rng.standard_normal((6, 3))
    t = rng.integers(0, 4, size=6)
    _, grads = loss_and_grad(net, x, t, "cross_entropy")
    numeric = _numeric_grads(lambda: loss_and_grad(net, x, t, "cross_entropy")[0], net.parameters())
    for g, n in zip(grads, numeric):
        np.testing.assert_allclose(g, n, rtol=1e-4, atol=1e-7)


# ---------------------------------------------------------------- optimiser


def test_adam_first_step_hand_value():
    w = np.array([0.0])
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.0)
    adam_step([w], [np.array([1.0])], [np.zeros(1)], [np.zeros(1)], cfg, t=1)
    # m_hat = 1, v_hat = 1 -> step = lr * 1 / (1 + eps)
    assert w[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_gradient_fixed_point():
    w = np.array([1.5, -2.0])
    Adam([w], TrainConfig(weight_decay=0.0)).step([np.zeros(2)])
    np.testing.assert_array_equal(w, [1.5, -2.0])


def test_adam_decay_only_step():
    w = np.array([1.0])
    cfg = TrainConfig(learning_rate=0.01, weight_decay=1e-8)
    Adam([w], cfg).step([np.zeros(1)])
    assert w[0] == 1.0 - 0.01 * 1e-8


def test_clip_examples():
    out = clip_gradients([np.array([3.0, 4.0])], 1.0)
    np.testing.assert_allclose(out[0], [0.6, 0.8])
    small = [np.array([0.3]), np.array([0.4])]
    assert all(a is b or np.array_equal(a, b) for a, b in zip(clip_gradients(small, 1.0), small))
    zeros = clip_gradients([np.zeros(3)], 1.0)
    assert np.all(zeros[0] == 0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(0.01, 10))
def test_clip_bound(values, max_norm):
    out = clip_gradients([np.array(values)], max_norm)
    assert global_norm(out) <= max_norm + 1e-12


# ---------------------------------------------------------------- spectral normalization


def test_spectral_examples():
    u = np.array([1.0, 1.0]) / np.sqrt(2)
    w, _, sigma = spectral_normalize(np.eye(2), u, 1)
    assert sigma == pytest.approx(1.0)
    np.testing.assert_array_equal(w, np.eye(2))
    w, _, sigma = spectral_normalize(np.diag([4.0, 1.0]), u, 50)
    assert sigma == pytest.approx(4.0, rel=1e-9)
    np.testing.assert_allclose(w, np.diag([1.0, 0.25]), rtol=1e-9)
    small = np.diag([0.5, 0.2])
    w, _, _ = spectral_normalize(small, u, 5)
    np.testing.assert_array_equal(w, small)
    w, _, sigma = spectral_normalize(np.zeros((2, 3)), u, 3)
    assert sigma == 0.0 and np.all(w == 0)


def test_spectral_tolerance_mode_converges(rng):
    w = rng.standard_normal((6, 4)) * 3
    u = np.ones(6) / np.sqrt(6)
    _, _, sigma = spectral_normalize(w, u, 1, tol=1e-12, max_iters=1000)
    assert sigma == pytest.approx(np.linalg.svd(w, compute_uv=False)[0], rel=1e-8)
    w0, _, _ = spectral_normalize(np.zeros((2, 3)), u[:2], 3)
    assert np.all(w0 == 0)


@given(st.integers(0, 1000))
def test_spectral_bound_after_adam(seed):
    rng = np.random.default_rng(seed)
    net = Network(MlpSpec((5, 7, 3), spectral_normalized=True), seed=seed)
    opt = Adam(net.parameters(), TrainConfig(learning_rate=0.05))
    for _ in range(5):
        opt.step([rng.standard_normal(p.shape) for p in net.parameters()])
        net.project()
        for w in net.weights:
            assert _power_sigma(w) <= 1 + 1e-3


# ---------------------------------------------------------------- training


class _Scripted:
    """Trainable whose validation loss follows a fixed script."""

    def __init__(self, val_losses):
        self.w = np.zeros(1)
        self.val = list(val_losses)
        self.calls = 0

    def parameters(self):
        return [self.w]

    def loss_and_grad(self, x):
        return 0.0, [np.ones(1)]

    def evaluate(self, x):
        self.calls += 1
        return self.val[self.calls - 1]

    def project(self):
        pass

    def get_state(self):
        return [self.w.copy()]

    def set_state(self, state):
        self.w[...] = state[0]


def test_patience_one_stops_at_epoch_two():
    model = _Scripted([1.0, 2.0, 3.0, 4.0])
    cfg = TrainConfig(learning_rate=0.1, batch_size=4, max_epochs=10, patience=1)
    trained, hist = train_early_stopping(model, (np.zeros(4),), (np.zeros(2),), cfg)
    assert hist.epochs == 2 and hist.best_epoch == 1
    # parameters after epoch 1 (one Adam step of ~ -lr)
    assert trained.w[0] == pytest.approx(-0.1, rel=1e-6)


def test_max_epochs_zero_is_noop():
    net = Network(MlpSpec((2, 1)), seed=0)
    before = net.get_state()
    _, hist = train_early_stopping(net, (np.zeros((4, 2)), np.zeros(4)), (np.zeros((2, 2)), np.zeros(2)),
                                   TrainConfig(max_epochs=0), loss="squared_error")
    assert hist.epochs == 0 and hist.train_loss == []
    for a, b in zip(before, net.get_state()):
        np.testing.assert_array_equal(a, b)


def test_training_is_bit_deterministic(rng):
    x = rng.standard_normal((64, 3))
    y = x @ np.array([1.0, -2.0, 0.5]) + 0.1 * rng.standard_normal(64)
    runs = []
    for _ in range(2):
        net = Network(MlpSpec((3, 8, 1), dropout_rate=0.2), seed=4)
        _, hist = train_early_stopping(net, (x[:48], y[:48]), (x[48:], y[48:]),
                                       TrainConfig(learning_rate=1e-2, batch_size=16, max_epochs=30, seed=9),
                                       loss="squared_error")
        runs.append(hist.val_loss)
    assert runs[0] == runs[1]


def test_divergence_names_epoch():
    class Exploding(_Scripted):
        def loss_and_grad(self, x):
            return float("nan"), [np.ones(1)]

    with pytest.raises(TrainingDivergedError, match="epoch 1"):
        train_early_stopping(Exploding([1.0]), (np.zeros(2),), (np.zeros(2),), TrainConfig(max_epochs=3, patience=1))


def test_training_reduces_loss(rng):
    x = rng.standard_normal((200, 2))
    y = np.sin(x[:, 0]) + x[:, 1] ** 2
    net = Network(MlpSpec((2, 32, 1)), seed=0)
    model = SupervisedNet(net, "squared_error")
    start = model.evaluate(x[160:], y[160:])
    _, hist = train_early_stopping(model, (x[:160], y[:160]), (x[160:], y[160:]),
                                   TrainConfig(learning_rate=1e-2, batch_size=32, max_epochs=200, patience=20))
    assert hist.best_val_loss < 0.3 * start


def test_split_train_val():
    fit, val = split_train_val(10, 0.2, seed=1)
    assert len(val) == 2 and len(fit) == 8
    assert set(fit) | set(val) == set(range(10))
    f2, v2 = split_train_val(10, 0.2, seed=1)
    np.testing.assert_array_equal(val, v2)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(patience=20, max_epochs=10)
