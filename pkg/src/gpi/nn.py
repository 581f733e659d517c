"""Dense ReLU networks with hand-written backprop, Adam and early stopping.

Weights are stored as ``(fan_in, fan_out)`` so a layer computes
``x @ W + b``. All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, TrainingDivergedError, ValidationError

LOSS_KINDS = ("squared_error", "ordinal_all_threshold", "cross_entropy")
MODES = ("train", "eval", "mc_dropout")
PROJECT_TOL = 1e-6


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    dropout_rate: float = 0.0
    spectral_normalized: bool = False

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigError("an MLP needs at least an input and an output width")
        if min(widths) <= 0:
            raise ConfigError(f"layer widths must be positive, got {widths}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 10000
    patience: int = 5
    clip_norm: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 0 or self.patience < 0:
            raise ConfigError("max_epochs and patience must be non-negative")
        if self.patience > self.max_epochs and self.max_epochs > 0:
            raise ConfigError("patience must not exceed max_epochs")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")

    def replace(self, **changes) -> "TrainConfig":
        from dataclasses import replace

        return replace(self, **changes)


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


def spectral_normalize(
    weight: np.ndarray, u: np.ndarray, iters: int = 1, tol: float | None = None, max_iters: int = 200
) -> tuple[np.ndarray, np.ndarray, float]:
    """Rescale ``weight`` so its largest singular value is at most one.

    ``u`` is the running left singular vector estimate (length
    ``weight.shape[0]``). Runs ``iters`` power iterations, then, when
    ``tol`` is given, keeps iterating (up to ``max_iters`` in total) until
    the estimate changes by less than ``tol`` relative. Returns the
    rescaled matrix, the updated vector and the spectral norm estimate
    before rescaling.
    """
    if iters < 1:
        raise ConfigError("spectral_normalize needs iters >= 1")
    if u.shape != (weight.shape[0],):
        raise DimensionError(f"power vector has shape {u.shape}, expected ({weight.shape[0]},)")
    if not np.any(weight):
        return weight, u, 0.0
    sigma = 0.0
    for i in range(max(iters, max_iters if tol is not None else iters)):
        v = _unit(weight.T @ u)
        u = _unit(weight @ v)
        prev, sigma = sigma, float(u @ weight @ v)
        if i + 1 >= iters and (tol is None or abs(sigma - prev) <= tol * sigma):
            break
    if sigma <= 1.0 + 1e-12:
        return weight, u, sigma
    return weight / sigma, u, sigma


class Network:
    """Feed-forward ReLU network as specified by an :class:`MlpSpec`.

    Dropout (inverted) follows every hidden activation. ``seed`` fixes the
    He-uniform initialisation, the dropout stream and the power-iteration
    vectors used for spectral normalisation.
    """

    def __init__(self, spec: MlpSpec, seed: int | np.random.SeedSequence = 0):
        self.spec = spec
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        init_ss, drop_ss, power_ss = ss.spawn(3)
        init_rng = np.random.default_rng(init_ss)
        widths = spec.layer_widths
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / fan_in)
            self.weights.append(init_rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.rng = np.random.default_rng(drop_ss)
        self.power_vectors: list[np.ndarray] | None = None
        if spec.spectral_normalized:
            power_rng = np.random.default_rng(power_ss)
            self.power_vectors = [_unit(power_rng.standard_normal(w.shape[0])) for w in self.weights]
            # start inside the constraint set with a well-converged estimate
            self.project(iters=100)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def project(self, iters: int = 1, tol: float | None = PROJECT_TOL) -> None:
        """Apply spectral normalisation in place (no-op for plain nets).

        One warm-started power iteration usually suffices; after large
        steps the estimate lags, so iteration continues until it settles.
        """
        if self.power_vectors is None:
            return
        for i, w in enumerate(self.weights):
            w_new, u, _ = spectral_normalize(w, self.power_vectors[i], iters, tol)
            w[...] = w_new
            self.power_vectors[i] = u

    def get_state(self) -> list[np.ndarray]:
        state = [p.copy() for p in self.parameters()]
        if self.power_vectors is not None:
            state += [u.copy() for u in self.power_vectors]
        return state

    def set_state(self, state: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        for p, s in zip(params, state):
            p[...] = s
        if self.power_vectors is not None:
            self.power_vectors = [u.copy() for u in state[len(params):]]

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.input_width:
            raise DimensionError(
                f"network expects (n, {self.spec.input_width}) input, got {x.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise ValidationError("network input contains non-finite values")
        return x

    def forward_cached(self, x, mode: str = "train", rng: np.random.Generator | None = None):
        if mode not in MODES:
            raise ConfigError(f"unknown forward mode {mode!r}")
        a = self._check_input(x)
        p = self.spec.dropout_rate
        drop = mode != "eval" and p > 0
        rng = self.rng if rng is None else rng
        cache = []
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            if i == last:
                cache.append((a, None, None))
                a = z
                break
            h = np.maximum(z, 0.0)
            mask = None
            if drop:
                mask = (rng.random(h.shape) >= p) / (1.0 - p)
                h = h * mask
            cache.append((a, z, mask))
            a = h
        return a, cache

    def forward(self, x, mode: str = "eval", rng: np.random.Generator | None = None) -> np.ndarray:
        return self.forward_cached(x, mode, rng)[0]

    def backward(self, cache, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Return parameter gradients (ordered like :meth:`parameters`) and dL/dx."""
        g = grad_out
        grads: list[np.ndarray] = [None] * (2 * self.n_layers)  # type: ignore[list-item]
        for i in range(self.n_layers - 1, -1, -1):
            a, z, mask = cache[i]
            if z is not None:
                if mask is not None:
                    g = g * mask
                g = g * (z > 0)
            grads[2 * i] = a.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g


# ---------------------------------------------------------------- losses


def ordinal_thresholds(raw: np.ndarray) -> np.ndarray:
    """Map unconstrained ``(d0, log_gap)`` to ordered cut points ``(d0, d0 + exp(log_gap))``."""
    return np.array([raw[0], raw[0] + np.exp(raw[1])])


def ordinal_nll(eta: np.ndarray, y: np.ndarray, raw_thresholds: np.ndarray):
    """Summed all-threshold cumulative-logit negative log likelihood.

    ``P(y <= k) = sigmoid(delta_k + eta)`` for ``k`` in {0, 1}. Returns the
    summed loss, dL/d eta and dL/d raw_thresholds.
    """
    delta = ordinal_thresholds(raw_thresholds)
    total = 0.0
    d_eta = np.zeros_like(eta)
    d_delta = np.zeros(2)
    for k in (0, 1):
        s = delta[k] + eta
        below = (y <= k).astype(np.float64)
        # -log sigmoid(s) = softplus(-s); -log(1 - sigmoid(s)) = softplus(s)
        total += float(np.sum(below * np.logaddexp(0.0, -s) + (1 - below) * np.logaddexp(0.0, s)))
        resid = 1.0 / (1.0 + np.exp(-s)) - below
        d_eta += resid
        d_delta[k] = resid.sum()
    d_raw = np.array([d_delta[0] + d_delta[1], d_delta[1] * np.exp(raw_thresholds[1])])
    return total, d_eta, d_raw


def loss_from_output(kind: str, out: np.ndarray, targets: np.ndarray, thresholds=None):
    """Mean loss of network output ``out`` plus its gradient (and threshold gradient)."""
    n = out.shape[0]
    if kind == "squared_error":
        r = out[:, 0] - targets
        return float(np.mean(r * r)), (2.0 * r / n)[:, None], None
    if kind == "cross_entropy":
        labels = np.asarray(targets, dtype=np.int64)
        shift = out - out.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shift).sum(axis=1))
        loss = float(np.mean(log_z - shift[np.arange(n), labels]))
        prob = np.exp(shift - log_z[:, None])
        prob[np.arange(n), labels] -= 1.0
        return loss, prob / n, None
    if kind == "ordinal_all_threshold":
        if thresholds is None:
            raise ConfigError("ordinal loss needs threshold parameters")
        total, d_eta, d_raw = ordinal_nll(out[:, 0], targets, thresholds)
        return total / n, (d_eta / n)[:, None], d_raw / n
    raise ConfigError(f"unknown loss kind {kind!r}")


def loss_and_grad(
    net: Network,
    batch: np.ndarray,
    targets: np.ndarray,
    loss: str,
    thresholds: np.ndarray | None = None,
    mode: str = "train",
    rng: np.random.Generator | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Mean batch loss and exact gradients for every parameter.

    For the ordinal loss the network output is the strength difference and
    the threshold gradient is appended after the network's parameters.
    """
    if loss not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {loss!r}")
    targets = np.asarray(targets)
    if targets.shape[0] != np.shape(batch)[0]:
        raise DimensionError("targets length must equal batch rows")
    out, cache = net.forward_cached(batch, mode, rng)
    value, d_out, d_thr = loss_from_output(loss, out, targets, thresholds)
    grads, _ = net.backward(cache, d_out)
    if d_thr is not None:
        grads.append(d_thr)
    return value, grads


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    scale = max_norm / norm
    return [g * scale for g in grads]


class Adam:
    """Adam with bias correction and decoupled weight decay, updating in place."""

    def __init__(self, params: Sequence[np.ndarray], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        adam_step(self.params, grads, self.m, self.v, self.cfg, self.t)


def adam_step(params, grads, m, v, cfg: TrainConfig, t: int) -> None:
    if t < 1:
        raise ConfigError("Adam step count starts at 1")
    lr, b1, b2 = cfg.learning_rate, cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m_i, v_i in zip(params, grads, m, v):
        if cfg.weight_decay:
            p -= lr * cfg.weight_decay * p
        m_i *= b1
        m_i += (1.0 - b1) * g
        v_i *= b2
        v_i += (1.0 - b2) * g * g
        p -= lr * (m_i / c1) / (np.sqrt(v_i / c2) + cfg.eps)


# ---------------------------------------------------------------- training


class Trainable(Protocol):
    def parameters(self) -> list[np.ndarray]: ...

    def loss_and_grad(self, *batch: np.ndarray) -> tuple[float, list[np.ndarray]]: ...

    def evaluate(self, *data: np.ndarray) -> float: ...

    def project(self) -> None: ...

    def get_state(self) -> list[np.ndarray]: ...

    def set_state(self, state: Sequence[np.ndarray]) -> None: ...


class SupervisedNet:
    """Adapter that trains a bare :class:`Network` on ``(x, y)`` pairs."""

    def __init__(self, net: Network, loss: str, thresholds: np.ndarray | None = None):
        if loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {loss!r}")
        if loss == "ordinal_all_threshold" and thresholds is None:
            thresholds = np.array([-0.5, 0.0])
        self.net = net
        self.loss = loss
        self.thresholds = None if thresholds is None else np.asarray(thresholds, dtype=np.float64)

    def parameters(self):
        params = self.net.parameters()
        return params + [self.thresholds] if self.thresholds is not None else params

    def loss_and_grad(self, x, y):
        return loss_and_grad(self.net, x, y, self.loss, self.thresholds)

    def evaluate(self, x, y):
        out = self.net.forward(x, "eval")
        return loss_from_output(self.loss, out, y, self.thresholds)[0]

    def project(self):
        self.net.project()

    def get_state(self):
        state = self.net.get_state()
        return state + [self.thresholds.copy()] if self.thresholds is not None else state

    def set_state(self, state):
        if self.thresholds is not None:
            self.thresholds[...] = state[-1]
            state = state[:-1]
        self.net.set_state(state)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs(self) -> int:
        return len(self.val_loss)

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1] if self.best_epoch else float("inf")


def _take(arrays: Sequence[np.ndarray], idx: np.ndarray) -> tuple[np.ndarray, ...]:
    return tuple(a[idx] for a in arrays)


def train_early_stopping(
    model: Trainable | Network,
    train: Sequence[np.ndarray],
    val: Sequence[np.ndarray],
    cfg: TrainConfig,
    loss: str | None = None,
) -> tuple[Trainable, TrainHistory]:
    """Mini-batch Adam with patience-based early stopping.

    ``train`` and ``val`` are tuples of arrays sharing their first axis; they
    are passed positionally to the model's ``loss_and_grad``/``evaluate``.
    The model is restored to its best-validation epoch before returning.
    """
    if isinstance(model, Network):
        if loss is None:
            raise ConfigError("a loss kind is required to train a bare Network")
        model = SupervisedNet(model, loss)
    train = tuple(np.asarray(a) for a in train)
    val = tuple(np.asarray(a) for a in val)
    n_train = len(train[0])
    if n_train == 0 or len(val[0]) == 0:
        raise ValidationError("training and validation slices must be nonempty")

    history = TrainHistory()
    if cfg.max_epochs == 0:
        return model, history

    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    opt = Adam(model.parameters(), cfg)
    best_state = model.get_state()
    best = np.inf
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            value, grads = model.loss_and_grad(*_take(train, idx))
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, value)
            opt.step(clip_gradients(grads, cfg.clip_norm))
            model.project()
            total += value * len(idx)
        val_loss = float(model.evaluate(*val))
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch, val_loss)
        history.train_loss.append(total / n_train)
        history.val_loss.append(val_loss)
        if val_loss < best:
            best = val_loss
            best_state = model.get_state()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.set_state(best_state)
    return model, history


def split_train_val(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle of ``range(n)``; the last ``val_fraction`` becomes validation."""
    if n < 2:
        raise ValidationError("need at least two rows to carve out a validation split")
    order = np.random.default_rng(np.random.SeedSequence([seed, 0xBA1])).permutation(n)
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    return np.sort(order[: n - n_val]), np.sort(order[n - n_val:])
