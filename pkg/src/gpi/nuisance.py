"""Cross-fitted nuisance functions: deconfounder, outcome heads, propensity."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import CausalDataset, FoldAssignment
from .errors import ConfigError, DegenerateTreatmentError, DimensionError, PartitionError
from .nn import (
    MlpSpec,
    Network,
    TrainConfig,
    TrainHistory,
    loss_from_output,
    split_train_val,
    train_early_stopping,
)

VAL_FRACTION = 0.2


def _standardizer(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0) if len(x) else np.zeros(x.shape[1])
    scale = x.std(axis=0) if len(x) else np.ones(x.shape[1])
    scale = np.where(scale > 1e-12, scale, 1.0)
    return mean, scale


@dataclass(frozen=True)
class JointConfig:
    """Architecture and optimiser settings of one joint-model trial."""

    learning_rate: float = 1e-5
    dropout_rate: float = 0.1
    head_width: int = 100
    deconfounder_widths: tuple[int, int] = (512, 256)
    deconfounder_out_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "deconfounder_widths", tuple(int(w) for w in self.deconfounder_widths))
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.deconfounder_out_dim < 1 or self.head_width < 1:
            raise ConfigError("widths must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deconfounder_widths"] = list(self.deconfounder_widths)
        return d


@dataclass(frozen=True)
class SearchSpace:
    lr_range: tuple[float, float] = (1e-7, 1e-4)
    dropout_range: tuple[float, float] = (0.05, 0.3)
    head_widths: tuple[int, ...] = (50, 100, 200)
    deconfounder_widths: tuple[tuple[int, int], ...] = ((256, 128), (512, 256), (1024, 512))
    trials: int = 20
    deconfounder_out_dim: int = 64

    def __post_init__(self):
        lo, hi = self.lr_range
        if not 0 < lo <= hi:
            raise ConfigError("lr_range must be a positive, ordered interval")
        dlo, dhi = self.dropout_range
        if not 0 <= dlo <= dhi < 1:
            raise ConfigError("dropout_range must lie in [0, 1)")
        if not self.head_widths or not self.deconfounder_widths:
            raise ConfigError("architecture choices must be nonempty")
        if self.trials < 1:
            raise ConfigError("need at least one trial")

    def sample(self, rng: np.random.Generator) -> JointConfig:
        lo, hi = self.lr_range
        lr = float(math.exp(rng.uniform(math.log(lo), math.log(hi)))) if hi > lo else float(lo)
        dropout = float(rng.uniform(*self.dropout_range))
        head = int(self.head_widths[rng.integers(len(self.head_widths))])
        widths = self.deconfounder_widths[rng.integers(len(self.deconfounder_widths))]
        return JointConfig(lr, dropout, head, tuple(widths), self.deconfounder_out_dim)


class JointNuisanceModel:
    """Deconfounder ``f(R)`` feeding one scalar outcome head per treatment level.

    Each sample's squared error flows back only through the head of its own
    treatment level, and through the shared deconfounder.
    """

    def __init__(self, d_r: int, d_z: int, n_levels: int, config: JointConfig, seed=0):
        ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
        dec_ss, *head_ss = ss.spawn(n_levels + 1)
        q = config.deconfounder_out_dim
        self.config = config
        self.n_levels = n_levels
        self.deconfounder = Network(
            MlpSpec((d_r, *config.deconfounder_widths, q), dropout_rate=config.dropout_rate), dec_ss
        )
        head_spec = MlpSpec((q + d_z, config.head_width, 1), dropout_rate=config.dropout_rate)
        self.heads = [Network(head_spec, s) for s in head_ss]
        self.z_mean = np.zeros(d_z)
        self.z_scale = np.ones(d_z)

    @property
    def out_dim(self) -> int:
        return self.config.deconfounder_out_dim

    def parameters(self):
        params = self.deconfounder.parameters()
        for h in self.heads:
            params += h.parameters()
        return params

    def get_state(self):
        return [p.copy() for p in self.parameters()]

    def set_state(self, state):
        for p, s in zip(self.parameters(), state):
            p[...] = s

    def project(self):
        pass

    def features(self, reps: np.ndarray) -> np.ndarray:
        return self.deconfounder.forward(reps, "eval")

    def _head_input(self, f: np.ndarray, z: np.ndarray) -> np.ndarray:
        return np.hstack([f, (z - self.z_mean) / self.z_scale])

    def predict(self, reps: np.ndarray, z: np.ndarray) -> np.ndarray:
        """``(n, L)`` matrix of mu_t(f(R), Z) for every level t (eval mode)."""
        h = self._head_input(self.features(reps), z)
        return np.column_stack([head.forward(h, "eval")[:, 0] for head in self.heads])

    def loss_and_grad(self, reps, z, t, y):
        n = len(y)
        f, dec_cache = self.deconfounder.forward_cached(reps, "train")
        h = self._head_input(f, z)
        d_h = np.zeros_like(h)
        total = 0.0
        head_grads = []
        for level, head in enumerate(self.heads):
            idx = np.flatnonzero(t == level)
            if idx.size == 0:
                head_grads += [np.zeros_like(p) for p in head.parameters()]
                continue
            out, cache = head.forward_cached(h[idx], "train")
            r = out[:, 0] - y[idx]
            total += float(r @ r)
            g, g_in = head.backward(cache, (2.0 * r / n)[:, None])
            head_grads += g
            d_h[idx] += g_in
        dec_grads, _ = self.deconfounder.backward(dec_cache, d_h[:, : self.out_dim])
        return total / n, dec_grads + head_grads

    def evaluate(self, reps, z, t, y):
        mu = self.predict(reps, z)
        r = mu[np.arange(len(y)), t] - y
        return float(np.mean(r * r))


def fit_joint(
    reps: np.ndarray,
    z: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    n_levels: int,
    config: JointConfig,
    train_cfg: TrainConfig,
) -> tuple[JointNuisanceModel, TrainHistory]:
    """Train the joint model with early stopping on a seeded 20% validation tail."""
    absent = np.setdiff1d(np.arange(n_levels), t)
    if absent.size:
        raise PartitionError(f"training slice lacks treatment levels {absent.tolist()}")
    model = JointNuisanceModel(reps.shape[1], z.shape[1], n_levels, config, train_cfg.seed)
    fit_idx, val_idx = split_train_val(len(y), VAL_FRACTION, train_cfg.seed)
    model.z_mean, model.z_scale = _standardizer(z[fit_idx])
    data = (reps, z, t, y)
    train = tuple(a[fit_idx] for a in data)
    val = tuple(a[val_idx] for a in data)
    cfg = train_cfg.replace(learning_rate=config.learning_rate)
    model, history = train_early_stopping(model, train, val, cfg)
    return model, history


PROPENSITY_WIDTHS = (128, 64)
PROPENSITY_LR = 1e-5


class PropensityModel:
    """Spectrally normalised softmax classifier of T on standardised ``[f(R), Z]``."""

    def __init__(self, d_in: int, n_levels: int, widths=PROPENSITY_WIDTHS, seed=0, lipschitz: float = 1.0):
        if lipschitz <= 0:
            raise ConfigError("lipschitz bound must be positive")
        spec = MlpSpec((d_in, *widths, n_levels), spectral_normalized=True)
        self.net = Network(spec, seed)
        self.n_levels = n_levels
        # every layer is 1-Lipschitz; the input gain sets the bound in standardised units
        self.lipschitz = float(lipschitz)
        self.in_mean = np.zeros(d_in)
        self.in_scale = np.ones(d_in)

    def parameters(self):
        return self.net.parameters()

    def get_state(self):
        return self.net.get_state()

    def set_state(self, state):
        self.net.set_state(state)

    def project(self):
        self.net.project()

    def _x(self, x):
        return self.lipschitz * (x - self.in_mean) / self.in_scale

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(self._x(x), "eval")

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        lg = self.logits(x)
        lg = lg - lg.max(axis=1, keepdims=True)
        p = np.exp(lg)
        return p / p.sum(axis=1, keepdims=True)

    def loss_and_grad(self, x, t):
        out, cache = self.net.forward_cached(self._x(x), "train")
        value, d_out, _ = loss_from_output("cross_entropy", out, t)
        grads, _ = self.net.backward(cache, d_out)
        return value, grads

    def evaluate(self, x, t):
        return loss_from_output("cross_entropy", self.logits(x), t)[0]


def propensity_inputs(joint: JointNuisanceModel, reps: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.hstack([joint.features(reps), z])


def fit_propensity(
    reps: np.ndarray,
    z: np.ndarray,
    t: np.ndarray,
    joint: JointNuisanceModel,
    n_levels: int,
    train_cfg: TrainConfig,
    widths=PROPENSITY_WIDTHS,
    lipschitz: float = 1.0,
) -> tuple[PropensityModel, TrainHistory]:
    """Multinomial fit of T on the frozen deconfounder output and Z."""
    if np.unique(t).size < 2:
        raise DegenerateTreatmentError("propensity training slice has a single treatment class")
    x = propensity_inputs(joint, reps, z)
    model = PropensityModel(x.shape[1], n_levels, widths, seed=train_cfg.seed, lipschitz=lipschitz)
    fit_idx, val_idx = split_train_val(len(t), VAL_FRACTION, train_cfg.seed)
    model.in_mean, model.in_scale = _standardizer(x[fit_idx])
    model, history = train_early_stopping(model, (x[fit_idx], t[fit_idx]), (x[val_idx], t[val_idx]), train_cfg)
    return model, history


@dataclass
class TrialRecord:
    fold: int
    trial: int
    config: dict
    val_loss: float
    epochs: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def tune_joint(
    reps, z, t, y, n_levels: int, space: SearchSpace | JointConfig, train_cfg: TrainConfig, seed, fold: int = 0
) -> tuple[JointNuisanceModel, list[TrialRecord]]:
    """Random search over ``space``; the best-validation trial's fitted model is returned."""
    if isinstance(space, JointConfig):
        configs = [space]
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed, fold, 0x7E5]))
        configs = [space.sample(rng) for _ in range(space.trials)]
    best_model, best_loss, trace = None, np.inf, []
    for i, config in enumerate(configs):
        cfg = train_cfg.replace(seed=int(np.random.SeedSequence([seed, fold, i]).generate_state(1)[0]))
        model, hist = fit_joint(reps, z, t, y, n_levels, config, cfg)
        trace.append(TrialRecord(fold, i, config.to_dict(), hist.best_val_loss, hist.epochs))
        if hist.best_val_loss < best_loss or best_model is None:
            best_model, best_loss = model, hist.best_val_loss
    return best_model, trace


@dataclass
class NuisanceEstimates:
    mu_hat: np.ndarray
    pi_hat: np.ndarray
    f_hat: np.ndarray
    fold_of: np.ndarray
    fold_seed: int = 0
    trace: list[TrialRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.mu_hat.shape != self.pi_hat.shape:
            raise DimensionError("mu_hat and pi_hat must share shape (n, L)")

    @property
    def n_levels(self) -> int:
        return self.mu_hat.shape[1]


@dataclass(frozen=True)
class PropensityConfig:
    learning_rate: float = PROPENSITY_LR
    widths: tuple[int, ...] = PROPENSITY_WIDTHS
    weight_decay: float = 1e-8
    lipschitz: float = 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def _fit_fold(ds: CausalDataset, folds: FoldAssignment, k: int, space, train_cfg, prop_cfg, seed):
    i1 = folds.inner_rows(k, 0)
    i2 = folds.inner_rows(k, 1)
    out = folds.held_out(k)
    joint, trace = tune_joint(
        ds.reps[i1], ds.z[i1], ds.t[i1], ds.y[i1], ds.n_levels, space, train_cfg, seed, fold=k
    )
    p_seed = int(np.random.SeedSequence([seed, k, 0x9125]).generate_state(1)[0])
    p_cfg = train_cfg.replace(learning_rate=prop_cfg.learning_rate, weight_decay=prop_cfg.weight_decay, seed=p_seed)
    prop, _ = fit_propensity(
        ds.reps[i2], ds.z[i2], ds.t[i2], joint, ds.n_levels, p_cfg, prop_cfg.widths, prop_cfg.lipschitz
    )
    mu = joint.predict(ds.reps[out], ds.z[out])
    pi = prop.predict_proba(propensity_inputs(joint, ds.reps[out], ds.z[out]))
    f = joint.features(ds.reps[out])
    return out, mu, pi, f, trace


def cross_fit(
    ds: CausalDataset,
    folds: FoldAssignment,
    space: SearchSpace | JointConfig,
    seed: int = 0,
    train_cfg: TrainConfig | None = None,
    prop_cfg: PropensityConfig | None = None,
    threads: int = 1,
) -> NuisanceEstimates:
    """Fit nuisances on each fold's complement and predict on the held-out fold.

    For fold k the joint model (after tuning) is trained on inner split I1
    and the propensity model on I2; predictions are made only for rows in
    fold k, so no row is scored by a model that saw its cluster.
    """
    if folds.fold_of.shape[0] != ds.n:
        raise DimensionError("fold assignment does not match dataset size")
    train_cfg = train_cfg or TrainConfig()
    prop_cfg = prop_cfg or PropensityConfig()
    q = space.deconfounder_out_dim
    mu_hat = np.zeros((ds.n, ds.n_levels))
    pi_hat = np.zeros((ds.n, ds.n_levels))
    f_hat = np.zeros((ds.n, q))
    jobs = [(ds, folds, k, space, train_cfg, prop_cfg, seed) for k in range(folds.k)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda a: _fit_fold(*a), jobs))
    else:
        results = [_fit_fold(*a) for a in jobs]
    trace: list[TrialRecord] = []
    for out, mu, pi, f, tr in results:
        mu_hat[out], pi_hat[out], f_hat[out] = mu, pi, f
        trace += tr
    return NuisanceEstimates(mu_hat, pi_hat, f_hat, folds.fold_of.copy(), folds.seed, trace)


def split_seeds(seed: int, repeats: int) -> list[int]:
    """Seeds of repeated cross-fits; the first is ``seed`` itself."""
    if repeats < 1:
        raise ConfigError("repeats must be at least 1")
    return [seed] + [int(np.random.SeedSequence([seed, r, 0x5E9]).generate_state(1)[0]) for r in range(1, repeats)]
