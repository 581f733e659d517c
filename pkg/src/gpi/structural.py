"""Semiparametric pairwise cumulative-logit model of argument strength.

Each argument's strength is ``mu(t_j, f(R_j))``: a deconfounder network on
the argument's representation and a strength head on
``[one_hot(t_j), f(R_j)]``. For a comparison of ``j`` against ``j'``,
``P(y <= k) = sigmoid(delta_k + mu_j - mu_j')``, with ``y = 0`` meaning
``j`` was judged more persuasive, 1 a tie and 2 that ``j'`` was.

By default the cut points are tied as ``delta_0 = -delta_1`` so that
presentation order carries no information: swapping ``j`` and ``j'`` and
mapping ``y -> 2 - y`` leaves the likelihood unchanged.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CoverageError, DimensionError, ValidationError
from .nn import MlpSpec, Network, TrainConfig, TrainHistory, ordinal_nll, ordinal_thresholds, split_train_val, train_early_stopping
from .nuisance import JointConfig

N_ELEMENTS = 14
MC_CHUNK_ROWS = 200_000


def _readonly(a, dtype=None) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PairwiseDataset:
    """Argument table (one row per argument) plus respondent comparisons."""

    reps: np.ndarray
    t: np.ndarray
    s: np.ndarray
    p: np.ndarray
    respondent: np.ndarray
    j: np.ndarray
    j_prime: np.ndarray
    y: np.ndarray
    n_elements: int = N_ELEMENTS
    provenance: str | None = field(default=None, compare=False)

    def __post_init__(self):
        reps = np.asarray(self.reps, dtype=np.float64)
        if reps.ndim != 2:
            raise DimensionError("argument representations must be a (J, d_r) matrix")
        n_args = reps.shape[0]
        for name in ("t", "s", "p"):
            if np.asarray(getattr(self, name)).shape != (n_args,):
                raise DimensionError(f"argument column {name} must have {n_args} entries")
        m = np.asarray(self.y).shape[0]
        for name in ("respondent", "j", "j_prime"):
            if np.asarray(getattr(self, name)).shape != (m,):
                raise DimensionError(f"comparison column {name} must have {m} entries")
        t, s, p = (np.asarray(getattr(self, k), dtype=np.int64) for k in ("t", "s", "p"))
        j, jp, y = (np.asarray(getattr(self, k), dtype=np.int64) for k in ("j", "j_prime", "y"))
        if not np.all(np.isfinite(reps)):
            raise ValidationError("argument representations contain non-finite values")
        if t.size and (t.min() < 0 or t.max() >= self.n_elements):
            raise ValidationError(f"elements must lie in 0..{self.n_elements - 1}")
        if m and (min(j.min(), jp.min()) < 0 or max(j.max(), jp.max()) >= n_args):
            raise ValidationError("comparison refers to an unknown argument")
        if not np.all(np.isin(y, (0, 1, 2))):
            raise ValidationError("comparison outcomes must be 0, 1 or 2")
        if np.any(p[j] != p[jp]):
            row = int(np.argmax(p[j] != p[jp]))
            raise ValidationError(f"comparison {row} pairs arguments on different topics")
        if np.any(s[j] == s[jp]):
            row = int(np.argmax(s[j] == s[jp]))
            raise ValidationError(f"comparison {row} pairs arguments on the same side")
        object.__setattr__(self, "reps", _readonly(reps))
        for name, arr in (("t", t), ("s", s), ("p", p), ("j", j), ("j_prime", jp), ("y", y)):
            object.__setattr__(self, name, _readonly(arr))
        object.__setattr__(self, "respondent", _readonly(self.respondent))

    @property
    def n_args(self) -> int:
        return self.reps.shape[0]

    @property
    def n_comparisons(self) -> int:
        return self.y.shape[0]

    def with_reps(self, reps: np.ndarray) -> "PairwiseDataset":
        return replace(self, reps=reps)


def _one_hot(t: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((t.size, width))
    out[np.arange(t.size), t] = 1.0
    return out


class StructuralModel:
    def __init__(self, d_r: int, n_elements: int, config: JointConfig, seed=0, symmetric_thresholds: bool = True):
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        dec_ss, head_ss = ss.spawn(2)
        q = config.deconfounder_out_dim
        self.config = config
        self.n_elements = n_elements
        self.deconfounder = Network(
            MlpSpec((d_r, *config.deconfounder_widths, q), dropout_rate=config.dropout_rate), dec_ss
        )
        self.head = Network(
            MlpSpec((n_elements + q, config.head_width, 1), dropout_rate=config.dropout_rate), head_ss
        )
        self.symmetric_thresholds = bool(symmetric_thresholds)
        self.raw_thresholds = np.array([-0.5, 0.0])
        self.demean_offset = 0.0

    def effective_raw(self) -> np.ndarray:
        """``(delta_0, log_gap)`` actually used; tied mode ignores ``raw_thresholds[0]``."""
        if self.symmetric_thresholds:
            return np.array([-0.5 * np.exp(self.raw_thresholds[1]), self.raw_thresholds[1]])
        return self.raw_thresholds

    def threshold_grad(self, d_raw: np.ndarray) -> np.ndarray:
        """Chain a gradient w.r.t. :meth:`effective_raw` back to ``raw_thresholds``."""
        if self.symmetric_thresholds:
            gap = np.exp(self.raw_thresholds[1])
            return np.array([0.0, d_raw[1] - 0.5 * gap * d_raw[0]])
        return d_raw

    @property
    def thresholds(self) -> np.ndarray:
        return ordinal_thresholds(self.effective_raw())

    def parameters(self):
        return self.deconfounder.parameters() + self.head.parameters() + [self.raw_thresholds]

    def with_dropout(self, rate: float) -> "StructuralModel":
        """Copy sharing no state, with every dropout layer set to ``rate``."""
        other = copy.deepcopy(self)
        for net in (other.deconfounder, other.head):
            net.spec = replace(net.spec, dropout_rate=rate)
        return other

    def strengths(self, reps: np.ndarray, t: np.ndarray, mode: str = "eval", rng=None) -> np.ndarray:
        """Raw (not demeaned) strength of each argument row."""
        f = self.deconfounder.forward(reps, mode, rng)
        return self.head.forward(np.hstack([_one_hot(t, self.n_elements), f]), mode, rng)[:, 0]

    def argument_strengths(self, data: PairwiseDataset) -> np.ndarray:
        """Demeaned ``mu_hat_j`` for every argument."""
        return self.strengths(data.reps, data.t) - self.demean_offset


def ordinal_pair_loss(model: StructuralModel, data: PairwiseDataset, j, j_prime, y, mode="train", rng=None):
    """Summed all-threshold negative log likelihood of a batch of comparisons.

    Gradients (ordered like ``model.parameters()``) flow through both
    arguments of every comparison and into the thresholds.
    """
    args, inverse = np.unique(np.concatenate([j, j_prime]), return_inverse=True)
    m = len(j)
    f, dec_cache = model.deconfounder.forward_cached(data.reps[args], mode, rng)
    x = np.hstack([_one_hot(data.t[args], model.n_elements), f])
    out, head_cache = model.head.forward_cached(x, mode, rng)
    mu = out[:, 0]
    eta = mu[inverse[:m]] - mu[inverse[m:]]
    total, d_eta, d_raw = ordinal_nll(eta, np.asarray(y), model.effective_raw())
    d_mu = np.bincount(inverse[:m], d_eta, args.size) - np.bincount(inverse[m:], d_eta, args.size)
    head_grads, d_x = model.head.backward(head_cache, d_mu[:, None])
    dec_grads, _ = model.deconfounder.backward(dec_cache, d_x[:, model.n_elements:])
    return total, dec_grads + head_grads + [model.threshold_grad(d_raw)]


class _PairObjective:
    """Mean-loss adapter so the generic early-stopping trainer can drive the model."""

    def __init__(self, model: StructuralModel, data: PairwiseDataset):
        self.model = model
        self.data = data

    def parameters(self):
        return self.model.parameters()

    def loss_and_grad(self, j, j_prime, y):
        total, grads = ordinal_pair_loss(self.model, self.data, j, j_prime, y)
        return total / len(y), [g / len(y) for g in grads]

    def evaluate(self, j, j_prime, y):
        mu = self.model.strengths(self.data.reps, self.data.t)
        total, _, _ = ordinal_nll(mu[j] - mu[j_prime], y, self.model.effective_raw())
        return total / len(y)

    def project(self):
        pass

    def get_state(self):
        return [p.copy() for p in self.parameters()]

    def set_state(self, state):
        for p, s in zip(self.parameters(), state):
            p[...] = s


def mean_pair_loss(model: StructuralModel, data: PairwiseDataset) -> float:
    return _PairObjective(model, data).evaluate(data.j, data.j_prime, data.y)


def fit_structural(
    data: PairwiseDataset, config: JointConfig, train_cfg: TrainConfig, symmetric_thresholds: bool = True
) -> tuple[StructuralModel, TrainHistory]:
    """Fit on every comparison (early stopping on a seeded 20% tail), then demean."""
    missing = np.setdiff1d(np.arange(data.n_elements), data.t)
    if missing.size:
        raise CoverageError(f"elements {missing.tolist()} appear in no argument")
    model = StructuralModel(data.reps.shape[1], data.n_elements, config, train_cfg.seed, symmetric_thresholds)
    fit_idx, val_idx = split_train_val(data.n_comparisons, 0.2, train_cfg.seed)
    cols = (data.j, data.j_prime, data.y)
    objective = _PairObjective(model, data)
    cfg = train_cfg.replace(learning_rate=config.learning_rate)
    _, history = train_early_stopping(
        objective, tuple(c[fit_idx] for c in cols), tuple(c[val_idx] for c in cols), cfg
    )
    model.demean_offset = float(np.mean(model.strengths(data.reps, data.t)))
    return model, history


def estimate_beta(model: StructuralModel, data: PairwiseDataset, t: int) -> float:
    """Average strength with every argument's element forced to ``t``, minus the offset."""
    forced = np.full(data.n_args, t, dtype=np.int64)
    return float(np.mean(model.strengths(data.reps, forced)) - model.demean_offset)


@dataclass
class PersuasivenessEstimate:
    beta: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    mc_samples: int
    draws: np.ndarray = field(repr=False)

    @property
    def ci95(self) -> np.ndarray:
        return np.column_stack([self.lo, self.hi])

    def to_dict(self) -> dict:
        return {
            "mc_samples": self.mc_samples,
            "elements": [
                {"element": int(t), "point": float(b), "lo": float(l), "hi": float(h)}
                for t, (b, l, h) in enumerate(zip(self.beta, self.lo, self.hi))
            ],
        }


def mc_dropout_draws(model: StructuralModel, data: PairwiseDataset, samples: int, seed: int) -> np.ndarray:
    """``(samples, n_elements)`` matrix of per-draw demeaned element strengths.

    A draw samples fresh dropout masks for the deconfounder (one per
    argument) and for the head (one per argument/element row), then
    demeans against the same draw's strengths at the observed elements.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3CD]))
    n_args, n_el = data.n_args, model.n_elements
    elements = np.concatenate([np.repeat(np.arange(n_el), n_args), data.t])
    one_hot = _one_hot(elements, n_el)
    rows_per_draw = (n_el + 1) * n_args
    chunk = max(1, min(samples, MC_CHUNK_ROWS // rows_per_draw))
    out = np.empty((samples, n_el))
    for start in range(0, samples, chunk):
        d = min(chunk, samples - start)
        f = model.deconfounder.forward(np.tile(data.reps, (d, 1)), "mc_dropout", rng)
        f = f.reshape(d, n_args, -1)
        x = np.concatenate(
            [np.broadcast_to(one_hot, (d, *one_hot.shape)), np.tile(f, (1, n_el + 1, 1))], axis=2
        ).reshape(d * rows_per_draw, -1)
        mu = model.head.forward(x, "mc_dropout", rng).reshape(d, n_el + 1, n_args)
        out[start:start + d] = mu[:, :n_el, :].mean(axis=2) - mu[:, n_el, :].mean(axis=1, keepdims=True)
    return out


def mc_dropout_ci(model: StructuralModel, data: PairwiseDataset, samples: int = 3000, seed: int = 0) -> PersuasivenessEstimate:
    """Monte Carlo dropout point estimates (draw means) and 95% percentile intervals."""
    if samples < 1:
        raise ValidationError("need at least one Monte Carlo sample")
    if samples == 1:
        warnings.warn("a single Monte Carlo sample gives degenerate intervals", stacklevel=2)
    draws = mc_dropout_draws(model, data, samples, seed)
    lo, hi = np.percentile(draws, [2.5, 97.5], axis=0)
    return PersuasivenessEstimate(draws.mean(axis=0), lo, hi, samples, draws)
