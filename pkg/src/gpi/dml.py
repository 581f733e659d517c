"""Score-based estimators on cross-fitted nuisances, with clustered standard errors."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .data import CausalDataset
from .errors import ConfigError, EstimandUndefinedError, ValidationError
from .nuisance import NuisanceEstimates

Z_975 = 1.959964
TRUNCATION_METHOD = "clamp to [alpha, 1 - alpha], then renormalise each row"


def truncate_propensity(pi_hat: np.ndarray, alpha: float) -> np.ndarray:
    """Clamp every probability into ``[alpha, 1 - alpha]`` and renormalise rows."""
    if not 0.0 <= alpha < 0.5:
        raise ConfigError(f"truncation alpha must be in [0, 0.5), got {alpha}")
    pi = np.clip(np.asarray(pi_hat, dtype=np.float64), alpha, 1.0 - alpha)
    return pi / pi.sum(axis=1, keepdims=True)


def clustered_se(scores: np.ndarray, cluster: np.ndarray) -> float:
    """``sqrt(sum_g (sum_{i in g} s_i)^2) / n`` over centred scores."""
    scores = np.asarray(scores, dtype=np.float64)
    cluster = np.asarray(cluster)
    if scores.shape != cluster.shape:
        raise ValidationError("scores and cluster ids must have equal length")
    n = scores.size
    centred = scores - scores.mean()
    _, codes = np.unique(cluster, return_inverse=True)
    sums = np.bincount(codes, weights=centred)
    return float(np.sqrt(np.sum(sums * sums)) / n)


@dataclass
class EffectEstimate:
    estimand: str
    point: float
    se: float
    scores: np.ndarray = field(repr=False)
    cluster: np.ndarray = field(repr=False)
    truncation_level: float = 0.0
    fold_seed: int | None = None
    provenance: str = ""
    repeats: int = 1

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.point - Z_975 * self.se, self.point + Z_975 * self.se)

    @property
    def n(self) -> int:
        return int(self.scores.size)

    @property
    def n_clusters(self) -> int:
        return int(np.unique(self.cluster).size)

    def to_dict(self) -> dict:
        lo, hi = self.ci95
        return {
            "estimand": self.estimand,
            "point": self.point,
            "se": self.se,
            "ci95": [lo, hi],
            "n": self.n,
            "n_clusters": self.n_clusters,
            "truncation_level": self.truncation_level,
            "truncation_method": TRUNCATION_METHOD,
            "fold_seed": self.fold_seed,
            "repeats": self.repeats,
        }


def _provenance(ds: CausalDataset, est: NuisanceEstimates) -> str:
    digest = hashlib.sha1(ds.reps.tobytes()).hexdigest()[:12]
    return f"n={ds.n};levels={ds.n_levels};folds={est.fold_seed};reps={digest}"


def estimate_att(ds: CausalDataset, est: NuisanceEstimates, alpha: float = 0.01) -> EffectEstimate:
    """ATT from the efficient score with the treated share plugged in for P(T=1)."""
    if ds.n_levels != 2:
        raise ValidationError("ATT requires a binary treatment")
    t = ds.t.astype(np.float64)
    n_treated = t.sum()
    if n_treated == 0:
        raise EstimandUndefinedError("no treated units")
    pi = truncate_propensity(est.pi_hat, alpha)[:, 1]
    resid = ds.y - est.mu_hat[:, 0]
    core = t * resid - pi * (1.0 - t) * resid / (1.0 - pi)
    tau = float(core.sum() / n_treated)
    p_treated = n_treated / ds.n
    scores = (core - t * tau) / p_treated
    se = clustered_se(scores, ds.cluster)
    return EffectEstimate("att", tau, se, scores, ds.cluster, alpha, est.fold_seed, _provenance(ds, est))


def estimate_apo(ds: CausalDataset, est: NuisanceEstimates, level: int, alpha: float = 0.01) -> EffectEstimate:
    """Doubly robust average potential outcome at treatment ``level``."""
    if not 0 <= level < ds.n_levels or not np.any(ds.t == level):
        raise EstimandUndefinedError(f"treatment level {level} not present")
    pi = truncate_propensity(est.pi_hat, alpha)[:, level]
    mu = est.mu_hat[:, level]
    summand = mu + (ds.t == level) / pi * (ds.y - mu)
    xi = float(summand.mean())
    scores = summand - xi
    se = clustered_se(scores, ds.cluster)
    return EffectEstimate(f"apo({level})", xi, se, scores, ds.cluster, alpha, est.fold_seed, _provenance(ds, est))


def contrast(a: EffectEstimate, b: EffectEstimate) -> EffectEstimate:
    """Difference ``a - b`` of two estimates computed on the same data and folds."""
    if a.provenance != b.provenance or a.scores.shape != b.scores.shape:
        raise ValidationError("cannot contrast estimates from different datasets or fold assignments")
    scores = a.scores - b.scores
    name = f"contrast({a.estimand[4:-1]},{b.estimand[4:-1]})" if a.estimand.startswith("apo") else f"{a.estimand}-{b.estimand}"
    return EffectEstimate(
        name, a.point - b.point, clustered_se(scores, a.cluster), scores, a.cluster,
        a.truncation_level, a.fold_seed, a.provenance,
    )


def aggregate_splits(estimates: list[EffectEstimate]) -> EffectEstimate:
    """Median over repeated sample splits of the same estimand.

    The variance is the median of ``se_s^2 + (theta_s - theta)^2``, so
    disagreement between splits widens the interval. Scores are averaged
    across splits.
    """
    if not estimates:
        raise ValidationError("need at least one split")
    if len(estimates) == 1:
        return estimates[0]
    first = estimates[0]
    if any(e.estimand != first.estimand or e.scores.shape != first.scores.shape for e in estimates):
        raise ValidationError("splits disagree on the estimand or sample")
    points = np.array([e.point for e in estimates])
    ses = np.array([e.se for e in estimates])
    point = float(np.median(points))
    se = float(np.sqrt(np.median(ses**2 + (points - point) ** 2)))
    scores = np.mean([e.scores for e in estimates], axis=0)
    provenance = ";".join(e.provenance for e in estimates)
    return EffectEstimate(
        first.estimand, point, se, scores, first.cluster, first.truncation_level,
        first.fold_seed, provenance, len(estimates),
    )
