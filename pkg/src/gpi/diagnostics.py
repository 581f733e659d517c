"""Balance check between estimated efficient scores and candidate confounders."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm

from .dml import clustered_se
from .errors import DegenerateInputError, DimensionError, ValidationError


@dataclass(frozen=True)
class BalanceReport:
    pearson_r: float
    p_value: float
    n: int
    n_clusters: int

    def to_dict(self) -> dict:
        return asdict(self)


def _standardize(x: np.ndarray, name: str) -> np.ndarray:
    sd = x.std()
    centred = x - x.mean()
    if sd == 0.0 or np.max(np.abs(centred)) <= 1e-12 * max(1.0, np.max(np.abs(x))):
        raise DegenerateInputError(f"{name} is constant")
    return centred / sd


def balance_check(scores, confounder, cluster) -> BalanceReport:
    """Pearson correlation with a cluster-robust normal test.

    The variance comes from the correlation's influence function on the
    standardized inputs, ``x y - r (x^2 + y^2) / 2``, summed within
    clusters exactly as for effect standard errors.
    """
    x = np.asarray(scores, dtype=np.float64)
    y = np.asarray(confounder, dtype=np.float64)
    cluster = np.asarray(cluster)
    if x.shape != y.shape or x.shape != cluster.shape or x.ndim != 1:
        raise DimensionError("scores, confounder and cluster must be equal-length vectors")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("balance inputs must be finite")
    xs = _standardize(x, "scores")
    ys = _standardize(y, "confounder")
    r = float(np.clip(np.mean(xs * ys), -1.0, 1.0))
    influence = xs * ys - r * (xs * xs + ys * ys) / 2.0
    se = clustered_se(influence, cluster)
    if se == 0.0:
        p = 0.0 if abs(r) > 0 else 1.0
    else:
        p = float(2.0 * norm.sf(abs(r) / se))
    return BalanceReport(r, min(1.0, p), int(x.size), int(np.unique(cluster).size))
