"""Synthetic data-generating processes with brute-force ground truth.

Every DGP embeds the latent confounders ``U`` (plus nuisance coordinates)
into the representation through a seeded orthogonal matrix, so ``R``
determines ``U`` exactly while ``dim(U) << dim(R)``.

* A: binary treatment, constant effect ``tau``; target is the ATT.
* B: ten-level (by default) treatment from population deciles of a
  confounded index; target is the average potential outcome per level.
* C: pairwise ordinal comparisons of arguments whose strength is an
  element effect plus a latent term; target is the centred element effect.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .data import CausalDataset
from .errors import ConfigError, ProvenanceError
from .nuisance import NuisanceEstimates
from .structural import PairwiseDataset

ORACLE_DRAWS = 1_000_000
ORACLE_SEED = 20_240_601


@dataclass(frozen=True)
class DgpSpec:
    name: str
    n: int = 4000
    d_r: int = 16
    d_u: int = 2
    noise_sd: float = 1.0
    seed: int = 0
    # A and B
    tau: float = 1.0
    a: float = 1.5
    b: float = 0.5
    cluster_size: int = 1
    cluster_sd: float = 0.0
    # B
    levels: int = 10
    c: float = 0.5
    dose_spread: float = 3.4
    # C
    n_args: int = 64
    n_elements: int = 14
    n_topics: int = 4
    effect_scale: float = 2.0
    latent_scale: float = 0.3
    thresholds: tuple[float, float] = (-0.4, 0.4)
    effects: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.name not in ("A", "B", "C"):
            raise ConfigError(f"unknown DGP {self.name!r}")
        if not 1 <= self.d_u < self.d_r:
            raise ConfigError("need 1 <= d_u < d_r")
        if self.n < 100:
            raise ConfigError("n must be at least 100")
        if self.cluster_size < 1:
            raise ConfigError("cluster_size must be >= 1")
        if self.name == "C":
            if self.effects is not None and len(self.effects) != self.n_elements:
                raise ConfigError("effects must list one value per element")
            if self.n_args < 2 * self.n_topics:
                raise ConfigError("each topic needs an argument on both sides")
        if self.name == "B" and self.levels < 2:
            raise ConfigError("DGP B needs at least two levels")

    @property
    def token(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return "simulate:" + hashlib.sha1(blob).hexdigest()[:16]


@dataclass
class Truth:
    dgp: str
    att: float | None = None
    apo: list[float] | None = None
    beta: list[float] | None = None
    mu_args: list[float] | None = None
    extra: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if v is not None and k != "arrays"}
        if not out["extra"]:
            del out["extra"]
        return out


def _streams(spec: DgpSpec):
    """Independent generators for the embedding, the argument table and the sample."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence([spec.seed, 0xD6]).spawn(3)]


def embedding(spec: DgpSpec) -> np.ndarray:
    """Seeded random orthogonal ``d_r x d_r`` matrix Q with ``R = Q [U; nu]``."""
    rng = _streams(spec)[0]
    q, r = np.linalg.qr(rng.standard_normal((spec.d_r, spec.d_r)))
    return q * np.sign(np.diag(r))


def recover_latent(spec: DgpSpec, reps: np.ndarray) -> np.ndarray:
    """Invert the embedding: the first ``d_u`` coordinates of ``Q^T R``."""
    return (reps @ embedding(spec))[:, : spec.d_u]


def _encode(spec: DgpSpec, u: np.ndarray, rng) -> np.ndarray:
    nu = rng.standard_normal((u.shape[0], spec.d_r - spec.d_u))
    return np.hstack([u, nu]) @ embedding(spec).T


def _baseline(u: np.ndarray, z1: np.ndarray) -> np.ndarray:
    second = u[:, 1] ** 2 if u.shape[1] > 1 else 0.0
    return u[:, 0] + second + z1


def dose_table(spec: DgpSpec) -> np.ndarray:
    grid = np.arange(spec.levels) / (spec.levels - 1)
    return spec.dose_spread * grid**0.8


def dose_edges(spec: DgpSpec) -> np.ndarray:
    """Population quantile edges of the index ``c U_1 + eta`` (eta standard normal)."""
    sd = np.sqrt(spec.c**2 + 1.0)
    return sd * norm.ppf(np.arange(1, spec.levels) / spec.levels)


def _clusters(spec: DgpSpec, rng):
    cluster = np.arange(spec.n) // spec.cluster_size
    effect = rng.normal(0.0, spec.cluster_sd, size=cluster.max() + 1) if spec.cluster_sd > 0 else None
    shift = effect[cluster] if effect is not None else np.zeros(spec.n)
    return cluster, shift


def _generate_a(spec: DgpSpec):
    rng = _streams(spec)[2]
    u = rng.standard_normal((spec.n, spec.d_u))
    z = rng.standard_normal((spec.n, 2))
    t = (rng.random(spec.n) < expit(spec.a * u[:, 0] + spec.b * z[:, 0])).astype(np.int64)
    cluster, shift = _clusters(spec, rng)
    y = spec.tau * t + _baseline(u, z[:, 0]) + shift + spec.noise_sd * rng.standard_normal(spec.n)
    reps = _encode(spec, u, rng)
    ds = CausalDataset(y, t, z, cluster, reps, 2, spec.token)

    mc = np.random.default_rng(ORACLE_SEED)
    u_mc = mc.standard_normal((ORACLE_DRAWS, spec.d_u))
    z_mc = mc.standard_normal(ORACLE_DRAWS)
    treated = mc.random(ORACLE_DRAWS) < expit(spec.a * u_mc[:, 0] + spec.b * z_mc)
    base = _baseline(u_mc[treated], z_mc[treated])
    att = float(np.mean((spec.tau + base) - base))
    naive_bias = float(np.mean(base) - np.mean(_baseline(u_mc[~treated], z_mc[~treated])))
    return ds, Truth("A", att=att, extra={"naive_bias": naive_bias})


def _generate_b(spec: DgpSpec):
    rng = _streams(spec)[2]
    u = rng.standard_normal((spec.n, spec.d_u))
    z = rng.standard_normal((spec.n, 2))
    t_raw = spec.c * u[:, 0] + rng.standard_normal(spec.n)
    t = np.searchsorted(dose_edges(spec), t_raw).astype(np.int64)
    cluster, shift = _clusters(spec, rng)
    m = dose_table(spec)
    y = m[t] + _baseline(u, z[:, 0]) + shift + spec.noise_sd * rng.standard_normal(spec.n)
    reps = _encode(spec, u, rng)
    ds = CausalDataset(y, t, z, cluster, reps, spec.levels, spec.token)

    mc = np.random.default_rng(ORACLE_SEED)
    u_mc = mc.standard_normal((ORACLE_DRAWS, spec.d_u))
    z_mc = mc.standard_normal(ORACLE_DRAWS)
    base = float(np.mean(_baseline(u_mc, z_mc)))
    truth = Truth("B", apo=[float(v + base) for v in m], arrays={"t_raw": t_raw})
    return ds, truth


def _pick(j_idx, topics, on_side, topic, rng) -> np.ndarray:
    """Uniform draw of an argument on one side of each requested topic."""
    cells = [j_idx[(topics == p) & on_side] for p in range(topics.max() + 1)]
    sizes = np.array([c.size for c in cells])
    table = np.full((len(cells), sizes.max()), -1)
    for p, c in enumerate(cells):
        table[p, : c.size] = c
    pos = np.floor(rng.random(topic.size) * sizes[topic]).astype(np.int64)
    return table[topic, pos]


def _generate_c(spec: DgpSpec):
    _, arg_rng, rng = _streams(spec)
    j_idx = np.arange(spec.n_args)
    elements = arg_rng.permutation(j_idx % spec.n_elements)
    topics = j_idx % spec.n_topics
    sides = (j_idx // spec.n_topics) % 2
    u = arg_rng.standard_normal((spec.n_args, spec.d_u))
    reps = _encode(spec, u, arg_rng)
    effects = (
        np.asarray(spec.effects, dtype=np.float64)
        if spec.effects is not None
        else np.linspace(-spec.effect_scale, spec.effect_scale, spec.n_elements)
    )
    strength = effects[elements] + spec.latent_scale * u[:, 0]

    topic = rng.integers(spec.n_topics, size=spec.n)
    first = _pick(j_idx, topics, sides == 0, topic, rng)
    second = _pick(j_idx, topics, sides == 1, topic, rng)
    swap = rng.random(spec.n) < 0.5
    j = np.where(swap, second, first)
    j_prime = np.where(swap, first, second)
    diff = strength[j] - strength[j_prime]
    cut0 = expit(spec.thresholds[0] + diff)
    cut1 = expit(spec.thresholds[1] + diff)
    draw = rng.random(spec.n)
    y = np.where(draw < cut0, 0, np.where(draw < cut1, 1, 2)).astype(np.int64)
    respondent = np.arange(spec.n) // 4

    data = PairwiseDataset(
        reps, elements, sides, topics, respondent, j, j_prime, y,
        n_elements=spec.n_elements, provenance=spec.token,
    )
    beta = effects - effects[elements].mean()
    truth = Truth(
        "C",
        beta=[float(b) for b in beta],
        mu_args=[float(v) for v in strength - strength.mean()],
    )
    return data, truth


def generate(spec: DgpSpec):
    """Return ``(dataset, truth)`` for the DGP named in ``spec``."""
    return {"A": _generate_a, "B": _generate_b, "C": _generate_c}[spec.name](spec)


def oracle_nuisances(spec: DgpSpec, ds: CausalDataset) -> NuisanceEstimates:
    """Exact outcome regressions and propensities of DGP A or B for ``ds``."""
    if spec.name not in ("A", "B"):
        raise ConfigError("oracle nuisances exist only for DGPs A and B")
    if ds.provenance != spec.token:
        raise ProvenanceError("dataset was not generated from this DgpSpec")
    u = recover_latent(spec, ds.reps)
    base = _baseline(u, ds.z[:, 0])
    if spec.name == "A":
        mu = np.column_stack([base, base + spec.tau])
        p1 = expit(spec.a * u[:, 0] + spec.b * ds.z[:, 0])
        pi = np.column_stack([1.0 - p1, p1])
    else:
        mu = base[:, None] + dose_table(spec)[None, :]
        edges = np.concatenate([[-np.inf], dose_edges(spec), [np.inf]])
        cdf = norm.cdf(edges[None, :] - spec.c * u[:, :1])
        pi = np.diff(cdf, axis=1)
    return NuisanceEstimates(mu, pi, u, np.zeros(ds.n, dtype=np.int64), fold_seed=spec.seed)
