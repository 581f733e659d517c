"""``gpi`` command-line front end.

Every subcommand resolves its configuration as built-in defaults, then the
``--config`` JSON file, then explicit flags, and writes deterministic
result files. Failures print ``{"stage", "message"}`` JSON on stderr and
exit with 2 (bad input) or 3 (numerical failure).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import platform
import sys
import warnings
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .data import assemble_dataset, load_reps, load_table, make_folds, save_reps
from .diagnostics import balance_check
from .dml import aggregate_splits, contrast, estimate_apo, estimate_att
from .errors import ConfigError, GPIError, ValidationError
from .nn import TrainConfig
from .nuisance import JointConfig, PropensityConfig, SearchSpace, cross_fit, split_seeds
from .simulate import DgpSpec, generate
from .structural import PairwiseDataset, fit_structural, mc_dropout_ci

_MODEL_KEYS = {"joint": {}, "search": {}, "train": {}, "propensity": {}}
_NUISANCE = {
    "folds": 2,
    "repeats": 1,
    "trials": None,
    "alpha": 0.01,
    "deconfounder_out_dim": 64,
    "seed": 0,
    "threads": None,
    **_MODEL_KEYS,
}
DEFAULTS = {
    "simulate": {"dgp": None, "n": 4000, "seed": 0, "out": None, "dgp_params": {}},
    "estimate-att": {"data": None, "reps": None, "out": None, "confounders": [], **_NUISANCE},
    "estimate-dose": {"data": None, "reps": None, "out": None, "bins": 10, "from_raw": False, **_NUISANCE},
    "fit-structural": {
        "args": None,
        "comparisons": None,
        "reps": [],
        "out": None,
        "mc_samples": 3000,
        "n_elements": 14,
        "symmetric_thresholds": True,
        "seed": 0,
        "deconfounder_out_dim": 64,
        "joint": {},
        "train": {},
    },
    "balance": {"scores": [], "data": None, "confounders": [], "out": None},
}
# keys that never change results and are left out of the config hash
_UNHASHED = ("out", "threads")
_PATH_KEYS = ("data", "reps", "args", "comparisons", "scores")


# ---------------------------------------------------------------- plumbing


def _available_cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def _resolve(command: str, ns: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    if ns.config is not None:
        try:
            with open(ns.config) as fh:
                loaded = json.load(fh)
        except FileNotFoundError as exc:
            raise ValidationError(f"config file not found: {ns.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    cfg.update(flags)
    _validate(command, cfg)
    return cfg


def _validate(command: str, cfg: dict) -> None:
    if cfg.get("out") is None:
        raise ConfigError("an output directory is required (--out)")
    for key in _PATH_KEYS:
        if key not in cfg:
            continue
        value = cfg[key]
        paths = value if isinstance(value, list) else [value]
        if key in ("reps", "scores") and isinstance(value, list) and not value:
            raise ConfigError(f"at least one --{key} file is required")
        for p in paths:
            if p is None:
                raise ConfigError(f"--{key} is required")
            p = p.split("=", 1)[-1] if key == "scores" else p
            if not Path(p).is_file():
                raise ValidationError(f"input file not found: {p}")
    if command == "simulate" and cfg["dgp"] not in ("A", "B", "C"):
        raise ConfigError("--dgp must be one of A, B, C")
    checks = {
        "folds": lambda v: isinstance(v, int) and v >= 2,
        "repeats": lambda v: isinstance(v, int) and v >= 1,
        "alpha": lambda v: isinstance(v, (int, float)) and 0 <= v < 0.5,
        "trials": lambda v: v is None or (isinstance(v, int) and v >= 1),
        "deconfounder_out_dim": lambda v: isinstance(v, int) and v >= 1,
        "threads": lambda v: v is None or (isinstance(v, int) and v >= 1),
        "mc_samples": lambda v: isinstance(v, int) and v >= 1,
        "bins": lambda v: isinstance(v, int) and v >= 2,
        "n": lambda v: isinstance(v, int) and v >= 100,
        "seed": lambda v: isinstance(v, int) and v >= 0,
    }
    for key, ok in checks.items():
        if key in cfg and not ok(cfg[key]):
            raise ConfigError(f"{key}={cfg[key]!r} is outside its documented range")


def _sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _provenance(command: str, cfg: dict, inputs: list[str]) -> dict:
    hashed = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    blob = json.dumps(hashed, sort_keys=True, default=str).encode()
    return {
        "command": command,
        "config": hashed,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "seed": cfg.get("seed"),
        "inputs": {Path(p).name: _sha256(p) for p in inputs},
        "versions": {
            "gpi": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "python": platform.python_version(),
        },
    }


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _build(cls, values: dict, **overrides):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {}
    for k, v in {**values, **overrides}.items():
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _nuisance_settings(cfg: dict):
    q = cfg["deconfounder_out_dim"]
    if cfg["joint"] and cfg["trials"] is None:
        space = _build(JointConfig, cfg["joint"], deconfounder_out_dim=q)
    else:
        extra = {"trials": cfg["trials"]} if cfg["trials"] is not None else {}
        space = _build(SearchSpace, cfg["search"], deconfounder_out_dim=q, **extra)
    train = _build(TrainConfig, cfg["train"], seed=cfg["seed"])
    prop = _build(PropensityConfig, cfg["propensity"])
    return space, train, prop


def _load_causal(cfg: dict, drop_t: bool = False):
    table = load_table(cfg["data"])
    if drop_t and "t" in table.columns:
        table = table.drop(columns="t")
    reps = load_reps(cfg["reps"])
    bins = cfg.get("bins")
    return table, assemble_dataset(table, reps, bins=bins)


def _cross_fits(ds, cfg: dict) -> list:
    """One cross-fit per repeated sample split."""
    space, train, prop = _nuisance_settings(cfg)
    threads = min(cfg["threads"] or _available_cores(), cfg["folds"])
    fits = []
    for s in split_seeds(cfg["seed"], cfg["repeats"]):
        folds = make_folds(ds, cfg["folds"], s)
        fits.append(cross_fit(ds, folds, space, s, train.replace(seed=s), prop, threads=threads))
    return fits


def _confounder_column(table: pd.DataFrame, name: str) -> np.ndarray:
    if name not in table.columns:
        raise ValidationError(f"missing column {name}")
    values = table[name].to_numpy(dtype=np.float64)
    if np.isnan(values).any():
        raise ValidationError(f"confounder column {name} has missing values")
    return values


def _format_table(rows: list[dict], confounders: list[str]) -> str:
    head = ["outcome", *confounders]
    lines = ["\t".join(head)]
    for row in rows:
        cells = [f"{row[c]['pearson_r']:.3f} ({row[c]['p_value']:.3f})" for c in confounders]
        lines.append("\t".join([row["outcome"], *cells]))
    return "\n".join(lines)


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: dict) -> int:
    spec = _build(DgpSpec, cfg["dgp_params"], name=cfg["dgp"], n=cfg["n"], seed=cfg["seed"])
    data, truth = generate(spec)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_reps(out / "reps.gpir", data.reps)
    if spec.name == "C":
        pd.DataFrame({"j": np.arange(data.n_args), "t": data.t, "s": data.s, "p": data.p,
                      "rep_row": np.arange(data.n_args)}).to_csv(out / "args.csv", index=False)
        pd.DataFrame({"respondent": data.respondent, "j": data.j, "j_prime": data.j_prime,
                      "y": data.y}).to_csv(out / "comparisons.csv", index=False)
    else:
        cols = {"y": data.y, "t": data.t}
        if "t_raw" in truth.arrays:
            cols["t_raw"] = truth.arrays["t_raw"]
        cols["cluster"] = data.cluster
        for i in range(data.z.shape[1]):
            cols[f"z_{i + 1}"] = data.z[:, i]
        pd.DataFrame(cols).to_csv(out / "data.csv", index=False, float_format="%.17g")
    record = {"truth": truth.to_dict(), "dgp": asdict(spec), "token": spec.token}
    _dump(out / "truth.json", record)
    return 0


def cmd_estimate_att(cfg: dict) -> int:
    table, ds = _load_causal(cfg)
    if ds.n_levels != 2:
        raise ValidationError("estimate-att needs a binary t column")
    confounders = {name: _confounder_column(table, name) for name in cfg["confounders"]}
    est = aggregate_splits([estimate_att(ds, nuis, cfg["alpha"]) for nuis in _cross_fits(ds, cfg)])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"cluster": ds.cluster, "score": est.scores}).to_csv(
        out / "scores.csv", index=False, float_format="%.17g"
    )
    result = {"estimate": est.to_dict(), "provenance": _provenance("estimate-att", cfg, [cfg["data"], cfg["reps"]])}
    _dump(out / "results.json", result)
    if confounders:
        row = {"outcome": "att"}
        for name, values in confounders.items():
            row[name] = balance_check(est.scores, values, ds.cluster).to_dict()
        _dump(out / "balance.json", {"rows": [row], "confounders": list(confounders)})
        print(_format_table([row], list(confounders)))
    return 0


def cmd_estimate_dose(cfg: dict) -> int:
    _, ds = _load_causal(cfg, drop_t=cfg["from_raw"])
    per_split = [[estimate_apo(ds, nuis, t, cfg["alpha"]) for t in range(ds.n_levels)] for nuis in _cross_fits(ds, cfg)]
    levels = range(ds.n_levels)
    apo = [aggregate_splits([split[t] for split in per_split]) for t in levels]
    contrasts = [
        aggregate_splits([contrast(split[t + 1], split[t]) for split in per_split]) for t in levels[:-1]
    ]
    result = {
        "apo": [e.to_dict() for e in apo],
        "contrasts": [e.to_dict() for e in contrasts],
        "provenance": _provenance("estimate-dose", cfg, [cfg["data"], cfg["reps"]]),
    }
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "results.json", result)
    return 0


def _load_pairwise(cfg: dict, reps_path: str) -> PairwiseDataset:
    args = load_table(cfg["args"])
    comps = load_table(cfg["comparisons"])
    for name, frame, cols in (("argument", args, ("j", "t", "s", "p", "rep_row")),
                              ("comparison", comps, ("respondent", "j", "j_prime", "y"))):
        for col in cols:
            if col not in frame.columns:
                raise ValidationError(f"{name} table missing column {col}")
        if frame[list(cols)].isna().any().any():
            raise ValidationError(f"{name} table has missing values")
    if args["j"].duplicated().any():
        raise ValidationError("argument ids in column j must be unique")
    reps = load_reps(reps_path)
    rows = args["rep_row"].to_numpy(dtype=np.int64)
    if rows.min() < 0 or rows.max() >= reps.shape[0]:
        raise ValidationError(f"rep_row indexes past the {reps.shape[0]} rows of {Path(reps_path).name}")
    index = pd.Index(args["j"])
    j = index.get_indexer(comps["j"])
    jp = index.get_indexer(comps["j_prime"])
    if (j < 0).any() or (jp < 0).any():
        raise ValidationError("comparison refers to an unknown argument")
    return PairwiseDataset(
        reps[rows], args["t"].to_numpy(), args["s"].to_numpy(), args["p"].to_numpy(),
        comps["respondent"].to_numpy(), j, jp, comps["y"].to_numpy(), n_elements=cfg["n_elements"],
    )


def cmd_fit_structural(cfg: dict) -> int:
    joint = _build(JointConfig, cfg["joint"], deconfounder_out_dim=cfg["deconfounder_out_dim"])
    train = _build(TrainConfig, cfg["train"], seed=cfg["seed"])
    per_file, notes = [], []
    for path in cfg["reps"]:
        data = _load_pairwise(cfg, path)
        model, history = fit_structural(data, joint, train, bool(cfg["symmetric_thresholds"]))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            est = mc_dropout_ci(model, data, cfg["mc_samples"], cfg["seed"])
        for w in caught:
            notes.append(str(w.message))
            print(f"warning: {w.message}", file=sys.stderr)
        per_file.append({"reps": Path(path).name, "epochs": history.epochs, **est.to_dict()})
    betas = np.array([[e["point"] for e in f["elements"]] for f in per_file])
    corr = []
    for a in range(len(betas)):
        for b in range(a + 1, len(betas)):
            r = float(np.corrcoef(betas[a], betas[b])[0, 1])
            corr.append({"a": per_file[a]["reps"], "b": per_file[b]["reps"], "pearson_r": r})
    result = {
        "files": per_file,
        "correlations": corr,
        "warnings": sorted(set(notes)),
        "provenance": _provenance("fit-structural", cfg, [cfg["args"], cfg["comparisons"], *cfg["reps"]]),
    }
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "results.json", result)
    return 0


def cmd_balance(cfg: dict) -> int:
    if not cfg["confounders"]:
        raise ConfigError("at least one --confounder column is required")
    table = load_table(cfg["data"])
    confounders = {name: _confounder_column(table, name) for name in cfg["confounders"]}
    rows, inputs = [], [cfg["data"]]
    for item in cfg["scores"]:
        label, _, path = item.rpartition("=")
        label = label or Path(path).stem
        scores = load_table(path)
        for col in ("cluster", "score"):
            if col not in scores.columns:
                raise ValidationError(f"scores file missing column {col}")
        if len(scores) != len(table):
            raise ValidationError(f"{Path(path).name} has {len(scores)} rows, data has {len(table)}")
        row = {"outcome": label}
        for name, values in confounders.items():
            row[name] = balance_check(scores["score"].to_numpy(dtype=np.float64), values,
                                      scores["cluster"].to_numpy()).to_dict()
        rows.append(row)
        inputs.append(path)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "balance.json", {"rows": rows, "confounders": list(confounders),
                                 "provenance": _provenance("balance", cfg, inputs)})
    print(_format_table(rows, list(confounders)))
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate-att": cmd_estimate_att,
    "estimate-dose": cmd_estimate_dose,
    "fit-structural": cmd_fit_structural,
    "balance": cmd_balance,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gpi {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(p, seed=True):
        p.add_argument("--config", default=None, help="JSON file of config keys; flags override it")
        p.add_argument("--out", default=S, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=S)

    def nuisance(p):
        p.add_argument("--data", default=S, help="CSV with y, t (or t_raw), cluster, z_* columns")
        p.add_argument("--reps", default=S, help="GPIR representation file")
        p.add_argument("--folds", type=int, default=S)
        p.add_argument("--repeats", type=int, default=S, help="repeated sample splits (median aggregation)")
        p.add_argument("--trials", type=int, default=S, help="random-search trials per fold")
        p.add_argument("--alpha", type=float, default=S, help="propensity truncation level")
        p.add_argument("--deconfounder-out-dim", dest="deconfounder_out_dim", type=int, default=S)
        p.add_argument("--threads", type=int, default=S)

    p = sub.add_parser("simulate", help="generate a synthetic dataset with ground truth")
    common(p)
    p.add_argument("--dgp", choices=["A", "B", "C"], default=S)
    p.add_argument("--n", type=int, default=S)

    p = sub.add_parser("estimate-att", help="ATT of a binary treatment")
    common(p)
    nuisance(p)
    p.add_argument("--confounder", dest="confounders", action="append", default=S)

    p = sub.add_parser("estimate-dose", help="average potential outcome per treatment level")
    common(p)
    nuisance(p)
    p.add_argument("--bins", type=int, default=S, help="quantile bins when discretizing t_raw")
    p.add_argument("--from-raw", dest="from_raw", action="store_true", default=S,
                   help="ignore column t and discretize t_raw")

    p = sub.add_parser("fit-structural", help="latent persuasiveness of rhetorical elements")
    common(p)
    p.add_argument("--args", default=S, help="argument table CSV: j, t, s, p, rep_row")
    p.add_argument("--comparisons", default=S, help="comparisons CSV: respondent, j, j_prime, y")
    p.add_argument("--reps", action="append", default=S, help="GPIR file (repeat for several)")
    p.add_argument("--mc-samples", dest="mc_samples", type=int, default=S)
    p.add_argument("--n-elements", dest="n_elements", type=int, default=S)
    p.add_argument("--deconfounder-out-dim", dest="deconfounder_out_dim", type=int, default=S)

    p = sub.add_parser("balance", help="correlation of efficient scores with candidate confounders")
    common(p, seed=False)
    p.add_argument("--scores", action="append", default=S, help="[label=]scores.csv (repeatable)")
    p.add_argument("--data", default=S, help="CSV holding the confounder columns")
    p.add_argument("--confounder", dest="confounders", action="append", default=S)
    return parser


def _fail(stage: str, message: str, code: int) -> int:
    print(json.dumps({"stage": stage, "message": message}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        cfg = _resolve(ns.command, ns)
        with np.errstate(over="ignore", under="ignore"):
            return COMMANDS[ns.command](cfg)
    except GPIError as exc:
        return _fail(exc.stage, str(exc), exc.exit_code)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail("io", str(exc), 2)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        return _fail("io", f"cannot parse table: {exc}", 2)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail("numeric", str(exc), 3)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
