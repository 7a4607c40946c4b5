"""Experiment orchestration: config files, tuning, evaluation, reports.

A run is described by a flat ``key = value`` config file (dotted keys group
sections).  The pipeline fits z-scoring on the training split only, tunes
hyperparameter grids by k-fold cross-validation on the training split
(2-fold by default; the structured-prediction learners tune C on a 75/25
split instead), refits on the full training split, evaluates once on the
held-out test split, and writes results.csv plus model artifacts.  Every
random choice derives from the config seed, so rerunning a (config, seed)
pair reproduces the report bytes exactly.

The oracle suites compare the fast inference and gradient routines against
the exhaustive references in :mod:`nnmetric.bruteforce` on randomized
instances; a violation serializes the failing instance for replay.
"""

from __future__ import annotations

import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bruteforce
from .dataset import (
    CLASS,
    REAL,
    Dataset,
    kfold,
    load_csv,
    save_csv,
    synth_sin,
    zscore_fit_apply,
)
from .gerrymander import (
    AsymmetricMetric,
    GerryTrainConfig,
    InfeasibleTargetError,
    MahalanobisMetric,
    asym_score_grads,
    feature_map_psi,
    loss_augmented_inference_core,
    metric_predictions,
    score,
    surrogate_loss,
    targeted_inference_core,
    tied_task_loss,
    train_sgd,
    zero_one_loss,
)
from .gradient_metrics import (
    KernelSpec,
    estimate_egop,
    estimate_ejop,
    estimate_gw,
    relieff_weights,
)
from .hamming import (
    HammingTrainConfig,
    hamming_predictions,
    hamming_score,
    random_hasher,
    train_hamming,
)
from .numerics import psd_project, sym_eig
from .predictors import NeighborRule, evaluate, predict_batch, transform_features
from .regression_ml import (
    RegTrainConfig,
    delta_reg,
    delta_reg_ub,
    metric_reg_predictions,
    reg_inference_core,
    train_reg_sgd,
)


class ConfigError(ValueError):
    """Config validation failure; the message names the offending field."""


METHODS = (
    "euclidean",
    "gw",
    "egop",
    "ejop",
    "relieff",
    "gerry_sym",
    "gerry_asym",
    "gerry_reg",
    "hamming",
)
_TRANSFORM_METHODS = ("euclidean", "relieff", "gw", "egop", "ejop")
_CLASSIFY_ONLY = ("ejop", "relieff", "gerry_sym", "gerry_asym", "hamming")
_REGRESS_ONLY = ("gerry_reg",)

# independent seed streams so the split, the tuning split, and the oracle
# draws never alias each other
_SPLIT_STREAM = 11
_TUNE_STREAM = 13
_ORACLE_STREAM = 17

# radius candidates for the hnn rule, as quantiles of the pairwise distances
# of the transformed training features (the grid stays scale-free this way)
_RADIUS_QUANTILES = (0.05, 0.1, 0.2, 0.35)
_RADIUS_SAMPLE = 400


def _as_choice(raw, key, options):
    if raw not in options:
        raise ConfigError(f"{key}: expected one of {', '.join(options)}, got {raw!r}")
    return raw


def _as_int(raw, key, lo=None):
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if lo is not None and value < lo:
        raise ConfigError(f"{key}: must be >= {lo}, got {value}")
    return value


def _as_float(raw, key, lo=None, strict=False):
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if not np.isfinite(value):
        raise ConfigError(f"{key}: must be finite, got {raw!r}")
    if lo is not None and (value < lo or (strict and value == lo)):
        bound = ">" if strict else ">="
        raise ConfigError(f"{key}: must be {bound} {lo}, got {value}")
    return value


def _as_bool(raw, key):
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected true or false, got {raw!r}")


def _split_list(raw, key):
    parts = [part.strip() for part in raw.split(",")]
    if not parts or any(not part for part in parts):
        raise ConfigError(f"{key}: expected a comma-separated list, got {raw!r}")
    return parts


def _as_int_list(raw, key, lo=None):
    return tuple(_as_int(part, key, lo) for part in _split_list(raw, key))


def _as_float_list(raw, key, lo=None, strict=False):
    return tuple(_as_float(part, key, lo, strict) for part in _split_list(raw, key))


def _as_methods(raw, key):
    methods = tuple(_as_choice(part, key, METHODS) for part in _split_list(raw, key))
    if len(set(methods)) != len(methods):
        raise ConfigError(f"{key}: duplicate method in {raw!r}")
    return methods


def _as_fraction(raw, key):
    value = _as_float(raw, key, lo=0.0, strict=True)
    if value >= 1.0:
        raise ConfigError(f"{key}: must be < 1, got {value}")
    return value


def _as_decay(raw, key):
    value = _as_float(raw, key, lo=0.0, strict=True)
    if value > 1.0:
        raise ConfigError(f"{key}: must be <= 1, got {value}")
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved experiment; every field holds a concrete value."""

    task: str
    methods: tuple
    rule: str = "knn"
    source: str = "synth"
    path: str | None = None
    label_column: str = "label"
    n: int | None = None
    d: int | None = None
    c1: float = 50.0
    decay: float = 0.6
    rotate: bool = False
    noise_std: float = 0.1
    test_fraction: float = 0.25
    folds: int = 2
    seed: int = 0
    out_dir: str = "runs"
    threads: int = 1
    grid_k: tuple = (3,)
    grid_h: tuple = (1.0,)
    grid_t: tuple = (0.25,)
    grid_c: tuple = (1.0,)
    grid_gamma: tuple = (1.0,)
    grid_eps: tuple = (0.0,)
    epochs: int = 20
    init: str = "auto"
    bits: int = 8
    hamming_mode: str = "asymmetric"
    temperature: float = 1.0
    hstar: str = "upper_bound"

    @staticmethod
    def from_mapping(mapping) -> "ExperimentConfig":
        kwargs = {}
        for key, raw in mapping.items():
            if key not in _SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            attr, parse = _SCHEMA[key]
            kwargs[attr] = parse(raw, key)
        for key in _REQUIRED_KEYS:
            attr, _ = _SCHEMA[key]
            if attr not in kwargs:
                raise ConfigError(f"{key}: required")
        config = ExperimentConfig(**kwargs)
        _check_config(config, set(mapping))
        return config

    @staticmethod
    def from_file(path) -> "ExperimentConfig":
        return ExperimentConfig.from_mapping(parse_config_file(path))


_SCHEMA = {
    "task": ("task", lambda r, k: _as_choice(r, k, ("classify", "regress"))),
    "method": ("methods", _as_methods),
    "predict.rule": ("rule", lambda r, k: _as_choice(r, k, ("knn", "hnn"))),
    "data.source": ("source", lambda r, k: _as_choice(r, k, ("synth", "csv"))),
    "data.path": ("path", lambda r, k: r),
    "data.label_column": ("label_column", lambda r, k: r),
    "data.n": ("n", lambda r, k: _as_int(r, k, lo=4)),
    "data.d": ("d", lambda r, k: _as_int(r, k, lo=1)),
    "data.c1": ("c1", lambda r, k: _as_float(r, k, lo=0.0, strict=True)),
    "data.decay": ("decay", _as_decay),
    "data.rotate": ("rotate", _as_bool),
    "data.noise_std": ("noise_std", lambda r, k: _as_float(r, k, lo=0.0)),
    "data.test_fraction": ("test_fraction", _as_fraction),
    "cv.folds": ("folds", lambda r, k: _as_int(r, k, lo=2)),
    "seed": ("seed", lambda r, k: _as_int(r, k, lo=0)),
    "out.dir": ("out_dir", lambda r, k: r),
    "threads": ("threads", lambda r, k: _as_int(r, k, lo=1)),
    "grid.k": ("grid_k", lambda r, k: _as_int_list(r, k, lo=1)),
    "grid.h": ("grid_h", lambda r, k: _as_float_list(r, k, lo=0.0, strict=True)),
    "grid.t": ("grid_t", lambda r, k: _as_float_list(r, k, lo=0.0, strict=True)),
    "grid.c": ("grid_c", lambda r, k: _as_float_list(r, k, lo=0.0, strict=True)),
    "grid.gamma": ("grid_gamma", lambda r, k: _as_float_list(r, k, lo=0.0, strict=True)),
    "grid.eps": ("grid_eps", lambda r, k: _as_float_list(r, k, lo=0.0)),
    "train.epochs": ("epochs", lambda r, k: _as_int(r, k, lo=0)),
    "train.init": ("init", lambda r, k: _as_choice(r, k, ("auto", "zeros", "relieff"))),
    "hamming.bits": ("bits", lambda r, k: _as_int(r, k, lo=1)),
    "hamming.mode": (
        "hamming_mode",
        lambda r, k: _as_choice(r, k, ("symmetric", "asymmetric")),
    ),
    "ejop.temperature": ("temperature", lambda r, k: _as_float(r, k, lo=0.0, strict=True)),
    "reg.hstar": (
        "hstar",
        lambda r, k: _as_choice(r, k, ("upper_bound", "eps_insensitive", "min_loss")),
    ),
}
_REQUIRED_KEYS = ("task", "method", "data.source")
_SYNTH_KEYS = ("data.n", "data.d", "data.c1", "data.decay", "data.rotate", "data.noise_std")
_CSV_KEYS = ("data.path", "data.label_column")


def _check_config(config: ExperimentConfig, given: set) -> None:
    if config.source == "csv":
        if config.path is None:
            raise ConfigError("data.path: required when data.source = csv")
        for key in _SYNTH_KEYS:
            if key in given:
                raise ConfigError(f"{key}: only valid when data.source = synth")
    else:
        for key in _CSV_KEYS:
            if key in given:
                raise ConfigError(f"{key}: only valid when data.source = csv")
        if config.n is None:
            raise ConfigError("data.n: required when data.source = synth")
        if config.d is None:
            raise ConfigError("data.d: required when data.source = synth")
        if config.task != "regress":
            raise ConfigError(
                "task: data.source = synth generates real targets; use task = regress"
            )
    for method in config.methods:
        if method in _CLASSIFY_ONLY and config.task != "classify":
            raise ConfigError(f"method: {method} requires task = classify")
        if method in _REGRESS_ONLY and config.task != "regress":
            raise ConfigError(f"method: {method} requires task = regress")
    if config.init == "relieff" and config.task != "classify":
        raise ConfigError("train.init: relieff requires task = classify")


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; # comments and blank lines are skipped."""
    mapping = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"line {line_no}: expected key = value, got {stripped!r}")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {line_no}: empty key")
        if key in mapping:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        mapping[key] = value
    return mapping


def parse_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def config_json(config: ExperimentConfig) -> str:
    """The resolved config (defaults filled in) as deterministic JSON."""
    obj = {
        "task": config.task,
        "method": list(config.methods),
        "predict.rule": config.rule,
        "data.source": config.source,
        "data.test_fraction": config.test_fraction,
        "cv.folds": config.folds,
        "seed": config.seed,
        "out.dir": config.out_dir,
        "threads": config.threads,
        "grid.k": list(config.grid_k),
        "grid.h": list(config.grid_h),
        "grid.t": list(config.grid_t),
        "grid.c": list(config.grid_c),
        "grid.gamma": list(config.grid_gamma),
        "grid.eps": list(config.grid_eps),
        "train.epochs": config.epochs,
        "train.init": config.init,
        "hamming.bits": config.bits,
        "hamming.mode": config.hamming_mode,
        "ejop.temperature": config.temperature,
        "reg.hstar": config.hstar,
    }
    if config.source == "csv":
        obj["data.path"] = config.path
        obj["data.label_column"] = config.label_column
    else:
        obj.update(
            {
                "data.n": config.n,
                "data.d": config.d,
                "data.c1": config.c1,
                "data.decay": config.decay,
                "data.rotate": config.rotate,
                "data.noise_std": config.noise_std,
            }
        )
    return _json_text(obj)


def split_indices(n: int, test_fraction: float, seed: int):
    """Seeded train/test split; both index arrays come back in row order."""
    rng = np.random.default_rng([_SPLIT_STREAM, seed])
    perm = rng.permutation(n)
    n_test = min(max(int(round(n * test_fraction)), 1), n - 2)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def load_experiment_data(config: ExperimentConfig):
    """Load or generate the dataset and split it into (train, test)."""
    if config.source == "csv":
        kind = CLASS if config.task == "classify" else REAL
        ds = load_csv(config.path, config.label_column, kind)
    else:
        ds = synth_sin(
            config.n,
            config.d,
            c1=config.c1,
            decay=config.decay,
            rotate=config.rotate,
            noise_std=config.noise_std,
            seed=config.seed,
        )
    if ds.n < 4:
        raise ConfigError(f"data: need at least 4 rows to split, got {ds.n}")
    train_idx, test_idx = split_indices(ds.n, config.test_fraction, config.seed)
    return ds.subset(train_idx, name="train"), ds.subset(test_idx, name="test")


@dataclass
class FittedModel:
    """A tuned method: chosen params, a query scorer, and saveable arrays."""

    method: str
    params: dict
    predictor: object
    artifacts: dict
    meta: dict = field(default_factory=dict)

    def predict(self, queries):
        return self.predictor(queries)


def _objective(predictions, truth, task: str) -> float:
    if task == "classify":
        return float(np.mean(np.asarray(predictions) != np.asarray(truth)))
    diff = np.asarray(predictions, dtype=float) - np.asarray(truth, dtype=float)
    return float(np.mean(diff**2))


_CV_METRIC = {"classify": "error", "regress": "mse"}


def _eval_combos(combos, eval_one, threads: int):
    if threads > 1 and len(combos) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(eval_one, combos))
    return [eval_one(params) for params in combos]


def _pick_best(combos, fold_values):
    means = [float(np.mean(values)) for values in fold_values]
    best = min(range(len(combos)), key=lambda i: (means[i], i))
    return combos[best]


def _append_grid_rows(rows, method, combos, fold_values, metric):
    for params, values in zip(combos, fold_values):
        for fold, value in enumerate(values):
            rows.append((method, fold, dict(params), metric, float(value)))


def _radius_from_quantile(feats: np.ndarray, q: float) -> float:
    n = feats.shape[0]
    if n > _RADIUS_SAMPLE:
        feats = feats[:: -(-n // _RADIUS_SAMPLE)]
    sq_norms = np.sum(feats**2, axis=1)
    sq = np.maximum(sq_norms[:, None] - 2.0 * feats @ feats.T + sq_norms[None, :], 0.0)
    upper = np.sqrt(sq[np.triu_indices(feats.shape[0], k=1)])
    radius = float(np.quantile(upper, q))
    if radius > 0:
        return radius
    top = float(upper.max())
    return top if top > 0 else 1.0


def _make_rule(config: ExperimentConfig, params: dict, transformed_feats):
    """The neighbor rule for one grid point; hnn resolves its radius here."""
    if config.rule == "knn":
        return NeighborRule("knn", k=int(params["k"])), {}
    radius = _radius_from_quantile(transformed_feats, float(params["q"]))
    return NeighborRule("hnn", radius=radius), {"radius": radius}


def _indicator_dataset(ds: Dataset) -> Dataset:
    """Two-class data as a real regression surface on class-1 membership."""
    if ds.kind == REAL:
        return ds
    if int(ds.labels.max()) != 2:
        raise ValueError("gw/egop on classification needs exactly two classes")
    return Dataset(
        features=ds.features,
        labels=(np.asarray(ds.labels, dtype=int) == 1).astype(float),
        kind=REAL,
        name=ds.name,
    )


def _relieff_weights_for(ds: Dataset, seed: int) -> np.ndarray:
    counts = np.bincount(np.asarray(ds.labels, dtype=int))[1:]
    k_hits = max(1, min(5, int(counts.min()) - 1))
    return relieff_weights(ds, k_hits=k_hits, seed=seed)


def _fit_transform(method: str, ds: Dataset, params: dict, config: ExperimentConfig):
    """Returns (transform matrix or None, raw estimate to save or None)."""
    if method == "euclidean":
        return None, None
    if method == "relieff":
        weights = _relieff_weights_for(ds, config.seed)
        return np.diag(np.sqrt(weights)), weights[None, :]
    spec = KernelSpec(bandwidth=float(params["h"]))
    t = float(params["t"])
    if method == "gw":
        weights = estimate_gw(_indicator_dataset(ds), spec, t)
        return np.diag(np.sqrt(weights)), weights[None, :]
    if method == "egop":
        est = estimate_egop(_indicator_dataset(ds), spec, t)
    else:
        est = estimate_ejop(ds, spec, t, temperature=config.temperature)
    return est.transform(), est.g


def _fit_transform_method(method, train, config, rows) -> FittedModel:
    rule_axis = (
        [{"k": k} for k in config.grid_k]
        if config.rule == "knn"
        else [{"q": q} for q in _RADIUS_QUANTILES]
    )
    if method in ("euclidean", "relieff"):
        combos = [dict(r) for r in rule_axis]
    else:
        combos = [
            {"h": h, "t": t, **r}
            for h in config.grid_h
            for t in config.grid_t
            for r in rule_axis
        ]
    folds = kfold(train.n, config.folds, config.seed)

    def eval_one(params):
        values = []
        for f in range(folds.n_folds):
            fit = train.subset(np.flatnonzero(folds.assignment != f))
            val = train.subset(folds.fold_indices(f))
            transform, _ = _fit_transform(method, fit, params, config)
            rule, _ = _make_rule(config, params, transform_features(fit.features, transform))
            preds = predict_batch(fit, transform, val.features, rule, config.task)
            values.append(_objective(preds, val.labels, config.task))
        return values

    fold_values = _eval_combos(combos, eval_one, config.threads)
    _append_grid_rows(rows, method, combos, fold_values, _CV_METRIC[config.task])
    best = _pick_best(combos, fold_values)

    transform, estimate = _fit_transform(method, train, best, config)
    rule, extra = _make_rule(config, best, transform_features(train.features, transform))
    chosen = {**best, **extra}
    artifacts = {"transform": transform if transform is not None else np.eye(train.d)}
    meta = {}
    if estimate is not None:
        artifacts["estimate"] = estimate
        meta["estimate"] = {
            "kind": method,
            "h": float(best["h"]) if "h" in best else None,
            "t": float(best["t"]) if "t" in best else None,
            "temperature": config.temperature if method == "ejop" else None,
            "n": train.n,
            "seed": config.seed,
        }

    def predictor(queries):
        return predict_batch(train, transform, queries, rule, config.task)

    return FittedModel(method, chosen, predictor, artifacts, meta)


def _tune_split(train: Dataset, config: ExperimentConfig):
    """75/25 split of the training rows for tuning C and friends."""
    rng = np.random.default_rng([_TUNE_STREAM, config.seed])
    perm = rng.permutation(train.n)
    n_val = min(max(int(round(train.n * 0.25)), 1), train.n - 2)
    fit = train.subset(np.sort(perm[n_val:]), name="tune_fit")
    val = train.subset(np.sort(perm[:n_val]), name="tune_val")
    return fit, val


def _init_candidates(config: ExperimentConfig, fit: Dataset):
    if config.init != "auto":
        return [config.init]
    if fit.kind == CLASS:
        counts = np.bincount(np.asarray(fit.labels, dtype=int))[1:]
        if counts.size and counts.min() >= 2:
            return ["zeros", "relieff"]
    return ["zeros"]


def _gerry_train_config(config, k, c, init, init_weights) -> GerryTrainConfig:
    if init == "relieff":
        return GerryTrainConfig(
            k=k,
            c=c,
            epochs=config.epochs,
            seed=config.seed,
            init="diag",
            init_weights=init_weights,
        )
    return GerryTrainConfig(k=k, c=c, epochs=config.epochs, seed=config.seed, init="zeros")


def _fit_gerry(method, train, config, rows) -> FittedModel:
    variant = "symmetric" if method == "gerry_sym" else "asymmetric"
    fit, val = _tune_split(train, config)
    inits = _init_candidates(config, fit)
    fit_weights = _relieff_weights_for(fit, config.seed) if "relieff" in inits else None
    combos = [
        {"k": k, "c": c, "init": init}
        for k in config.grid_k
        for c in config.grid_c
        for init in inits
    ]

    def eval_one(params):
        gcfg = _gerry_train_config(config, params["k"], params["c"], params["init"], fit_weights)
        result = train_sgd(fit, gcfg, variant=variant)
        preds = metric_predictions(result.metric, fit, val.features, params["k"])
        return [_objective(preds, val.labels, "classify")]

    fold_values = _eval_combos(combos, eval_one, config.threads)
    _append_grid_rows(rows, method, combos, fold_values, "error")
    best = _pick_best(combos, fold_values)

    weights = _relieff_weights_for(train, config.seed) if best["init"] == "relieff" else None
    gcfg = _gerry_train_config(config, best["k"], best["c"], best["init"], weights)
    metric = train_sgd(train, gcfg, variant=variant).metric
    if variant == "symmetric":
        artifacts = {"w": metric.w}
    else:
        artifacts = {"u": metric.u, "v": metric.v}

    def predictor(queries):
        return metric_predictions(metric, train, queries, best["k"])

    return FittedModel(method, best, predictor, artifacts, {"variant": variant})


def _fit_gerry_reg(train, config, rows) -> FittedModel:
    fit, val = _tune_split(train, config)
    eps_axis = config.grid_eps if config.hstar == "eps_insensitive" else (0.0,)
    combos = [
        {"k": k, "gamma": g, "c": c, "eps": e}
        for k in config.grid_k
        for g in config.grid_gamma
        for c in config.grid_c
        for e in eps_axis
    ]

    def eval_one(params):
        rcfg = RegTrainConfig(
            k=params["k"],
            gamma=params["gamma"],
            c=params["c"],
            epochs=config.epochs,
            seed=config.seed,
            hstar=config.hstar,
            eps=params["eps"],
        )
        result = train_reg_sgd(fit, rcfg, mode="symmetric")
        preds = metric_reg_predictions(result.metric, fit, val.features, params["k"])
        return [_objective(preds, val.labels, "regress")]

    fold_values = _eval_combos(combos, eval_one, config.threads)
    _append_grid_rows(rows, "gerry_reg", combos, fold_values, "mse")
    best = _pick_best(combos, fold_values)

    rcfg = RegTrainConfig(
        k=best["k"],
        gamma=best["gamma"],
        c=best["c"],
        epochs=config.epochs,
        seed=config.seed,
        hstar=config.hstar,
        eps=best["eps"],
    )
    metric = train_reg_sgd(train, rcfg, mode="symmetric").metric

    def predictor(queries):
        return metric_reg_predictions(metric, train, queries, best["k"])

    return FittedModel(
        "gerry_reg", best, predictor, {"w": metric.w}, {"hstar": config.hstar}
    )


def _fit_hamming(train, config, rows) -> FittedModel:
    folds = kfold(train.n, config.folds, config.seed)
    combos = [{"k": k} for k in config.grid_k]

    def eval_one(params):
        values = []
        for f in range(folds.n_folds):
            fit = train.subset(np.flatnonzero(folds.assignment != f))
            val = train.subset(folds.fold_indices(f))
            hcfg = HammingTrainConfig(
                c=config.bits, k=params["k"], epochs=config.epochs, seed=config.seed
            )
            result = train_hamming(fit, hcfg, mode=config.hamming_mode)
            preds = hamming_predictions(result.hasher, fit, val.features, params["k"])
            values.append(_objective(preds, val.labels, "classify"))
        return values

    fold_values = _eval_combos(combos, eval_one, config.threads)
    _append_grid_rows(rows, "hamming", combos, fold_values, "error")
    best = _pick_best(combos, fold_values)

    hcfg = HammingTrainConfig(
        c=config.bits, k=best["k"], epochs=config.epochs, seed=config.seed
    )
    hasher = train_hamming(train, hcfg, mode=config.hamming_mode).hasher
    chosen = {**best, "bits": config.bits}

    def predictor(queries):
        return hamming_predictions(hasher, train, queries, best["k"])

    return FittedModel(
        "hamming",
        chosen,
        predictor,
        {"u": hasher.u, "v": hasher.v},
        {"mode": config.hamming_mode},
    )


def _fit_method(method, train, config, rows) -> FittedModel:
    if method in _TRANSFORM_METHODS:
        return _fit_transform_method(method, train, config, rows)
    if method in ("gerry_sym", "gerry_asym"):
        return _fit_gerry(method, train, config, rows)
    if method == "gerry_reg":
        return _fit_gerry_reg(train, config, rows)
    return _fit_hamming(train, config, rows)


@dataclass
class RunResult:
    reports: dict
    models: dict
    stats: object
    out_dir: Path


def run_experiment(config: ExperimentConfig) -> RunResult:
    """The full pipeline for every configured method, plus report files."""
    train_raw, test_raw = load_experiment_data(config)
    if train_raw.n < config.folds:
        raise ConfigError(
            f"cv.folds: {config.folds} folds need at least that many training rows"
        )
    stats, (train, test) = zscore_fit_apply(train_raw, [test_raw])
    rows = []
    models = {}
    reports = {}
    for method in config.methods:
        model = _fit_method(method, train, config, rows)
        preds = model.predict(test.features)
        report = evaluate(
            preds, test.labels, config.task, seed=config.seed, hyperparams=model.params
        )
        rows.append((method, -1, dict(model.params), report.metric_name, report.value))
        models[method] = model
        reports[method] = report
    out_dir = Path(config.out_dir)
    _write_outputs(out_dir, config, rows, models, reports, stats)
    return RunResult(reports=reports, models=models, stats=stats, out_dir=out_dir)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {key: _jsonable(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(value) for value in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _json_text(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def save_matrix_csv(path, matrix) -> None:
    """Headerless CSV of repr floats; round-trips through np.loadtxt."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for row in matrix:
            fh.write(",".join(repr(float(value)) for value in row) + "\n")


def _write_outputs(out_dir, config, rows, models, reports, stats) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "results.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "fold", "params_json", "metric", "value", "seed"])
        for method, fold, params, metric, value in rows:
            writer.writerow(
                [
                    method,
                    fold,
                    json.dumps(_jsonable(params), sort_keys=True),
                    metric,
                    repr(float(value)),
                    config.seed,
                ]
            )
    (out_dir / "resolved_config.json").write_text(config_json(config), encoding="utf-8")
    models_dir = out_dir / "models"
    models_dir.mkdir(exist_ok=True)
    norm = {"mean": list(stats.mean), "std": list(stats.std)}
    (models_dir / "norm_stats.json").write_text(_json_text(norm), encoding="utf-8")
    for method, model in models.items():
        mdir = models_dir / method
        mdir.mkdir(exist_ok=True)
        files = {}
        for stem, matrix in model.artifacts.items():
            save_matrix_csv(mdir / f"{stem}.csv", matrix)
            files[stem] = f"{stem}.csv"
        info = {
            "method": method,
            "task": config.task,
            "seed": config.seed,
            "params": model.params,
            "files": files,
            "metric": reports[method].metric_name,
            "value": reports[method].value,
            **model.meta,
        }
        (mdir / "model.json").write_text(_json_text(info), encoding="utf-8")


def cmd_run(config_path, seed=None, out=None, threads=None) -> int:
    """Exit 0 on success, 1 on a runtime failure, 2 on a config problem."""
    try:
        mapping = parse_config_file(config_path)
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if seed is not None:
        mapping["seed"] = str(seed)
    if out is not None:
        mapping["out.dir"] = str(out)
    if threads is not None:
        mapping["threads"] = str(threads)
    try:
        config = ExperimentConfig.from_mapping(mapping)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        result = run_experiment(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # CLI boundary: report instead of crashing
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    for method in config.methods:
        report = result.reports[method]
        print(f"{method}: {report.metric_name} = {repr(report.value)} (n_test = {report.n_test})")
    print(f"report: {result.out_dir / 'results.csv'}")
    return 0


def cmd_synth(
    out_path,
    n: int = 200,
    d: int = 5,
    c1: float = 50.0,
    decay: float = 0.6,
    rotate: bool = False,
    noise_std: float = 0.1,
    seed: int = 0,
) -> int:
    """Write a synthetic regression CSV that reloads bit-for-bit."""
    try:
        ds = synth_sin(n, d, c1=c1, decay=decay, rotate=rotate, noise_std=noise_std, seed=seed)
    except ValueError as exc:
        print(f"synth error: {exc}", file=sys.stderr)
        return 2
    try:
        save_csv(out_path, ds)
    except OSError as exc:
        print(f"cannot write {out_path}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out_path}: {ds.n} rows, {ds.d} feature columns")
    return 0


def _random_vote_instance(rng, n_max=12):
    """A random metric, query, and labeled pool for the inference oracles."""
    n = int(rng.integers(5, n_max + 1))
    d = int(rng.integers(2, 5))
    n_classes = int(rng.integers(2, 5))
    labels = np.concatenate(
        [np.arange(1, n_classes + 1), rng.integers(1, n_classes + 1, size=n - n_classes)]
    )
    labels = labels[rng.permutation(n)].astype(int)
    feats = rng.normal(size=(n, d))
    ell = rng.normal(size=(d, d))
    metric = MahalanobisMetric(w=ell.T @ ell)
    x = rng.normal(size=d)
    k = int(rng.integers(1, min(5, n - 1) + 1))
    return feats, labels, metric, x, k, n_classes


def _suite_inference(budget, rng):
    for i in range(budget):
        feats, labels, metric, x, k, n_classes = _random_vote_instance(rng)
        dists = metric.distances(x, feats)
        y = int(rng.integers(1, n_classes + 1))
        tau = int(rng.integers(0, 2))
        try:
            h = targeted_inference_core(dists, labels, y, k, tau)
            got = -float(dists[h].sum())
        except InfeasibleTargetError:
            got = None
        expected = bruteforce.brute_targeted(dists, labels, y, k, tau)
        want = None if expected is None else float(expected[1])
        bad = (got is None) != (want is None) or (
            got is not None and abs(got - want) > 1e-9
        )
        if bad:
            return i + 1, {
                "check": "targeted",
                "dists": dists,
                "labels": labels,
                "target": y,
                "k": k,
                "tau": tau,
                "got": got,
                "want": want,
            }
        lam = zero_one_loss(n_classes)
        _, value = loss_augmented_inference_core(dists, labels, y, k, lam)
        expected = bruteforce.brute_loss_augmented(dists, labels, y, k, lam)
        if expected is None or abs(value - float(expected[1])) > 1e-9:
            return i + 1, {
                "check": "loss_augmented",
                "dists": dists,
                "labels": labels,
                "y": y,
                "k": k,
                "got": value,
                "want": None if expected is None else expected[1],
            }
    return budget, None


def _suite_surrogate(budget, rng):
    for i in range(budget):
        feats, labels, metric, x, k, n_classes = _random_vote_instance(rng, n_max=16)
        train = Dataset(features=feats, labels=labels, kind=CLASS)
        lam = zero_one_loss(n_classes)
        y = int(rng.integers(1, n_classes + 1))
        try:
            value = surrogate_loss(metric, x, y, k, lam, train)
        except InfeasibleTargetError:
            continue  # no h* for this draw; the trainer skips these too
        dists = metric.distances(x, feats)
        top_k = np.argsort(dists, kind="stable")[:k]
        bound = tied_task_loss(y, top_k, labels, lam)
        if value < -1e-9 or value < bound - 1e-9:
            return i + 1, {
                "check": "surrogate",
                "dists": dists,
                "labels": labels,
                "y": y,
                "k": k,
                "surrogate": value,
                "task_loss": bound,
            }
    return budget, None


def _suite_regbound(budget, rng):
    for i in range(budget):
        n = int(rng.integers(4, 13))
        k = int(rng.integers(1, min(5, n) + 1))
        targets = rng.normal(size=n)
        y = float(rng.normal())
        h = rng.choice(n, size=k, replace=False)
        if delta_reg_ub(y, h, targets) < delta_reg(y, h, targets) - 1e-12:
            return i + 1, {
                "check": "loss_bound",
                "targets": targets,
                "y": y,
                "h": h,
                "relaxed": delta_reg_ub(y, h, targets),
                "exact": delta_reg(y, h, targets),
            }
        dists = rng.uniform(size=n)
        gamma = float(rng.uniform(0.1, 3.0))
        direction = "targeted" if rng.integers(0, 2) else "loss_augmented"
        h_core = reg_inference_core(dists, targets, y, k, gamma, direction)
        sign = -1.0 if direction == "targeted" else 1.0
        got = -float(dists[h_core].sum()) + sign * gamma * delta_reg_ub(y, h_core, targets)
        _, want = bruteforce.brute_reg_inference(dists, targets, y, k, gamma, direction)
        if abs(got - want) > 1e-9:
            return i + 1, {
                "check": "reg_inference",
                "dists": dists,
                "targets": targets,
                "y": y,
                "k": k,
                "gamma": gamma,
                "direction": direction,
                "got": got,
                "want": want,
            }
    return budget, None


def _suite_psd(budget, rng):
    checked = 0
    for _ in range(budget):
        d = int(rng.integers(2, 7))
        raw = rng.normal(size=(d, d))
        sym = (raw + raw.T) / 2.0
        projected = psd_project(sym)
        low = float(sym_eig(projected).values[-1])
        if low < -1e-9:
            return checked + 1, {"check": "projection", "matrix": sym, "min_eig": low}
        checked += 1
    # one short training run per invocation, auditing after every update
    n_per = 20
    centers = np.array([[1.5, 0.0, 0.0], [-1.5, 0.0, 0.0]])
    feats = np.vstack(
        [rng.normal(size=(n_per, 3)) * 0.6 + centers[0], rng.normal(size=(n_per, 3)) * 0.6 + centers[1]]
    )
    labels = np.repeat([1, 2], n_per)
    train = Dataset(features=feats, labels=labels, kind=CLASS)
    gcfg = GerryTrainConfig(k=3, c=1.0, epochs=3, seed=int(rng.integers(0, 2**31)))
    result = train_sgd(train, gcfg, variant="symmetric", audit_psd=True)
    low = min(result.psd_audit)
    if low < -1e-9:
        return checked + 1, {"check": "training_audit", "min_eig": low}
    return checked + 1, None


def _suite_gradients(budget, rng):
    eps = 1e-6
    for i in range(budget):
        n = int(rng.integers(4, 10))
        d = int(rng.integers(2, 5))
        feats = rng.normal(size=(n, d))
        train = Dataset(features=feats, labels=rng.normal(size=n), kind=REAL)
        x = rng.normal(size=d)
        k = int(rng.integers(1, min(4, n) + 1))
        h = rng.choice(n, size=k, replace=False)
        raw = rng.normal(size=(d, d))
        w = raw.T @ raw
        psi = feature_map_psi(x, h, train)
        direction = rng.normal(size=(d, d))
        direction = (direction + direction.T) / 2.0
        up = score(MahalanobisMetric(w=w + eps * direction), x, h, train)
        down = score(MahalanobisMetric(w=w - eps * direction), x, h, train)
        fd = (up - down) / (2.0 * eps)
        got = float(np.sum(direction * psi))
        if abs(got - fd) > 1e-6 * max(1.0, abs(fd)):
            return i + 1, {
                "check": "psi",
                "x": x,
                "h": h,
                "features": feats,
                "got": got,
                "fd": fd,
            }
        c = int(rng.integers(2, 5))
        u = rng.normal(size=(c, d))
        v = rng.normal(size=(c, d))
        grad_u, grad_v = asym_score_grads(u, v, x, h, train)
        for name, grad, bump in (("u", grad_u, True), ("v", grad_v, False)):
            direction = rng.normal(size=(c, d))
            if bump:
                up_m = AsymmetricMetric(u=u + eps * direction, v=v)
                down_m = AsymmetricMetric(u=u - eps * direction, v=v)
            else:
                up_m = AsymmetricMetric(u=u, v=v + eps * direction)
                down_m = AsymmetricMetric(u=u, v=v - eps * direction)
            fd = (score(up_m, x, h, train) - score(down_m, x, h, train)) / (2.0 * eps)
            got = float(np.sum(direction * grad))
            if abs(got - fd) > 1e-5 * max(1.0, abs(fd)):
                return i + 1, {
                    "check": f"asym_{name}",
                    "x": x,
                    "h": h,
                    "features": feats,
                    "got": got,
                    "fd": fd,
                }
    return budget, None


def _suite_hamming(budget, rng):
    for i in range(budget):
        d = int(rng.integers(2, 6))
        c = int(rng.integers(2, 10))
        n = int(rng.integers(4, 12))
        hasher = random_hasher(d, c, seed=int(rng.integers(0, 2**31)))
        feats = rng.normal(size=(n, d))
        labels = np.concatenate([[1, 2], rng.integers(1, 3, size=n - 2)])
        labels = labels[rng.permutation(n)].astype(int)
        train = Dataset(features=feats, labels=labels, kind=CLASS)
        x = rng.normal(size=d)
        k = int(rng.integers(1, min(4, n) + 1))
        h = rng.choice(n, size=k, replace=False)
        got = hamming_score(hasher, x, h, train)
        dists = hasher.distances(x, feats)
        want = float(np.sum(c - 2.0 * dists[h]))
        if abs(got - want) > 1e-9:
            return i + 1, {
                "check": "score_identity",
                "x": x,
                "h": h,
                "got": got,
                "want": want,
            }
        y = int(rng.integers(1, 3))
        lam = zero_one_loss(2)
        _, value = loss_augmented_inference_core(dists, labels, y, k, lam)
        expected = bruteforce.brute_loss_augmented(dists, labels, y, k, lam)
        if expected is None or abs(value - float(expected[1])) > 1e-9:
            return i + 1, {
                "check": "hamming_inference",
                "dists": dists,
                "labels": labels,
                "y": y,
                "k": k,
                "got": value,
                "want": None if expected is None else expected[1],
            }
    return budget, None


# suite name -> (seed stream, implementation)
ORACLE_SUITES = {
    "inference": (1, _suite_inference),
    "surrogate": (2, _suite_surrogate),
    "regbound": (3, _suite_regbound),
    "psd": (4, _suite_psd),
    "gradients": (5, _suite_gradients),
    "hamming": (6, _suite_hamming),
}


@dataclass(frozen=True)
class OracleOutcome:
    suite: str
    checked: int
    failure: dict | None


def run_oracle(suite: str, budget: int, seed: int = 0) -> OracleOutcome:
    if suite not in ORACLE_SUITES:
        raise ValueError(
            f"unknown oracle suite {suite!r}; available: {', '.join(sorted(ORACLE_SUITES))}"
        )
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    stream, suite_fn = ORACLE_SUITES[suite]
    rng = np.random.default_rng([_ORACLE_STREAM, stream, seed])
    checked, failure = suite_fn(budget, rng)
    return OracleOutcome(suite=suite, checked=checked, failure=failure)


def cmd_oracle(suite: str, budget: int = 200, seed: int = 0, out: str = ".") -> int:
    """Exit 0 when every check passes, 1 on a violation, 2 on bad usage."""
    try:
        outcome = run_oracle(suite, budget, seed)
    except ValueError as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return 2
    if outcome.failure is None:
        print(f"{suite}: {outcome.checked} checks passed")
        return 0
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    replay = out_dir / f"oracle_{suite}_failure.json"
    replay.write_text(_json_text(outcome.failure), encoding="utf-8")
    print(
        f"{suite}: violation on check {outcome.checked}; instance saved to {replay}",
        file=sys.stderr,
    )
    return 1
