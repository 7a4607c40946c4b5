"""kNN and radius (boxcar) prediction under a metric transform, plus evaluation.

Neighbor search is brute force.  The tie order everywhere is total and
deterministic: distance first, then training index.  Classification votes
resolve ties by the label of the nearest selected neighbor among the tied
classes, and any remaining tie by the smallest label id.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import CLASS, Dataset, SplitSpec


@dataclass(frozen=True)
class NeighborRule:
    """Neighbor selection rule: ``kind`` is "knn" (uses k) or "hnn" (uses radius)."""

    kind: str
    k: int = 0
    radius: float = 0.0

    def __post_init__(self):
        if self.kind == "knn":
            if self.k < 1:
                raise ValueError("knn rule needs k >= 1")
        elif self.kind == "hnn":
            if not self.radius > 0:
                raise ValueError("hnn rule needs radius > 0")
        else:
            raise ValueError(f"unknown rule kind {self.kind!r}")


@dataclass(frozen=True)
class EvalReport:
    metric_name: str
    value: float
    n_test: int
    hyperparams: dict = field(default_factory=dict)
    seed: int = 0

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="").writerow(
            [
                self.metric_name,
                repr(self.value),
                self.n_test,
                json.dumps(self.hyperparams, sort_keys=True),
                self.seed,
            ]
        )
        return buf.getvalue()


def transform_features(features: np.ndarray, transform) -> np.ndarray:
    """Apply a linear map (matrix) to row-stacked features; None = identity."""
    if transform is None:
        return np.asarray(features, dtype=float)
    return np.asarray(features, dtype=float) @ np.asarray(transform, dtype=float).T


def neighbor_order(dists: np.ndarray) -> np.ndarray:
    """Indices sorted by (distance, index): a total, deterministic order."""
    return np.argsort(dists, kind="stable")


def _selected(dists, rule):
    order = neighbor_order(dists)
    if rule.kind == "knn":
        return order[: rule.k]
    in_ball = order[dists[order] <= rule.radius]
    return in_ball  # may be empty; callers fall back to the global pool


def vote(labels_selected: np.ndarray, all_labels: np.ndarray) -> int:
    """Majority vote over selected labels (in nearness order).

    Ties between classes with equal counts go to the nearest selected
    neighbor whose label is among the tied classes; any remaining tie goes
    to the smallest label id.
    """
    labels_selected = np.asarray(labels_selected, dtype=int)
    counts = np.bincount(labels_selected, minlength=int(all_labels.max()) + 1)
    top = counts.max()
    tied = np.flatnonzero(counts == top)
    if len(tied) == 1:
        return int(tied[0])
    tied_set = set(int(t) for t in tied)
    for lab in labels_selected:
        if int(lab) in tied_set:
            return int(lab)
    return int(tied.min())


def predict_from_distances(dists, train: Dataset, rule: NeighborRule, mode: str):
    """Prediction given precomputed query-to-train distances."""
    sel = _selected(np.asarray(dists, dtype=float), rule)
    if len(sel) == 0:
        sel = neighbor_order(np.asarray(dists, dtype=float))  # empty ball: global fallback
    if mode == "classify":
        return vote(train.labels[sel], train.labels)
    if mode == "regress":
        return float(train.labels[sel].mean())
    raise ValueError(f"unknown mode {mode!r}")


def neighbor_predict(train: Dataset, transform, query, rule: NeighborRule, mode: str):
    """Predict the label (classify) or mean target (regress) for one query.

    ``transform`` is a matrix T applied to both sides, so distances are
    ``|T x - T x_i|``; pass None for the identity.
    """
    tq = transform_features(np.atleast_2d(query), transform)[0]
    tx = transform_features(train.features, transform)
    dists = np.linalg.norm(tx - tq, axis=1)
    return predict_from_distances(dists, train, rule, mode)


def predict_batch(train: Dataset, transform, queries, rule: NeighborRule, mode: str):
    tq = transform_features(np.atleast_2d(queries), transform)
    tx = transform_features(train.features, transform)
    sq_t = np.sum(tx**2, axis=1)
    out = []
    for row in tq:
        d2 = np.maximum(sq_t - 2.0 * (tx @ row) + row @ row, 0.0)
        out.append(predict_from_distances(np.sqrt(d2), train, rule, mode))
    if mode == "regress":
        return np.asarray(out, dtype=float)
    return np.asarray(out, dtype=int)


def evaluate(predictions, truth, task: str, loss_matrix=None, seed: int = 0, hyperparams=None) -> EvalReport:
    """Score predictions: mean 0/1 (or loss-matrix) error, or nMSE.

    nMSE is the mean squared error divided by the population variance of the
    test targets, so predicting the test mean everywhere scores 1.0.
    """
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if len(predictions) != len(truth) or len(truth) < 1:
        raise ValueError("predictions and truth must have equal nonzero length")
    if task == "classify":
        if loss_matrix is None:
            value = float(np.mean(predictions != truth))
        else:
            lm = np.asarray(loss_matrix, dtype=float)
            value = float(
                np.mean([lm[int(t) - 1, int(p) - 1] for t, p in zip(truth, predictions)])
            )
        name = "error"
    elif task == "regress":
        var = float(np.var(truth))
        if var == 0.0:
            raise ValueError("test targets have zero variance; nMSE undefined")
        value = float(np.mean((predictions - truth) ** 2) / var)
        name = "nmse"
    else:
        raise ValueError(f"unknown task {task!r}")
    return EvalReport(
        metric_name=name,
        value=value,
        n_test=len(truth),
        hyperparams=dict(hyperparams or {}),
        seed=seed,
    )


def cross_validate(train: Dataset, grid: dict, folds: SplitSpec, objective):
    """Exhaustive grid search by k-fold cross-validation.

    Parameters
    ----------
    grid : dict of name -> list of values, iterated in listed order.
    objective : callable(fold_train, fold_val, params) -> float, lower better.

    Returns the first-listed params achieving the lowest mean objective,
    together with that mean.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("grid must be nonempty")
    names = list(grid.keys())
    best_params, best_value = None, np.inf
    for combo in itertools.product(*(grid[name] for name in names)):
        params = dict(zip(names, combo))
        scores = []
        for f in range(folds.n_folds):
            val_idx = folds.fold_indices(f)
            tr_idx = np.flatnonzero(folds.assignment != f)
            scores.append(objective(train.subset(tr_idx), train.subset(val_idx), params))
        mean_score = float(np.mean(scores))
        if mean_score < best_value:  # strict: ties keep the first-listed combo
            best_params, best_value = params, mean_score
    return best_params, best_value
