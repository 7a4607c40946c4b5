"""Metric learning for kNN regression.

The classification machinery carries over with one obstacle: the natural
loss Delta(y, h) = (y - mean of selected targets)^2 couples the members of
h through the mean, and maximizing score + Delta exactly is intractable.
Training therefore uses the separable upper bound
Delta_hat(y, h) = (1/k) sum_{i in h} (y - y_i)^2, which turns both inference
problems into per-point scoring: sort by s_i = -D(x, x_i) -+ gamma
(y - y_i)^2 / k and take the top k.

Two alternate definitions of the zero-loss set h* are provided as labeled
heuristics (the exact subset problems remain hard): an eps-insensitive
variant that accepts any h with Delta <= eps, and a min-loss variant that
greedily drives Delta itself down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import REAL, Dataset
from .gerrymander import (
    AsymmetricMetric,
    InfeasibleTargetError,
    MahalanobisMetric,
    TraceRow,
    TrainResult,
    _init_matrix,
    _learning_rate,
    _should_stop,
    _ASYM_LR_OFFSET,
    asym_reg_grads,
    asym_score_grads,
    feature_map_psi,
)
from .numerics import psd_project, sym_eig


def delta_reg(y: float, h, targets) -> float:
    """Squared error of the mean of the selected targets."""
    sel = np.asarray(targets, dtype=float)[np.asarray(h, dtype=int)]
    return float((y - sel.mean()) ** 2)


def delta_reg_ub(y: float, h, targets) -> float:
    """Mean squared target gap; upper-bounds delta_reg on every h."""
    sel = np.asarray(targets, dtype=float)[np.asarray(h, dtype=int)]
    return float(np.mean((y - sel) ** 2))


@dataclass(frozen=True)
class RegLossVariant:
    """Which h* definition the trainer solves for."""

    kind: str
    gamma: float
    eps: float = 0.0

    def __post_init__(self):
        if self.kind not in ("upper_bound", "eps_insensitive", "min_loss"):
            raise ValueError(f"unknown variant kind {self.kind!r}")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")


def reg_point_scores(dists, targets, y: float, k: int, gamma: float, direction: str):
    dists = np.asarray(dists, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if direction == "targeted":
        sign = -1.0
    elif direction == "loss_augmented":
        sign = 1.0
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return -dists + sign * gamma * (y - targets) ** 2 / k


def reg_inference_core(dists, targets, y: float, k: int, gamma: float, direction: str):
    """Top-k by per-point score; exact since the objective is additive."""
    scores = reg_point_scores(dists, targets, y, k, gamma, direction)
    order = np.lexsort((np.arange(len(scores)), -scores))
    h = order[:k]
    if not np.isfinite(scores[h]).all():
        raise InfeasibleTargetError(f"fewer than k={k} candidates")
    return h


def reg_inference(metric, x, y: float, k: int, gamma: float, direction: str,
                  train: Dataset, exclude=None):
    dists = metric.distances(x, train.features)
    if exclude is not None:
        dists = dists.copy()
        dists[exclude] = np.inf
    return reg_inference_core(dists, train.labels, y, k, gamma, direction)


def reg_surrogate(metric, x, y: float, k: int, gamma: float, train: Dataset,
                  exclude=None) -> float:
    """[S + gamma Delta_hat](h-hat) - [S - gamma Delta_hat](h*); nonnegative."""
    dists = metric.distances(x, train.features)
    if exclude is not None:
        dists = dists.copy()
        dists[exclude] = np.inf
    h_hat = reg_inference_core(dists, train.labels, y, k, gamma, "loss_augmented")
    h_star = reg_inference_core(dists, train.labels, y, k, gamma, "targeted")
    up = -dists[h_hat].sum() + gamma * delta_reg_ub(y, h_hat, train.labels)
    down = -dists[h_star].sum() - gamma * delta_reg_ub(y, h_star, train.labels)
    return float(up - down)


def _worst_member(h, targets, y):
    """The member pulling the selected mean away from y the hardest."""
    sel = targets[h]
    m = sel.mean()
    pull = (sel - y) * np.sign(m - y)
    pos = int(np.argmax(pull))
    return pos


def hstar_alternate(metric, x, y: float, k: int, variant: RegLossVariant,
                    train: Dataset, exclude=None):
    """Heuristic zero-loss sets for the two alternate h* notions.

    eps_insensitive: start at the plain top-k, repeatedly swap the member
    worsening Delta most for the nearest outside point that strictly reduces
    Delta, until Delta <= eps; raises when the swap budget (5k) runs out
    first.  min_loss: start from the k targets nearest y, same swap loop,
    run until no swap improves.  Neither is exact.
    """
    targets = np.asarray(train.labels, dtype=float)
    dists = metric.distances(x, train.features)
    if exclude is not None:
        dists = dists.copy()
        dists[exclude] = np.inf
    finite = np.flatnonzero(np.isfinite(dists))
    if len(finite) < k:
        raise InfeasibleTargetError(f"fewer than k={k} candidates")
    if variant.kind == "eps_insensitive":
        h = list(reg_inference_core(dists, targets, y, k, 0.0, "targeted"))
    elif variant.kind == "min_loss":
        gap_order = np.lexsort((dists, np.abs(targets - y)))
        h = [i for i in gap_order if np.isfinite(dists[i])][:k]
    else:
        return reg_inference_core(dists, targets, y, k, variant.gamma, "targeted")
    budget = 5 * k
    for _ in range(budget):
        current = delta_reg(y, h, targets)
        if variant.kind == "eps_insensitive" and current <= variant.eps:
            return np.asarray(h, dtype=int)
        pos = _worst_member(np.asarray(h), targets, y)
        outside = [i for i in finite if i not in h]
        best_i, best_delta = None, current
        for i in sorted(outside, key=lambda i: (dists[i], i)):
            trial = h[:pos] + h[pos + 1 :] + [i]
            trial_delta = delta_reg(y, trial, targets)
            if trial_delta < best_delta - 1e-15:
                best_i, best_delta = i, trial_delta
                break  # nearest improving point wins
        if best_i is None:
            break
        h = h[:pos] + h[pos + 1 :] + [best_i]
    final = delta_reg(y, h, targets)
    if variant.kind == "eps_insensitive" and final > variant.eps:
        raise InfeasibleTargetError(
            f"no subset with loss <= {variant.eps} found within {budget} swaps"
        )
    return np.asarray(sorted(h, key=lambda i: (dists[i], i)), dtype=int)


@dataclass(frozen=True)
class RegTrainConfig:
    """Trainer knobs; gamma scales the target-gap term inside inference."""

    k: int
    gamma: float = 1.0
    c: float = 1.0
    epochs: int = 20
    lr: object = "inv_t"
    init: str = "zeros"
    init_weights: np.ndarray | None = None
    seed: int = 0
    batch_size: int = 1
    stop_rel_tol: float | None = 1e-4
    hstar: str = "upper_bound"
    eps: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if not self.c > 0:
            raise ValueError("C must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.hstar not in ("upper_bound", "eps_insensitive", "min_loss"):
            raise ValueError(f"unknown hstar variant {self.hstar!r}")


def train_reg_sgd(train: Dataset, config: RegTrainConfig, mode: str = "symmetric",
                  audit_psd: bool = False) -> TrainResult:
    """SGD on the separable regression surrogate.

    Updates mirror the classification trainer: symmetric mode applies
    W <- (1 - eta) W - C (Psi(x, h-hat) - Psi(x, h*)) with PSD projection,
    asymmetric mode descends the U/V score partials plus the joint Frobenius
    penalty.  h* comes from the configured variant; eps-infeasible samples
    are skipped and counted.
    """
    if train.kind != REAL:
        raise ValueError("train_reg_sgd needs real targets")
    if mode not in ("symmetric", "asymmetric"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(config.seed)
    d = train.d
    if mode == "symmetric":
        metric = MahalanobisMetric(w=_init_matrix(config, d))
    else:
        if config.init == "zeros":
            base = np.eye(d)
        elif config.init == "diag":
            base = np.sqrt(_init_matrix(config, d))
        else:
            base = _init_matrix(config, d)
        metric = AsymmetricMetric(u=base.copy(), v=base.copy())
    variant = None
    if config.hstar != "upper_bound":
        variant = RegLossVariant(
            kind=config.hstar, gamma=max(config.gamma, 1e-12), eps=config.eps
        )
    targets = np.asarray(train.labels, dtype=float)

    trace: list[TraceRow] = []
    psd_audit: list[float] = []
    prev_mean = None
    t = 0
    epochs_run = 0
    for epoch in range(config.epochs):
        order = rng.permutation(train.n)
        losses = []
        skipped = 0
        for start in range(0, train.n, config.batch_size):
            batch = order[start : start + config.batch_size]
            updates = []
            for i in batch:
                x = train.features[i]
                y = float(targets[i])
                dists = metric.distances(x, train.features)
                dists[i] = np.inf
                try:
                    h_hat = reg_inference_core(
                        dists, targets, y, config.k, config.gamma, "loss_augmented"
                    )
                    if variant is None:
                        h_star = reg_inference_core(
                            dists, targets, y, config.k, config.gamma, "targeted"
                        )
                    else:
                        h_star = hstar_alternate(
                            metric, x, y, config.k, variant, train, exclude=i
                        )
                except InfeasibleTargetError:
                    skipped += 1
                    continue
                up = -dists[h_hat].sum() + config.gamma * delta_reg_ub(y, h_hat, targets)
                down = -dists[h_star].sum() - config.gamma * delta_reg_ub(y, h_star, targets)
                losses.append(float(up - down))
                updates.append((i, h_hat, h_star))
            for i, h_hat, h_star in updates:
                t += 1
                x = train.features[i]
                if mode == "symmetric":
                    eta = _learning_rate(config.lr, t)
                    delta = feature_map_psi(x, h_hat, train) - feature_map_psi(
                        x, h_star, train
                    )
                    w = psd_project((1.0 - eta) * metric.w - config.c * delta)
                    metric = MahalanobisMetric(w=w)
                    if audit_psd:
                        psd_audit.append(float(sym_eig(w).values[-1]))
                else:
                    eta = _learning_rate(config.lr, t, offset=_ASYM_LR_OFFSET)
                    gu_hat, gv_hat = asym_score_grads(metric.u, metric.v, x, h_hat, train)
                    gu_star, gv_star = asym_score_grads(metric.u, metric.v, x, h_star, train)
                    reg_u, reg_v = asym_reg_grads(metric.u, metric.v)
                    u = metric.u - eta * (config.c * (gu_hat - gu_star) + reg_u)
                    v = metric.v - eta * (config.c * (gv_hat - gv_star) + reg_v)
                    metric = AsymmetricMetric(u=u, v=v)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        trace.append(TraceRow(epoch=epoch, mean_surrogate=mean_loss, skipped=skipped))
        epochs_run = epoch + 1
        if _should_stop(prev_mean, mean_loss, config.stop_rel_tol):
            break
        prev_mean = mean_loss
    return TrainResult(metric=metric, trace=trace, epochs_run=epochs_run, psd_audit=psd_audit)


def metric_reg_predictions(metric, train: Dataset, queries, k: int) -> np.ndarray:
    """kNN-mean regression predictions under a learned metric."""
    from .predictors import NeighborRule, predict_from_distances

    rule = NeighborRule("knn", k=k)
    out = []
    for x in np.atleast_2d(queries):
        dists = metric.distances(x, train.features)
        out.append(predict_from_distances(dists, train, rule, "regress"))
    return np.asarray(out, dtype=float)
