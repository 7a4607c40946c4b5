"""SGD training behavior: PSD maintenance, stopping, learning on blobs."""

import numpy as np
import pytest
from conftest import anisotropic_blobs, gauss_blobs

from nnmetric.dataset import CLASS, Dataset
from nnmetric.gerrymander import (
    AsymmetricMetric,
    GerryTrainConfig,
    MahalanobisMetric,
    metric_predictions,
    train_sgd,
)
from nnmetric.predictors import NeighborRule, predict_batch


def knn_error(metric, train, test, k=3):
    pred = metric_predictions(metric, train, test.features, k)
    return float(np.mean(pred != test.labels))


def euclidean_error(train, test, k=3):
    pred = predict_batch(train, None, test.features, NeighborRule("knn", k=k), "classify")
    return float(np.mean(pred != test.labels))


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            GerryTrainConfig(k=0)
        with pytest.raises(ValueError):
            GerryTrainConfig(k=3, c=0.0)
        with pytest.raises(ValueError):
            GerryTrainConfig(k=3, batch_size=0)

    def test_unknown_variant(self):
        train = gauss_blobs([[0.0], [4.0]], 5, 1.0, seed=0)
        with pytest.raises(ValueError):
            train_sgd(train, GerryTrainConfig(k=1, epochs=1), variant="banana")


class TestSymmetricTraining:
    def test_zero_epochs_returns_init(self):
        train = gauss_blobs([[0.0, 0.0], [3.0, 3.0]], 10, 1.0, seed=1)
        result = train_sgd(train, GerryTrainConfig(k=3, epochs=0, init="identity"))
        assert isinstance(result.metric, MahalanobisMetric)
        assert np.array_equal(result.metric.w, np.eye(2))
        assert result.epochs_run == 0
        assert result.trace == []

    def test_psd_after_every_update(self):
        train = gauss_blobs([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], 20, 1.0, seed=2)
        config = GerryTrainConfig(k=3, epochs=3, stop_rel_tol=None)
        result = train_sgd(train, config, audit_psd=True)
        assert len(result.psd_audit) > 0
        assert min(result.psd_audit) >= -1e-9

    def test_trace_rows_and_full_run_without_stopping(self):
        train = gauss_blobs([[0.0, 0.0], [2.5, 0.0]], 15, 1.0, seed=3)
        config = GerryTrainConfig(k=3, epochs=4, stop_rel_tol=None)
        result = train_sgd(train, config)
        assert result.epochs_run == 4
        assert [row.epoch for row in result.trace] == [0, 1, 2, 3]
        assert all(np.isfinite(row.mean_surrogate) for row in result.trace)
        assert all(row.skipped == 0 for row in result.trace)

    def test_stops_when_loss_plateaus(self):
        # frozen learning rate keeps the metric fixed, so epoch means repeat
        train = gauss_blobs([[0.0, 0.0], [2.0, 0.0]], 10, 1.0, seed=4)
        config = GerryTrainConfig(k=3, epochs=10, lr=0.0)
        result = train_sgd(train, config)
        assert result.epochs_run == 2

    def test_skips_samples_without_enough_same_class_neighbors(self):
        features = np.vstack([np.random.default_rng(5).normal(size=(8, 2)), [[9.0, 9.0]]])
        labels = np.array([1] * 8 + [2])
        train = Dataset(features=features, labels=labels, kind=CLASS)
        # the lone class-2 point has no class-2 neighbors once left out
        result = train_sgd(train, GerryTrainConfig(k=1, epochs=1, stop_rel_tol=None))
        assert result.trace[0].skipped >= 1

    def test_single_class_data_never_moves(self):
        train = gauss_blobs([[0.0, 0.0]], 12, 1.0, seed=6)
        result = train_sgd(train, GerryTrainConfig(k=3, epochs=2, stop_rel_tol=None))
        assert np.allclose(result.metric.w, 0.0)
        assert result.trace[0].mean_surrogate == pytest.approx(0.0, abs=1e-12)

    def test_learns_to_ignore_noise_coordinates(self):
        train = anisotropic_blobs(30, 4, seed=7)
        test = anisotropic_blobs(30, 4, seed=107)
        config = GerryTrainConfig(k=3, c=1.0, epochs=12)
        result = train_sgd(train, config)
        base = euclidean_error(train, test)
        learned = knn_error(result.metric, train, test)
        assert learned < base
        # the informative coordinate should carry the dominant weight
        w = result.metric.w
        assert w[0, 0] > np.max(np.abs(np.diag(w)[1:]))

    def test_batched_updates_match_unbatched_gradients_shape(self):
        train = gauss_blobs([[0.0, 0.0], [2.0, 0.0]], 8, 1.0, seed=8)
        config = GerryTrainConfig(k=3, epochs=2, batch_size=5, stop_rel_tol=None)
        result = train_sgd(train, config)
        assert result.metric.w.shape == (2, 2)
        assert np.isfinite(result.metric.w).all()

    def test_custom_loss_matrix_validated(self):
        train = gauss_blobs([[0.0], [3.0]], 6, 1.0, seed=9)
        bad = np.array([[0.5, 1.0], [1.0, 0.0]])
        with pytest.raises(ValueError):
            train_sgd(train, GerryTrainConfig(k=1, epochs=1), loss_matrix=bad)


class TestAsymmetricTraining:
    def test_block_matrix_stays_psd(self):
        train = gauss_blobs([[0.0, 0.0], [2.0, 0.0]], 10, 1.0, seed=10)
        config = GerryTrainConfig(k=3, epochs=3, init="identity", stop_rel_tol=None)
        result = train_sgd(train, config, variant="asymmetric")
        assert isinstance(result.metric, AsymmetricMetric)
        block = result.metric.block_matrix()
        assert np.min(np.linalg.eigvalsh(block)) >= -1e-9
        assert np.isfinite(result.metric.u).all()
        assert np.isfinite(result.metric.v).all()

    def test_diag_init_matches_weighted_metric_at_start(self):
        train = gauss_blobs([[0.0, 0.0], [2.0, 0.0]], 6, 1.0, seed=11)
        weights = np.array([4.0, 0.25])
        config = GerryTrainConfig(
            k=1, epochs=0, init="diag", init_weights=weights
        )
        result = train_sgd(train, config, variant="asymmetric")
        x = np.array([1.0, 2.0])
        asym = result.metric.distances(x, train.features)
        diff = train.features - x
        sym = np.sum(diff**2 * weights, axis=1)
        assert np.allclose(asym, sym)

    def test_reduces_surrogate_on_blobs(self):
        train = gauss_blobs([[0.0, 0.0, 0.0], [2.0, 0.5, 0.0]], 20, 1.0, seed=12)
        config = GerryTrainConfig(k=3, epochs=8, init="identity")
        result = train_sgd(train, config, variant="asymmetric")
        first = result.trace[0].mean_surrogate
        best = min(row.mean_surrogate for row in result.trace)
        assert best <= first


class TestMetricPredictions:
    def test_identity_metric_matches_euclidean(self):
        train = gauss_blobs([[0.0, 0.0], [3.0, 0.0]], 10, 1.0, seed=13)
        queries = np.random.default_rng(14).normal(size=(10, 2)) * 2.0
        rule = NeighborRule("knn", k=3)
        expected = predict_batch(train, None, queries, rule, "classify")
        got = metric_predictions(MahalanobisMetric(w=np.eye(2)), train, queries, 3)
        assert np.array_equal(got, expected)
