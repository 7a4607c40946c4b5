"""Kernel plug-ins, gated finite differences, and the averaged-outer-product
metric estimators, checked against hand values, oracles, and known geometry."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnmetric.dataset import CLASS, REAL, Dataset, random_rotation, synth_sin
from nnmetric import gradient_metrics as gm
from nnmetric.gradient_metrics import (
    GradientEstimate,
    KernelSpec,
    density_gate,
    estimate_egop,
    estimate_ejop,
    estimate_gw,
    finite_diff_gradient,
    gate_mask,
    kernel_class_probs,
    kernel_regress,
    relieff_weights,
)


def real_dataset(features, targets):
    return Dataset(
        features=np.asarray(features, dtype=float),
        labels=np.asarray(targets, dtype=float),
        kind=REAL,
    )


def class_dataset(features, labels):
    return Dataset(
        features=np.asarray(features, dtype=float),
        labels=np.asarray(labels, dtype=int),
        kind=CLASS,
    )


def blobs2(seed, n_per=80, d=5):
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for lab, center in enumerate(([1.5, 0.8], [-1.5, -0.8]), start=1):
        block = rng.normal(size=(n_per, d))
        block[:, :2] = np.array(center) + rng.normal(size=(n_per, 2))
        feats.append(block)
        labels.extend([lab] * n_per)
    return class_dataset(np.vstack(feats), labels)


class TestKernelSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            KernelSpec(bandwidth=0.0)
        with pytest.raises(ValueError):
            KernelSpec(bandwidth=1.0, shape="boxcar")

    @pytest.mark.parametrize("shape", ["triangle", "epanechnikov"])
    def test_admissibility(self, shape):
        spec = KernelSpec(bandwidth=1.0, shape=shape)
        u = np.linspace(0.0, 1.5, 200)
        vals = spec(u)
        assert np.all(np.diff(vals) <= 1e-12)
        assert np.all(vals[u < 1.0] > 0)
        assert spec(1.0) == 0.0
        assert np.all(vals[u >= 1.0] == 0.0)

    def test_triangle_values(self):
        spec = KernelSpec(bandwidth=2.0)
        np.testing.assert_allclose(spec([0.0, 0.5, 1.0]), [1.0, 0.5, 0.0])


class TestKernelRegress:
    def test_constant_targets(self):
        train = real_dataset([[0.0], [1.0], [2.0]], [4.0, 4.0, 4.0])
        spec = KernelSpec(bandwidth=1.0)
        for x in ([0.5], [100.0]):
            assert kernel_regress(train, spec, x) == pytest.approx(4.0)

    def test_far_query_falls_back_to_mean(self):
        train = real_dataset([[0.0], [1.0]], [0.0, 3.0])
        assert kernel_regress(train, KernelSpec(bandwidth=0.5), [50.0]) == pytest.approx(1.5)

    def test_hand_computed_two_points(self):
        train = real_dataset([[0.25], [-0.75]], [0.0, 1.0])
        spec = KernelSpec(bandwidth=1.0)
        assert kernel_regress(train, spec, [0.0]) == pytest.approx(0.25)

    @settings(deadline=None, max_examples=50)
    @given(st.integers(0, 10_000))
    def test_stays_within_target_range(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 12))
        train = real_dataset(rng.normal(size=(n, 2)), rng.normal(size=n))
        value = kernel_regress(train, KernelSpec(bandwidth=1.0), rng.normal(size=2))
        assert train.labels.min() - 1e-12 <= value <= train.labels.max() + 1e-12


class TestKernelClassProbs:
    def test_requires_classed_data(self):
        train = real_dataset([[0.0]], [1.0])
        with pytest.raises(ValueError):
            kernel_class_probs(train, KernelSpec(bandwidth=1.0), [0.0])

    def test_temperature_must_be_positive(self):
        train = class_dataset([[0.0], [1.0]], [1, 2])
        with pytest.raises(ValueError):
            kernel_class_probs(train, KernelSpec(bandwidth=1.0), [0.0], temperature=0.0)

    def test_single_class_argmax(self):
        train = class_dataset([[0.0], [0.2]], [1, 1])
        probs = kernel_class_probs(train, KernelSpec(bandwidth=1.0), [0.1])
        assert probs.argmax() == 0

    def test_fallback_softmaxes_class_frequencies(self):
        train = class_dataset([[0.0], [0.1], [0.2], [0.3]], [1, 1, 1, 2])
        probs = kernel_class_probs(train, KernelSpec(bandwidth=0.5), [99.0])
        raw = np.array([0.75, 0.25])
        expected = np.exp(raw) / np.exp(raw).sum()
        np.testing.assert_allclose(probs, expected)

    def test_simplex_on_random_queries(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(1, 4, size=20)
        labels[:3] = [1, 2, 3]
        train = class_dataset(rng.normal(size=(20, 3)), labels)
        spec = KernelSpec(bandwidth=1.0)
        for _ in range(25):
            probs = kernel_class_probs(train, spec, rng.normal(size=3))
            assert abs(probs.sum() - 1.0) <= 1e-12
            assert np.all(probs > 0)

    def test_higher_temperature_flattens(self):
        train = class_dataset([[0.0], [0.1], [5.0]], [1, 1, 2])
        spec = KernelSpec(bandwidth=1.0)
        sharp = kernel_class_probs(train, spec, [0.05], temperature=0.1)
        flat = kernel_class_probs(train, spec, [0.05], temperature=10.0)
        assert sharp.max() > flat.max()


class TestDensityGate:
    def test_dense_cluster_gates_true(self):
        rng = np.random.default_rng(1)
        train = real_dataset(rng.normal(scale=0.1, size=(30, 2)), np.zeros(30))
        assert density_gate(train, [0.0, 0.0], t=0.05, h=0.5, i=0)
        assert density_gate(train, [0.0, 0.0], t=0.05, h=0.5, i=1)

    def test_isolated_point_gates_false(self):
        train = real_dataset([[0.0, 0.0]], [0.0])
        assert not density_gate(train, [10.0, 10.0], t=0.1, h=0.5, i=0)

    def test_mask_agrees_with_scalar_gate(self):
        rng = np.random.default_rng(2)
        train = real_dataset(rng.normal(size=(15, 3)), np.zeros(15))
        x = rng.normal(size=3)
        mask = gate_mask(train, x, t=0.3, h=0.8, min_count=2)
        for i in range(3):
            assert mask[i] == density_gate(train, x, t=0.3, h=0.8, i=i, min_count=2)

    def test_gate_rate_grows_with_sample_size(self):
        rng = np.random.default_rng(3)
        h, t = 0.08, 0.05
        queries = rng.uniform(size=(40, 2))
        rates = []
        for n in (40, 400):
            train = real_dataset(rng.uniform(size=(n, 2)), np.zeros(n))
            hits = [gate_mask(train, q, t, h).mean() for q in queries]
            rates.append(float(np.mean(hits)))
        assert rates[1] > rates[0]


class TestFiniteDiffGradient:
    def test_exact_on_linear(self):
        grad = finite_diff_gradient(lambda x: 3.0 * x[0], np.zeros(3), t=0.5)
        np.testing.assert_allclose(grad.values, [3.0, 0.0, 0.0])

    def test_exact_on_quadratic(self):
        grad = finite_diff_gradient(lambda x: float(x[0] ** 2), np.array([1.0]), t=0.5)
        assert grad.values[0] == pytest.approx(2.0)

    def test_gated_coordinate_is_zero(self):
        mask = np.array([True, False, True])
        grad = finite_diff_gradient(lambda x: float(x.sum()), np.zeros(3), 0.1, mask)
        np.testing.assert_allclose(grad.values, [1.0, 0.0, 1.0])

    def test_vector_evaluator_builds_jacobian(self):
        a = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 0.0]])
        grad = finite_diff_gradient(lambda x: a.T @ x, np.zeros(3), t=0.25)
        assert grad.values.shape == (3, 2)
        np.testing.assert_allclose(grad.values, a)

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            finite_diff_gradient(lambda x: 0.0, np.zeros(2), t=0.0)

    def test_estimate_type_rejects_nonzero_gated_rows(self):
        with pytest.raises(ValueError):
            GradientEstimate(values=np.ones(2), mask=np.array([True, False]))


class TestEstimateEgop:
    def test_linear_oracle_recovers_outer_product(self):
        rng = np.random.default_rng(4)
        train = real_dataset(rng.normal(size=(50, 2)), np.zeros(50))
        a = np.array([1.0, 2.0])
        est = estimate_egop(
            train, KernelSpec(bandwidth=1.0), t=0.1, evaluator=lambda q: float(a @ q)
        )
        assert np.abs(est.g - np.outer(a, a)).max() <= 1e-8
        assert est.kind == "egop"

    def test_rotation_conjugates_oracle_estimate(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(40, 3))
        a = np.array([0.5, -1.0, 2.0])
        q = random_rotation(3, seed=11)
        spec = KernelSpec(bandwidth=1.0)
        base = estimate_egop(
            real_dataset(X, np.zeros(40)), spec, 0.1, evaluator=lambda z: float(a @ z)
        )
        ar = q.T @ a
        rotated = estimate_egop(
            real_dataset(X @ q, np.zeros(40)), spec, 0.1, evaluator=lambda z: float(ar @ z)
        )
        assert np.abs(rotated.g - q.T @ base.g @ q).max() <= 1e-8

    def test_plugin_matches_explicit_leave_one_out(self):
        rng = np.random.default_rng(6)
        X = rng.uniform(size=(25, 3))
        train = real_dataset(X, np.sin(3.0 * X[:, 0]))
        spec = KernelSpec(bandwidth=0.5)
        t = 0.1
        fast = estimate_egop(train, spec, t)
        slow = np.zeros((3, 3))
        for idx in range(train.n):
            x = train.features[idx]
            mask = gate_mask(train, x, t, spec.bandwidth)
            if not mask.any():
                continue
            keep = np.flatnonzero(np.arange(train.n) != idx)
            rest = train.subset(keep)
            grad = finite_diff_gradient(
                lambda z: kernel_regress(rest, spec, z), x, t, mask
            ).values
            slow += np.outer(grad, grad)
        np.testing.assert_allclose(fast.g, slow / train.n, atol=1e-12)

    def test_psd_on_random_runs(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            X = rng.uniform(size=(30, 3))
            train = real_dataset(X, rng.normal(size=30))
            est = estimate_egop(train, KernelSpec(bandwidth=0.6), t=0.15)
            assert est.eig.values[-1] >= -1e-9

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            estimate_egop(real_dataset([[0.0]], [1.0]), KernelSpec(bandwidth=1.0), 0.1)

    def test_all_gates_false_warns_and_zeroes(self):
        train = real_dataset([[0.0, 0.0], [100.0, 100.0]], [0.0, 1.0])
        with pytest.warns(UserWarning):
            est = estimate_egop(train, KernelSpec(bandwidth=0.01), t=5.0)
        np.testing.assert_array_equal(est.g, np.zeros((2, 2)))

    def test_single_index_direction_recovered(self):
        angles = []
        for seed in range(3):
            rng = np.random.default_rng(seed)
            v = rng.normal(size=4)
            v /= np.linalg.norm(v)
            X = rng.uniform(size=(600, 4))
            train = real_dataset(X, np.sin(5.0 * X @ v))
            est = estimate_egop(train, KernelSpec(bandwidth=0.45), t=0.12)
            cos = abs(float(est.eig.vectors[:, 0] @ v))
            angles.append(np.degrees(np.arccos(min(1.0, cos))))
        assert np.median(angles) < 15.0

    def test_transform_squares_to_the_estimate(self):
        rng = np.random.default_rng(8)
        X = rng.uniform(size=(40, 3))
        train = real_dataset(X, np.sin(2.0 * X[:, 0] + X[:, 1]))
        est = estimate_egop(train, KernelSpec(bandwidth=0.5), t=0.1)
        T = est.transform()
        np.testing.assert_allclose(T.T @ T, est.g, atol=1e-9)


class TestEstimateGw:
    def test_oracle_single_coordinate(self):
        rng = np.random.default_rng(9)
        train = real_dataset(rng.normal(size=(30, 2)), np.zeros(30))
        w = estimate_gw(
            train, KernelSpec(bandwidth=1.0), t=0.1, evaluator=lambda q: 3.0 * q[0]
        )
        np.testing.assert_allclose(w, [3.0, 0.0], atol=1e-12)

    def test_nonnegative_always(self):
        rng = np.random.default_rng(10)
        for _ in range(5):
            X = rng.uniform(size=(25, 3))
            train = real_dataset(X, rng.normal(size=25))
            w = estimate_gw(train, KernelSpec(bandwidth=0.6), t=0.15)
            assert np.all(w >= 0)

    def test_rotation_spreads_weights_but_not_egop(self):
        rng = np.random.default_rng(3)
        d, n = 4, 800
        X = rng.uniform(size=(n, d))
        y = np.sin(4.0 * X[:, 0])
        q = random_rotation(d, seed=9)
        spec = KernelSpec(bandwidth=0.45)
        t = 0.12
        w_axis = estimate_gw(real_dataset(X, y), spec, t)
        w_rot = estimate_gw(real_dataset(X @ q, y), spec, t)
        # axis-aligned data concentrates the weight mass on the one relevant
        # coordinate; rotation spreads it out
        assert w_axis.max() / w_axis.sum() > 0.6
        assert w_rot.max() / w_rot.sum() < 0.5
        est = estimate_egop(real_dataset(X @ q, y), spec, t)
        relevant = q[0, :] / np.linalg.norm(q[0, :])
        cos = abs(float(est.eig.vectors[:, 0] @ relevant))
        assert np.degrees(np.arccos(min(1.0, cos))) < 15.0


class TestEstimateEjop:
    def test_requires_two_classes(self):
        train = class_dataset([[0.0], [1.0]], [1, 1])
        with pytest.raises(ValueError):
            estimate_ejop(train, KernelSpec(bandwidth=1.0), 0.1)

    def test_constant_evaluator_gives_zero_matrix(self):
        train = blobs2(0, n_per=10, d=3)
        est = estimate_ejop(
            train,
            KernelSpec(bandwidth=1.0),
            t=0.1,
            evaluator=lambda q: np.array([0.5, 0.5]),
        )
        np.testing.assert_array_equal(est.g, np.zeros((3, 3)))

    def test_plugin_matches_explicit_leave_one_out(self):
        train = blobs2(1, n_per=12, d=3)
        spec = KernelSpec(bandwidth=2.0)
        t = 0.3
        fast = estimate_ejop(train, spec, t, temperature=0.5)
        slow = np.zeros((3, 3))
        for idx in range(train.n):
            x = train.features[idx]
            mask = gate_mask(train, x, t, spec.bandwidth)
            if not mask.any():
                continue
            keep = np.flatnonzero(np.arange(train.n) != idx)
            rest = train.subset(keep)
            jac = finite_diff_gradient(
                lambda z: kernel_class_probs(rest, spec, z, 0.5), x, t, mask
            ).values
            slow += jac @ jac.T
        np.testing.assert_allclose(fast.g, slow / train.n, atol=1e-12)

    def test_psd_on_random_runs(self):
        rng = np.random.default_rng(11)
        for seed in range(4):
            train = blobs2(seed, n_per=20, d=4)
            est = estimate_ejop(train, KernelSpec(bandwidth=2.5), t=0.5)
            assert est.eig.values[-1] >= -1e-9
            assert est.kind == "ejop"

    def test_agrees_with_egop_of_class_one_mass(self):
        train = blobs2(0)
        spec = KernelSpec(bandwidth=3.0)
        ej = estimate_ejop(train, spec, t=0.8, temperature=0.2)
        surface = real_dataset(train.features, (train.labels == 1).astype(float))
        eg = estimate_egop(surface, spec, t=0.8)
        cos = abs(float(ej.eig.vectors[:, 0] @ eg.eig.vectors[:, 0]))
        assert np.degrees(np.arccos(min(1.0, cos))) < 10.0

    def test_predict_recovers_blob_class(self):
        train = blobs2(2, n_per=40, d=4)
        spec = KernelSpec(bandwidth=2.0)
        q1 = np.zeros(4)
        q1[:2] = [1.5, 0.8]
        q2 = np.zeros(4)
        q2[:2] = [-1.5, -0.8]
        assert gm.ejop_predict(train, spec, q1) == 1
        assert gm.ejop_predict(train, spec, q2) == 2


class TestReliefF:
    def test_requires_classed_data_and_enough_points(self):
        with pytest.raises(ValueError):
            relieff_weights(real_dataset([[0.0]], [1.0]))
        small = class_dataset([[0.0], [1.0], [2.0]], [1, 1, 2])
        with pytest.raises(ValueError):
            relieff_weights(small, k_hits=2)

    def test_constant_feature_scores_zero(self):
        rng = np.random.default_rng(12)
        feats = rng.normal(size=(30, 3))
        feats[:, 1] = 7.0
        labels = np.repeat([1, 2], 15)
        w = relieff_weights(class_dataset(feats, labels), k_hits=3, n_probes=30, seed=0)
        assert w[1] == 0.0

    def test_separating_feature_scores_highest(self):
        train = blobs2(3, n_per=40, d=5)
        w = relieff_weights(train, k_hits=5, n_probes=60, seed=0)
        assert w.argmax() in (0, 1)
        assert w[:2].min() > w[2:].max()

    def test_deterministic_under_seed(self):
        train = blobs2(4, n_per=20, d=4)
        w1 = relieff_weights(train, k_hits=3, n_probes=25, seed=5)
        w2 = relieff_weights(train, k_hits=3, n_probes=25, seed=5)
        np.testing.assert_array_equal(w1, w2)


class TestConsistencyTrend:
    def test_estimate_gap_shrinks_with_sample_size(self):
        spec = KernelSpec(bandwidth=0.6)
        step = 0.15
        gaps = {250: [], 500: [], 1000: []}
        for seed in range(5):
            cache = {}
            for n in (250, 500, 1000, 2000, 4000):
                ds = synth_sin(n, 5, c1=5.0, decay=0.5, noise_std=0.1, seed=seed)
                cache[n] = estimate_egop(ds, spec, step).g
            for n in gaps:
                gaps[n].append(float(np.linalg.norm(cache[n] - cache[4 * n])))
        medians = [np.median(gaps[n]) for n in (250, 500, 1000)]
        assert medians[0] > medians[1] > medians[2]
