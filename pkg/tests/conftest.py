"""Shared synthetic fixtures for the test suite."""

import numpy as np

from nnmetric.dataset import CLASS, Dataset


def gauss_blobs(centers, n_per_class, scales, seed):
    """Isotropic-per-coordinate Gaussian clusters, one class per center.

    centers: (R, d) array; scales: scalar or length-d per-coordinate stds.
    """
    centers = np.asarray(centers, dtype=float)
    rng = np.random.default_rng(seed)
    scales = np.broadcast_to(np.asarray(scales, dtype=float), (centers.shape[1],))
    feats, labs = [], []
    for r, center in enumerate(centers, start=1):
        feats.append(center + rng.normal(size=(n_per_class, len(center))) * scales)
        labs.append(np.full(n_per_class, r))
    return Dataset(
        features=np.vstack(feats), labels=np.concatenate(labs).astype(int), kind=CLASS
    )


def anisotropic_blobs(n_per_class, d, seed, separation=2.0, noise_scale=10.0):
    """Two classes split along coordinate 0 at unit noise; the remaining
    coordinates are pure noise at ``noise_scale``, swamping Euclidean
    distances."""
    centers = np.zeros((2, d))
    centers[0, 0] = separation
    centers[1, 0] = -separation
    scales = np.full(d, noise_scale)
    scales[0] = 1.0
    return gauss_blobs(centers, n_per_class, scales, seed)
