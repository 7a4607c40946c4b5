"""Dense symmetric eigendecomposition, PSD projection, and spectral whitening.

All routines work on plain float ndarrays.  Inputs meant to be symmetric are
canonicalized with :func:`symmetrize` (upper triangle authoritative), so the
decompositions below never see an asymmetric residue.

The eigensolver is a cyclic Jacobi iteration.  At the dimensions used by the
trainers and estimators in this package (tens, occasionally a few hundred)
it is simple, numerically exact on symmetric input, and has no dependencies
beyond numpy itself.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

# Sweep convergence target, relative to the Frobenius norm of the input.
_JACOBI_TOL = 1e-12
_MAX_SWEEPS = 100


class EigenDecomp(NamedTuple):
    """Eigenvectors (columns of ``vectors``) with eigenvalues descending."""

    vectors: np.ndarray
    values: np.ndarray


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Return a copy of ``a`` with the upper triangle mirrored onto the lower."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    upper = np.triu(a)
    return upper + np.triu(a, 1).T


def sym_eig(a: np.ndarray) -> EigenDecomp:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Parameters
    ----------
    a : (d, d) array
        Symmetric matrix (upper triangle authoritative).

    Returns
    -------
    EigenDecomp
        ``vectors`` orthogonal, ``values`` sorted descending.  Each column's
        sign is fixed so its largest-magnitude entry is positive, which makes
        the output deterministic up to eigenvalue multiplicity.
    """
    work = symmetrize(a)
    if not np.all(np.isfinite(work)):
        raise ValueError("sym_eig requires finite entries")
    d = work.shape[0]
    vecs = np.eye(d)
    norm = float(np.linalg.norm(work, "fro"))
    if d > 1 and norm > 0.0:
        target = _JACOBI_TOL * norm
        for _ in range(_MAX_SWEEPS):
            off = work.copy()
            np.fill_diagonal(off, 0.0)
            if np.linalg.norm(off, "fro") <= target:
                break
            for p in range(d - 1):
                for q in range(p + 1, d):
                    apq = work[p, q]
                    if apq == 0.0:
                        continue
                    theta = (work[q, q] - work[p, p]) / (2.0 * apq)
                    # tan of the smaller rotation angle zeroing work[p, q]
                    t = 1.0 / (abs(theta) + np.hypot(1.0, theta))
                    if theta < 0.0:
                        t = -t
                    c = 1.0 / np.hypot(1.0, t)
                    s = t * c
                    col_p = work[:, p].copy()
                    col_q = work[:, q].copy()
                    work[:, p] = c * col_p - s * col_q
                    work[:, q] = s * col_p + c * col_q
                    row_p = work[p, :].copy()
                    row_q = work[q, :].copy()
                    work[p, :] = c * row_p - s * row_q
                    work[q, :] = s * row_p + c * row_q
                    work[p, q] = 0.0
                    work[q, p] = 0.0
                    vcol_p = vecs[:, p].copy()
                    vcol_q = vecs[:, q].copy()
                    vecs[:, p] = c * vcol_p - s * vcol_q
                    vecs[:, q] = s * vcol_p + c * vcol_q
        else:
            raise ArithmeticError("Jacobi iteration failed to converge")
    values = np.diag(work).copy()
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vecs = vecs[:, order]
    for j in range(d):
        lead = np.argmax(np.abs(vecs[:, j]))
        if vecs[lead, j] < 0.0:
            vecs[:, j] = -vecs[:, j]
    return EigenDecomp(vectors=vecs, values=values)


def psd_project(a: np.ndarray) -> np.ndarray:
    """Project onto the PSD cone by zeroing negative eigenvalues."""
    vecs, values = sym_eig(a)
    clipped = np.maximum(values, 0.0)
    projected = (vecs * clipped) @ vecs.T
    return symmetrize(projected)


def whitening_transform(g: np.ndarray, rank_tol: float = 1e-9) -> np.ndarray:
    """Linear map ``T`` with ``|T x - T x'|^2 = (x - x')^T G (x - x')``.

    Built from the spectral decomposition ``G = V diag(lam) V^T`` as
    ``T = diag(sqrt(lam)) V^T``.  Eigenvalues below ``rank_tol * lam_max``
    are zeroed, so rank-deficient ``G`` yields a rank-deficient map.

    Raises
    ------
    ValueError
        If ``G`` has an eigenvalue below ``-rank_tol``.
    """
    vecs, values = sym_eig(g)
    if values[-1] < -rank_tol:
        raise ValueError(
            f"matrix is not PSD within tolerance: min eigenvalue {values[-1]:g}"
        )
    cutoff = rank_tol * max(values[0], 0.0)
    kept = np.where(values > cutoff, values, 0.0)
    return np.sqrt(kept)[:, None] * vecs.T


def save_matrix_csv(path, m: np.ndarray) -> None:
    """Write a matrix as row-major CSV with exact (repr) float round-trip."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def load_matrix_csv(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        rows = [
            [float(tok) for tok in line.strip().split(",")]
            for line in fh
            if line.strip()
        ]
    return np.asarray(rows, dtype=float)
