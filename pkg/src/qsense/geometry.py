"""Geometry of the rank-k factor space modulo right-multiplication by O(k).

The loss depends on theta only through theta theta^T, so factors that differ
by an orthogonal k x k rotation are indistinguishable.  Directions of the
form theta A with A skew-symmetric ("vertical") are collapsed by that
symmetry; their Frobenius-orthogonal complement ("horizontal") is where
estimation error lives.  This module provides the skew basis, the two
projections, orthonormal horizontal bases, Procrustes alignment, the
induced distance, the aligned-chord log map, and the injectivity radius
(the smallest singular value of the anchor factor).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFactorError, OutOfInjectivityError

# Relative singular-value cutoff below which a factor is treated as rank
# deficient by the projection solvers.
RANK_RTOL = 1e-10

# Gram-Schmidt drop tolerance for horizontal basis construction.
GS_DROP_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class SkewBasis:
    """Orthonormal basis of k x k skew-symmetric matrices, (m, k, k)."""

    k: int
    elements: np.ndarray

    @property
    def m(self):
        return self.elements.shape[0]


@dataclass(frozen=True, eq=False)
class HorizontalBasis:
    """Orthonormal basis of the horizontal space at ``anchor``.

    ``elements`` is (m, d, k) with m = d k - k (k - 1) / 2; each element is
    Frobenius-orthogonal to every vertical direction at the anchor.
    ``tag`` records the deterministic construction used.
    """

    anchor: np.ndarray
    elements: np.ndarray
    tag: str = "lex"

    @property
    def m(self):
        return self.elements.shape[0]

    def to_json_dict(self):
        return {
            "tag": self.tag,
            "anchor": self.anchor.tolist(),
            "elements": self.elements.tolist(),
        }


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    """Optimal rotation of theta_a onto theta_b and the residual distance."""

    rotation: np.ndarray
    distance: float
    aligned: np.ndarray
    degenerate: bool = False


def horizontal_dim(d, k):
    """Dimension of the horizontal space: d k - k (k - 1) / 2."""
    return d * k - (k * (k - 1)) // 2


def skew_basis(k):
    """Canonical orthonormal skew basis (E_ij - E_ji) / sqrt(2), i < j."""
    if k < 1:
        raise ValueError("k must be at least 1")
    m = (k * (k - 1)) // 2
    elements = np.zeros((m, k, k))
    idx = 0
    s = 1.0 / np.sqrt(2.0)
    for i in range(k):
        for j in range(i + 1, k):
            elements[idx, i, j] = s
            elements[idx, j, i] = -s
            idx += 1
    return SkewBasis(k=k, elements=elements)


def _check_full_rank(theta):
    sv = np.linalg.svd(theta, compute_uv=False)
    if sv[-1] <= RANK_RTOL * sv[0]:
        raise DegenerateFactorError(
            f"factor is numerically rank deficient (sv ratio {sv[-1] / sv[0]:.2e})")
    return sv


def vertical_project(theta, Z):
    """Orthogonal projection of Z onto the vertical space {theta A, A skew}.

    The minimizing skew A solves M A + A M = theta^T Z - Z^T theta with
    M = theta^T theta; solved in the eigenbasis of M, where the entrywise
    denominators lambda_i + lambda_j are bounded below by twice the squared
    smallest singular value of theta.
    """
    theta = np.asarray(theta, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Z.shape != theta.shape:
        raise ValueError("Z must match the factor shape")
    _check_full_rank(theta)
    k = theta.shape[1]
    if k == 1:
        return np.zeros_like(Z)
    M = theta.T @ theta
    lam, Q = np.linalg.eigh(M)
    S = theta.T @ Z
    S = S - S.T
    St = Q.T @ S @ Q
    At = St / (lam[:, None] + lam[None, :])
    A = Q @ At @ Q.T
    return theta @ A


def horizontal_project(theta, Z):
    """Projection onto the orthogonal complement of the vertical space."""
    Z = np.asarray(Z, dtype=float)
    return Z - vertical_project(theta, Z)


def horizontal_basis(theta, order="lex"):
    """Deterministic orthonormal basis of the horizontal space at theta.

    Projects the canonical d x k unit matrices (in lexicographic or reverse
    lexicographic order) onto the horizontal space and orthonormalizes by
    modified Gram-Schmidt, dropping directions with residual norm below
    ``GS_DROP_TOL``.
    """
    theta = np.asarray(theta, dtype=float)
    d, k = theta.shape
    target = horizontal_dim(d, k)
    indices = [(i, j) for i in range(d) for j in range(k)]
    if order == "revlex":
        indices = indices[::-1]
    elif order != "lex":
        raise ValueError(f"unknown basis order {order!r}")
    kept = []
    for (i, j) in indices:
        E = np.zeros((d, k))
        E[i, j] = 1.0
        v = horizontal_project(theta, E)
        # two orthogonalization passes keep the Gram matrix at ~1e-15
        for _ in range(2):
            for u in kept:
                v = v - np.sum(u * v) * u
        norm = np.linalg.norm(v)
        if norm > GS_DROP_TOL:
            kept.append(v / norm)
    if len(kept) != target:
        raise DegenerateFactorError(
            f"horizontal basis construction found {len(kept)} directions, "
            f"expected {target}")
    return HorizontalBasis(anchor=theta, elements=np.array(kept), tag=order)


def rotate_basis(basis, U):
    """Push a horizontal basis at theta forward to one at theta U."""
    U = np.asarray(U, dtype=float)
    k = basis.anchor.shape[1]
    if U.shape != (k, k) or np.linalg.norm(U.T @ U - np.eye(k)) > 1e-10:
        raise ValueError("U must be a k x k orthogonal matrix")
    return HorizontalBasis(anchor=basis.anchor @ U,
                           elements=basis.elements @ U,
                           tag=basis.tag + "@rot")


def align(theta_a, theta_b):
    """Orthogonal Procrustes: the U in O(k) minimizing ||theta_a U - theta_b||_F.

    U = P Q^T from the SVD theta_a^T theta_b = P S Q^T.  Reflections are
    allowed.  A rank-deficient cross product makes the minimizer non-unique;
    the SVD's completion is returned with ``degenerate`` set.
    """
    theta_a = np.asarray(theta_a, dtype=float)
    theta_b = np.asarray(theta_b, dtype=float)
    if theta_a.shape != theta_b.shape:
        raise ValueError("factors must have matching shapes")
    C = theta_a.T @ theta_b
    P, sv, Qt = np.linalg.svd(C)
    U = P @ Qt
    aligned = theta_a @ U
    distance = float(np.linalg.norm(aligned - theta_b))
    scale = max(float(sv[0]), 1.0e-300)
    degenerate = bool(sv[-1] <= 1e-12 * scale)
    return AlignmentResult(rotation=U, distance=distance, aligned=aligned,
                           degenerate=degenerate)


def quotient_distance(theta_a, theta_b):
    """Frobenius distance after optimal O(k) alignment."""
    return align(theta_a, theta_b).distance


def injectivity_radius(theta):
    """Smallest singular value of theta: the radius of the aligned-chord chart."""
    theta = np.asarray(theta, dtype=float)
    sv = np.linalg.svd(theta, compute_uv=False)
    return float(sv[-1])


def log_map(theta_star, theta0):
    """Aligned chord theta0 U - theta_star, with U aligning theta0 to theta_star.

    Valid (injective) only while the quotient distance stays below the
    injectivity radius at theta_star; the chord's Frobenius norm equals the
    quotient distance.  The chord is not exactly horizontal; callers needing
    the projected variant can apply horizontal_project.
    """
    theta_star = np.asarray(theta_star, dtype=float)
    res = align(theta0, theta_star)
    radius = injectivity_radius(theta_star)
    if res.distance >= radius:
        raise OutOfInjectivityError(
            f"distance {res.distance:.6g} is not below the injectivity "
            f"radius {radius:.6g}")
    return res.aligned - theta_star
