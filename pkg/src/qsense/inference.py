"""Horizontal-basis representations, asymptotic covariance, and Wald intervals.

All inference happens in the coordinates of an orthonormal horizontal basis
at the (aligned) truth: estimates and scores become vectors, curvature
becomes a symmetric matrix whose inverse is the asymptotic covariance of
sqrt(n) times the coordinate error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from . import geometry
from .errors import ConfigurationError, DegenerateHessianError
from .model import (GaussianNLL, ISOTROPIC_DESIGNS, euclidean_gradient,
                    predictions, sample_design, symmetrized)

# Absolute eigenvalue floor below which restricted curvature is treated as
# singular (the vertical-direction pathology).
EIG_FLOOR = 1e-10


def represent(M, basis):
    """Coordinates <M, e_i> of a matrix in the horizontal basis."""
    M = np.asarray(M, dtype=float)
    if M.shape != basis.anchor.shape:
        raise ValueError("matrix shape does not match the basis anchor")
    return np.einsum("mik,ik->m", basis.elements, M)


def reconstruct(coords, basis):
    """Matrix sum_i coords_i e_i (the basis-projection of a represented matrix)."""
    return np.einsum("m,mik->ik", np.asarray(coords, dtype=float),
                     basis.elements)


def restricted_score(dataset, theta_star, basis, loss):
    """Representation of the empirical-loss gradient at theta_star."""
    return represent(euclidean_gradient(dataset, theta_star, loss), basis)


def _design_weights(dataset, theta_star, basis, loss):
    """Shared pieces: per-sample pair inner products and loss derivatives."""
    theta_star = np.asarray(theta_star, dtype=float)
    F = symmetrized(dataset)
    B = np.einsum("nij,jk->nik", F, theta_star)
    A = np.einsum("nik,mik->nm", B, basis.elements)
    z = predictions(dataset, theta_star)
    return F, A, z


def restricted_hessian(dataset, theta_star, basis, loss):
    """Empirical curvature matrix H_ij = <e_i, hess e_j> in the basis."""
    F, A, z = _design_weights(dataset, theta_star, basis, loss)
    d1 = loss.d1(z, dataset.y)
    d2 = loss.d2(z, dataset.y)
    n = dataset.n
    term1 = (A * d2[:, None]).T @ A / n
    Sbar = np.einsum("n,nij->ij", d1, F) / n
    SE = np.einsum("ij,mjk->mik", Sbar, basis.elements)
    term2 = np.einsum("mik,lik->ml", basis.elements, SE)
    H = term1 + term2
    return 0.5 * (H + H.T)


def per_sample_scores(dataset, theta_star, basis, loss):
    """(n, d') matrix whose rows represent each sample's loss gradient."""
    _, A, z = _design_weights(dataset, theta_star, basis, loss)
    d1 = loss.d1(z, dataset.y)
    return A * d1[:, None]


def restricted_population_hessian(dgp, theta_star, basis, loss,
                                  n_mc=None, batch=65536):
    """Population curvature in the basis coordinates.

    Closed form for isotropic entrywise-iid designs with the Gaussian loss
    (constant conditional curvature 1/sigma^2); otherwise a Monte Carlo
    average of mu'(z*) a a^T over n_mc fresh design draws.  Passing n_mc
    forces the Monte Carlo route even when the closed form exists.
    """
    theta_star = np.asarray(theta_star, dtype=float)
    E = basis.elements
    closed = dgp.design in ISOTROPIC_DESIGNS and isinstance(loss, GaussianNLL)
    if closed and n_mc is None:
        C = np.einsum("ij,mkj->mik", theta_star, E) \
            + np.einsum("mij,kj->mik", E, theta_star)
        H = np.einsum("mik,lik->ml", C, C) / loss.sigma**2
        return 0.5 * (H + H.T)
    if n_mc is None:
        raise ConfigurationError(
            "no closed form for this design/loss; supply a Monte Carlo "
            "budget n_mc")
    rng = dgp.rng(0x9E5)
    m = E.shape[0]
    H = np.zeros((m, m))
    M = theta_star @ theta_star.T
    remaining = int(n_mc)
    while remaining > 0:
        nb = min(batch, remaining)
        X = sample_design(dgp.design, rng, nb, dgp.d)
        F = X + X.transpose(0, 2, 1)
        z = np.einsum("nij,ij->n", X, M)
        mu1 = loss.conditional_moments(z)[1]
        B = np.einsum("nij,jk->nik", F, theta_star)
        A = np.einsum("nik,mik->nm", B, E)
        H += (A * mu1[:, None]).T @ A
        remaining -= nb
    H /= n_mc
    return 0.5 * (H + H.T)


@dataclass
class RestrictedRepresentation:
    """Everything inference needs, in one basis: coordinates and curvature.

    ``phi0`` represents the estimate after aligning it onto the basis anchor
    (equivalently: the anchor's coordinates plus the represented aligned
    chord), so it does not depend on which orbit representative the
    optimizer happened to return.
    """

    basis: object
    phi_star: np.ndarray
    phi0: np.ndarray
    score: np.ndarray
    hessian: np.ndarray
    population_hessian: np.ndarray | None = None

    def to_json_dict(self):
        anchor = self.basis.anchor
        digest = hash(anchor.tobytes())
        return {
            "basis_tag": self.basis.tag,
            "basis_anchor_hash": f"{digest & 0xFFFFFFFFFFFFFFFF:016x}",
            "phi_star": self.phi_star.tolist(),
            "phi0": self.phi0.tolist(),
            "score": self.score.tolist(),
            "hessian": self.hessian.tolist(),
            "population_hessian":
                None if self.population_hessian is None
                else self.population_hessian.tolist(),
        }


def restricted_representation(dataset, theta_star, theta0, basis, loss,
                              population_hessian=None):
    """Bundle phi*, phi0, the restricted score and curvature at the truth."""
    theta_star = np.asarray(theta_star, dtype=float)
    chord = geometry.log_map(theta_star, theta0)
    phi_star = represent(theta_star, basis)
    return RestrictedRepresentation(
        basis=basis,
        phi_star=phi_star,
        phi0=phi_star + represent(chord, basis),
        score=restricted_score(dataset, theta_star, basis, loss),
        hessian=restricted_hessian(dataset, theta_star, basis, loss),
        population_hessian=population_hessian)


@dataclass
class CovarianceEstimate:
    inverse_hessian: np.ndarray
    condition_number: float
    residual: float
    sandwich: np.ndarray | None = None


def asymptotic_covariance(hstar, scores=None):
    """Invert the restricted curvature; optionally add a sandwich estimate.

    Raises DegenerateHessianError when the smallest eigenvalue is at or
    below the floor, which is what happens if a loss-invariant (vertical)
    direction leaks into the basis.  ``scores`` is an optional (n, d')
    matrix of per-sample score representations for the sandwich
    Hinv Cov(score) Hinv (useful under misspecification).
    """
    hstar = np.asarray(hstar, dtype=float)
    lam, V = np.linalg.eigh(0.5 * (hstar + hstar.T))
    if lam[0] <= EIG_FLOOR:
        raise DegenerateHessianError(
            f"restricted curvature has minimum eigenvalue {lam[0]:.3e}; "
            "a rotation-invariant direction is present in the basis")
    inv = (V / lam[None, :]) @ V.T
    inv = 0.5 * (inv + inv.T)
    residual = float(np.linalg.norm(hstar @ inv - np.eye(len(lam))))
    sandwich = None
    if scores is not None:
        scores = np.asarray(scores, dtype=float)
        centered = scores - scores.mean(axis=0, keepdims=True)
        cov = centered.T @ centered / scores.shape[0]
        sandwich = inv @ cov @ inv
    return CovarianceEstimate(inverse_hessian=inv,
                              condition_number=float(lam[-1] / lam[0]),
                              residual=residual,
                              sandwich=sandwich)


def sqrtm_spd(H, floor=EIG_FLOOR):
    """Symmetric square root of an SPD matrix via eigendecomposition."""
    H = np.asarray(H, dtype=float)
    lam, V = np.linalg.eigh(0.5 * (H + H.T))
    if lam[0] <= floor:
        raise DegenerateHessianError(
            f"matrix is not positive definite (min eigenvalue {lam[0]:.3e})")
    return (V * np.sqrt(lam)[None, :]) @ V.T


def standardize(phi0, phi_star, hstar, n):
    """Whitened coordinate error sqrt(n) H^(1/2) (phi0 - phi_star)."""
    root = sqrtm_spd(hstar)
    diff = np.asarray(phi0, dtype=float) - np.asarray(phi_star, dtype=float)
    return np.sqrt(n) * (root @ diff)


@dataclass
class ConfidenceReport:
    level: float
    z_crit: float
    lower: np.ndarray
    upper: np.ndarray
    half_width: np.ndarray
    standardized: np.ndarray | None = None
    covers: np.ndarray | None = None

    def to_json_dict(self):
        out = {
            "level": self.level,
            "z_crit": self.z_crit,
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "half_width": self.half_width.tolist(),
        }
        if self.standardized is not None:
            out["standardized"] = self.standardized.tolist()
        if self.covers is not None:
            out["covers"] = [bool(b) for b in self.covers]
        return out


def wald_intervals(phi0, hstar, n, alpha, phi_star=None):
    """Per-coordinate (1 - alpha) intervals phi0_i +/- z sqrt(Hinv_ii / n).

    With ``phi_star`` supplied, also records the whitened error vector and
    the per-coordinate coverage indicators.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must lie in (0, 1)")
    phi0 = np.asarray(phi0, dtype=float)
    cov = asymptotic_covariance(hstar)
    z_crit = float(ndtri(1.0 - alpha / 2.0))
    half = z_crit * np.sqrt(np.diag(cov.inverse_hessian) / n)
    report = ConfidenceReport(level=1.0 - alpha, z_crit=z_crit,
                              lower=phi0 - half, upper=phi0 + half,
                              half_width=half)
    if phi_star is not None:
        phi_star = np.asarray(phi_star, dtype=float)
        report.standardized = standardize(phi0, phi_star, hstar, n)
        report.covers = (report.lower <= phi_star) & (phi_star <= report.upper)
    return report


# ---------------------------------------------------------------------------
# Rotation invariance audit
# ---------------------------------------------------------------------------

def _single_sample_objects(theta, basis, X, y, loss):
    """phi-style representations of one sample's gradient and curvatures."""
    theta = np.asarray(theta, dtype=float)
    F = X + X.T
    B = F @ theta
    a = np.einsum("mik,ik->m", basis.elements, B)
    z = float(np.sum(X * (theta @ theta.T)))
    d1 = float(loss.d1(z, y))
    d2 = float(loss.d2(z, y))
    mu1 = float(loss.conditional_moments(z)[1])
    score = d1 * a
    E = basis.elements
    FE = np.einsum("ij,mjk->mik", F, E)
    pair = np.einsum("mik,lik->ml", E, FE)
    hess = d2 * np.outer(a, a) + d1 * pair
    # population single-sample curvature: conditional mean kills the score term
    hess_pop = mu1 * np.outer(a, a)
    return score, hess, hess_pop


@dataclass
class InvarianceAudit:
    discrepancies: dict
    max_discrepancy: float

    def to_json_dict(self):
        return {"discrepancies": self.discrepancies,
                "max_discrepancy": self.max_discrepancy}


def invariance_audit(theta_star, U, sample, loss, theta0=None, basis=None):
    """Check that representations do not depend on the orbit representative.

    Computes phi/score/curvature objects in a basis at theta_star and again
    in the pushed-forward basis at theta_star U (with the estimate point
    rotated the same way) and reports the largest absolute discrepancy.
    ``theta0`` defaults to a deterministic offset of theta_star.
    """
    theta_star = np.asarray(theta_star, dtype=float)
    U = np.asarray(U, dtype=float)
    X, y = sample
    X = np.asarray(X, dtype=float)
    if theta0 is None:
        probe = np.ones_like(theta_star)
        probe[0, 0] += 1.0
        probe /= np.linalg.norm(probe)
        theta0 = theta_star + 0.1 * np.linalg.norm(theta_star) * probe
    theta0 = np.asarray(theta0, dtype=float)
    if basis is None:
        basis = geometry.horizontal_basis(theta_star)
    rotated = geometry.rotate_basis(basis, U)

    phi_star = represent(theta_star, basis)
    phi0 = represent(theta0, basis)
    score, hess, hess_pop = _single_sample_objects(theta_star, basis, X, y, loss)

    phi_star_r = represent(theta_star @ U, rotated)
    phi0_r = represent(theta0 @ U, rotated)
    score_r, hess_r, hess_pop_r = _single_sample_objects(
        theta_star @ U, rotated, X, y, loss)

    disc = {
        "phi_star": float(np.max(np.abs(phi_star - phi_star_r))),
        "phi0": float(np.max(np.abs(phi0 - phi0_r))),
        "score": float(np.max(np.abs(score - score_r))),
        "hessian": float(np.max(np.abs(hess - hess_r))),
        "population_hessian": float(np.max(np.abs(hess_pop - hess_pop_r))),
    }
    return InvarianceAudit(discrepancies=disc,
                           max_discrepancy=max(disc.values()))
