import numpy as np
import pytest

import qsense as q
from qsense.errors import DivergenceError, InitializationError
from qsense.model import Dataset

from helpers import random_orthogonal, random_theta


def _noiseless(theta, n, seed=0, design="gaussian"):
    dgp = q.DataGeneratingProcess(theta_star=theta, design=design,
                                  noise="gaussian", sigma=0.0, seed=seed)
    return q.simulate(dgp, n)


# ---------------------------------------------------------------------------
# spectral initialization
# ---------------------------------------------------------------------------

def test_spectral_init_deterministic():
    rng = np.random.default_rng(0)
    theta = random_theta(rng, 4, 2)
    data = _noiseless(theta, 100)
    a = q.spectral_init(data, 2, q.GaussianNLL(1.0))
    b = q.spectral_init(data, 2, q.GaussianNLL(1.0))
    assert np.array_equal(a, b)


def test_spectral_init_exact_factor_when_k_equals_d():
    # one measurement designed so the weighted mean is itself PSD
    P = np.diag([2.0, 1.0])
    data = Dataset(X=P[None], y=np.array([1.0]), k=2)
    init = q.spectral_init(data, 2, q.GaussianNLL(1.0))
    assert np.allclose(init @ init.T, P, atol=1e-12)


def test_spectral_init_close_to_truth_at_scale():
    rng = np.random.default_rng(1)
    theta = random_theta(rng, 6, 2)
    data = _noiseless(theta, 10_000, seed=3, design="symmetric")
    init = q.spectral_init(data, 2, q.GaussianNLL(1.0))
    M = theta @ theta.T
    err = np.linalg.norm(init @ init.T - M) / np.linalg.norm(M)
    assert err <= 0.1


def test_spectral_init_error_when_uninformative():
    data = Dataset(X=np.random.default_rng(2).standard_normal((5, 3, 3)),
                   y=np.zeros(5), k=1)
    with pytest.raises(InitializationError):
        q.spectral_init(data, 1, q.GaussianNLL(1.0))


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def test_fit_noiseless_exact_recovery():
    rng = np.random.default_rng(3)
    theta = random_theta(rng, 4, 1)
    data = _noiseless(theta, 50, seed=5)
    res = q.fit(data, q.GaussianNLL(1.0),
                q.FitConfig(grad_tol=1e-11, max_iters=50_000), truth=theta)
    assert res.converged
    assert res.neighborhood_radius <= 1e-6
    assert res.final_loss <= 1e-12


def test_fit_warm_start_at_truth_stops_immediately():
    rng = np.random.default_rng(4)
    theta = random_theta(rng, 3, 2)
    data = _noiseless(theta, 30, seed=6)
    res = q.fit(data, q.GaussianNLL(1.0), q.FitConfig(init=theta))
    assert res.converged
    assert res.iterations <= 1


def test_fit_sign_symmetry_k1():
    rng = np.random.default_rng(5)
    theta = random_theta(rng, 4, 1)
    dgp = q.DataGeneratingProcess(theta_star=theta, design="gaussian",
                                  noise="gaussian", sigma=0.3, seed=7)
    data = q.simulate(dgp, 80)
    init = theta + 0.1 * rng.standard_normal((4, 1))
    loss = q.GaussianNLL(0.3)
    r1 = q.fit(data, loss, q.FitConfig(init=init, grad_tol=1e-9), truth=theta)
    r2 = q.fit(data, loss, q.FitConfig(init=-init, grad_tol=1e-9), truth=theta)
    assert r1.neighborhood_radius == pytest.approx(r2.neighborhood_radius, abs=1e-8)


def test_fit_trace_monotone():
    rng = np.random.default_rng(6)
    theta = random_theta(rng, 5, 2)
    dgp = q.DataGeneratingProcess(theta_star=theta, design="gaussian",
                                  noise="gaussian", sigma=0.5, seed=8)
    data = q.simulate(dgp, 200)
    res = q.fit(data, q.GaussianNLL(0.5), q.FitConfig(grad_tol=1e-8))
    assert np.all(np.diff(res.loss_trace) <= 0.0)


def test_fit_rotation_equivariance_of_argmin():
    rng = np.random.default_rng(7)
    theta = random_theta(rng, 4, 2)
    dgp = q.DataGeneratingProcess(theta_star=theta, design="gaussian",
                                  noise="gaussian", sigma=0.2, seed=9)
    data = q.simulate(dgp, 150)
    loss = q.GaussianNLL(0.2)
    init = theta + 0.1 * rng.standard_normal((4, 2))
    U = random_orthogonal(rng, 2)
    r1 = q.fit(data, loss, q.FitConfig(init=init, grad_tol=1e-9))
    r2 = q.fit(data, loss, q.FitConfig(init=init @ U, grad_tol=1e-9))
    assert r1.final_loss == pytest.approx(r2.final_loss, abs=1e-8)


def test_fit_divergence_error_reports_trace():
    rng = np.random.default_rng(8)
    theta = random_theta(rng, 3, 1)
    data = _noiseless(theta, 20, seed=10)
    huge = np.full((3, 1), 1e200)
    with pytest.raises(DivergenceError) as err:
        q.fit(data, q.GaussianNLL(1.0), q.FitConfig(init=huge))
    assert err.value.trace  # the offending values are attached


def test_fit_restarts_keep_best_loss():
    rng = np.random.default_rng(9)
    theta = random_theta(rng, 4, 2)
    dgp = q.DataGeneratingProcess(theta_star=theta, design="gaussian",
                                  noise="gaussian", sigma=0.1, seed=11)
    data = q.simulate(dgp, 120)
    loss = q.GaussianNLL(0.1)
    base = q.fit(data, loss, q.FitConfig(grad_tol=1e-8))
    multi = q.fit(data, loss, q.FitConfig(grad_tol=1e-8, restarts=3, seed=1))
    assert multi.final_loss <= base.final_loss + 1e-12


def test_fit_requires_rank_for_spectral_init():
    data = Dataset(X=np.eye(2)[None], y=np.array([1.0]))
    with pytest.raises(ValueError):
        q.fit(data, q.GaussianNLL(1.0))


def test_fit_logistic_recovers_truth_direction():
    rng = np.random.default_rng(10)
    theta = random_theta(rng, 4, 2)
    dgp = q.DataGeneratingProcess(theta_star=theta, design="gaussian",
                                  noise="bernoulli", seed=12)
    data = q.simulate(dgp, 6000)
    res = q.fit(data, q.Logistic(), q.FitConfig(grad_tol=1e-7), truth=theta)
    assert res.converged
    assert res.neighborhood_radius < 0.3


# ---------------------------------------------------------------------------
# minimizer certificate
# ---------------------------------------------------------------------------

def test_certificate_at_converged_fit():
    rng = np.random.default_rng(11)
    theta = random_theta(rng, 4, 2)
    data = _noiseless(theta, 60, seed=13)
    loss = q.GaussianNLL(1.0)
    res = q.fit(data, loss, q.FitConfig(grad_tol=1e-10, max_iters=50_000),
                truth=theta)
    assert res.converged
    basis = q.horizontal_basis(res.theta0)
    cert = q.minimizer_certificate(data, res.theta0, loss, basis, truth=theta)
    assert cert.grad_norm <= 1e-10
    assert cert.restricted_min_eigenvalue > 0.0
    assert cert.distance_to_truth <= 1e-6


def test_certificate_exact_zero_gradient_at_noiseless_truth():
    rng = np.random.default_rng(12)
    theta = random_theta(rng, 3, 2)
    data = _noiseless(theta, 40, seed=14)
    loss = q.GaussianNLL(1.0)
    basis = q.horizontal_basis(theta)
    cert = q.minimizer_certificate(data, theta, loss, basis)
    assert cert.grad_norm == 0.0
