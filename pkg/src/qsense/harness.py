"""Experiment orchestration: replication runs, normality and rate studies.

Every replicate draws its own RNG stream from (seed, tag, index), so results
are bit-identical for a fixed seed regardless of how many workers execute
them.  Aggregation walks records in index order.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import stats
from scipy.special import ndtri

from . import __version__, diagnostics, geometry, inference
from .errors import (ConfigurationError, DivergenceError, HarnessAbort,
                     InitializationError)
from .estimator import FitConfig, fit
from .model import (BOUNDED_XMAX, DataGeneratingProcess, GaussianNLL,
                    ISOTROPIC_DESIGNS, Logistic, ProblemConstants, simulate)

VERSION_STRING = f"qsense-{__version__}"

# Stream tags keep the truth draw, the covariance Monte Carlo, and each
# experiment's replicate streams disjoint.
_TRUTH_TAG = 7
_HSTAR_TAG = 3
_RUN_TAG = 1
_RATE_TAG_BASE = 100

LOSSES = ("gaussian", "logistic")


@dataclass
class ExperimentConfig:
    """Resolved settings for one experiment.  See README for the JSON schema."""

    d: int
    k: int
    loss: str = "gaussian"
    sigma: float = 0.1
    design: str = "gaussian"
    noise: str | None = None
    noise_sigma: float | None = None
    truth: list | None = None
    sigma_min: float = 0.8
    sigma_max: float = 1.2
    n: int | None = None
    n_grid: list | None = None
    replications: int = 200
    alpha: float = 0.05
    delta: float = 0.05
    seed: int = 0
    threads: int = 1
    grad_tol: float = 1e-6
    max_iters: int = 20000
    restarts: int = 0
    hstar_source: str = "auto"
    hstar_mc_factor: int = 50
    basis_order: str = "lex"
    x_max: float | None = None
    n_mc: int = 100_000
    out_dir: str | None = None
    debug_include_vertical: bool = False

    def validate(self):
        if not (1 <= self.k <= self.d):
            raise ConfigurationError("need d >= k >= 1")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if self.replications < 1:
            raise ConfigurationError("replications must be >= 1")
        if not (0.0 < self.alpha < 1.0) or not (0.0 < self.delta < 1.0):
            raise ConfigurationError("alpha and delta must lie in (0, 1)")
        if self.n_grid is not None:
            grid = list(self.n_grid)
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ConfigurationError("n_grid must be strictly increasing")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")
        if self.hstar_source not in ("auto", "closed-form", "monte-carlo"):
            raise ConfigurationError(f"unknown hstar_source {self.hstar_source!r}")
        return self

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "d" not in obj or "k" not in obj:
            raise ConfigurationError("config requires d and k")
        return cls(**obj).validate()

    def to_dict(self):
        # threads is an execution parameter, not part of the experiment
        # identity; excluding it keeps reports byte-identical across worker
        # counts
        out = asdict(self)
        out.pop("threads")
        return out

    def resolved_noise(self):
        if self.noise is not None:
            return self.noise
        return "gaussian" if self.loss == "gaussian" else "bernoulli"

    def resolved_noise_sigma(self):
        return self.sigma if self.noise_sigma is None else self.noise_sigma

    def make_loss(self):
        return GaussianNLL(self.sigma) if self.loss == "gaussian" else Logistic()


def make_truth(config):
    """Ground-truth factor: explicit, or seeded with the configured spectrum."""
    if config.truth is not None:
        theta = np.asarray(config.truth, dtype=float)
        if theta.shape != (config.d, config.k):
            raise ConfigurationError("explicit truth has the wrong shape")
        return theta
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, _TRUTH_TAG)))
    Q, _ = np.linalg.qr(rng.standard_normal((config.d, config.k)))
    W, _ = np.linalg.qr(rng.standard_normal((config.k, config.k)))
    if config.k > 1:
        s = np.linspace(config.sigma_max, config.sigma_min, config.k)
    else:
        s = np.array([config.sigma_max])
    return Q @ np.diag(s) @ W.T


def constants_for(config, theta_star):
    """Conservative certificate constants implied by one experiment setup.

    Design entry bound: exact for the bounded design; a union-bound Gaussian
    envelope over every entry the experiment will draw otherwise.  Loss
    constants follow the analytic derivatives; values are clamped into the
    certificate conventions (>= 1 upstairs, (0, 1] downstairs), which only
    loosens the resulting bounds.
    """
    sv = np.linalg.svd(np.asarray(theta_star, float), compute_uv=False)
    smin, smax = float(sv[-1]), max(1.0, float(sv[0]))
    if config.x_max is not None:
        x_max = config.x_max
    elif config.design == "bounded":
        x_max = BOUNDED_XMAX
    else:
        total = (max(config.n_grid) if config.n_grid else (config.n or 1)) \
            * config.replications * config.d**2
        x_max = max(1.0, math.sqrt(2.0 * math.log(4.0 * total / config.delta)))
    if config.loss == "gaussian":
        noise_scale = config.resolved_noise_sigma()
        inv_var = 1.0 / config.sigma**2
        sigma_eps = max(1.0, noise_scale * inv_var)
        k_ell = max(1.0, inv_var)
        mu_max = max(1.0, inv_var)
        mu0 = min(1.0, inv_var)
    else:
        sigma_eps = 1.0
        k_ell = 1.0
        mu_max = 1.0
        # sigmoid curvature floor at a 3-sigma prediction magnitude
        z_hi = 3.0 * float(np.sum(sv**4)) ** 0.5
        s_hi = 1.0 / (1.0 + math.exp(-z_hi))
        mu0 = min(1.0, max(s_hi * (1.0 - s_hi), 1e-12))
    return ProblemConstants(d=config.d, k=config.k, X_max=x_max,
                            sigma_min=smin, sigma_max=smax,
                            sigma_eps=sigma_eps, mu_max=mu_max,
                            K_ell=k_ell, mu0=mu0, lambda0=1.0).validate()


# ---------------------------------------------------------------------------
# Replication engine
# ---------------------------------------------------------------------------

@dataclass
class RunContext:
    """Everything a replicate worker needs; shipped to workers once."""

    config: ExperimentConfig
    n: int
    stream_tag: int
    theta_star: np.ndarray
    basis: geometry.HorizontalBasis
    phi_star: np.ndarray
    hstar: np.ndarray
    hstar_sqrt: np.ndarray
    half_width: np.ndarray
    hstar_source: str

    def make_dgp(self, r):
        return DataGeneratingProcess(
            theta_star=self.theta_star, design=self.config.design,
            noise=self.config.resolved_noise(),
            sigma=self.config.resolved_noise_sigma(),
            seed=(self.config.seed, self.stream_tag, r))


@dataclass
class ReplicationRecord:
    index: int
    diverged: bool = False
    message: str = ""
    converged: bool = False
    iterations: int = 0
    grad_norm: float = float("nan")
    final_loss: float = float("nan")
    distance: float = float("nan")
    phi0: np.ndarray | None = None
    z: np.ndarray | None = None
    ci_hits: np.ndarray | None = None
    taylor_lhs: float = float("nan")
    taylor_remainder: float = float("nan")
    taylor_ratio: float = float("nan")

    def to_json_dict(self):
        return {
            "index": self.index,
            "diverged": self.diverged,
            "message": self.message,
            "converged": self.converged,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "final_loss": self.final_loss,
            "distance": self.distance,
            "phi0": None if self.phi0 is None else self.phi0.tolist(),
            "z": None if self.z is None else self.z.tolist(),
            "ci_hits": None if self.ci_hits is None
                       else [bool(b) for b in self.ci_hits],
            "taylor_lhs": self.taylor_lhs,
            "taylor_remainder": self.taylor_remainder,
            "taylor_ratio": self.taylor_ratio,
        }


def _replicate(ctx, r):
    loss = ctx.config.make_loss()
    dgp = ctx.make_dgp(r)
    data = simulate(dgp, ctx.n)
    cfg = FitConfig(grad_tol=ctx.config.grad_tol,
                    max_iters=ctx.config.max_iters,
                    restarts=ctx.config.restarts,
                    seed=ctx.config.seed * 1_000_003 + r)
    try:
        res = fit(data, loss, cfg)
    except (DivergenceError, InitializationError) as exc:
        return ReplicationRecord(index=r, diverged=True, message=str(exc))
    al = geometry.align(res.theta0, ctx.theta_star)
    v = al.aligned - ctx.theta_star
    phi0 = ctx.phi_star + inference.represent(v, ctx.basis)
    diff = phi0 - ctx.phi_star
    z = math.sqrt(ctx.n) * (ctx.hstar_sqrt @ diff)
    hits = np.abs(diff) <= ctx.half_width
    try:
        taylor = diagnostics.taylor_residual_check(
            data, ctx.theta_star, res.theta0, ctx.basis, loss)
        t_lhs, t_rem = taylor.lhs, taylor.remainder
        t_ratio = float("nan") if taylor.ratio is None else taylor.ratio
    except geometry.OutOfInjectivityError:
        t_lhs = t_rem = t_ratio = float("nan")
    return ReplicationRecord(
        index=r, converged=res.converged, iterations=res.iterations,
        grad_norm=res.grad_norm, final_loss=res.final_loss,
        distance=al.distance, phi0=phi0, z=z, ci_hits=hits,
        taylor_lhs=t_lhs, taylor_remainder=t_rem, taylor_ratio=t_ratio)


_WORKER_CTX = None


def _init_worker(ctx):
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _worker(r):
    return _replicate(_WORKER_CTX, r)


def _with_debug_vertical(basis):
    """Append a normalized vertical direction to the basis (debug only)."""
    theta = basis.anchor
    k = theta.shape[1]
    if k < 2:
        raise ConfigurationError(
            "debug vertical direction needs k >= 2 (no rotation freedom)")
    A = geometry.skew_basis(k).elements[0]
    vert = theta @ A
    vert = vert / np.linalg.norm(vert)
    elements = np.concatenate([basis.elements, vert[None]], axis=0)
    return geometry.HorizontalBasis(anchor=theta, elements=elements,
                                    tag=basis.tag + "+vertical")


def build_context(config, n, stream_tag=_RUN_TAG):
    """Shared per-experiment state: truth, basis, covariance, intervals."""
    config.validate()
    theta_star = make_truth(config)
    basis = geometry.horizontal_basis(theta_star, order=config.basis_order)
    if config.debug_include_vertical:
        basis = _with_debug_vertical(basis)
    loss = config.make_loss()
    closed_form_ok = (config.design in ISOTROPIC_DESIGNS
                      and isinstance(loss, GaussianNLL))
    source = config.hstar_source
    if source == "auto":
        source = "closed-form" if closed_form_ok else "monte-carlo"
    if source == "closed-form" and not closed_form_ok:
        raise ConfigurationError(
            "closed-form covariance unavailable for this design/loss")
    dgp = DataGeneratingProcess(
        theta_star=theta_star, design=config.design,
        noise=config.resolved_noise(), sigma=config.resolved_noise_sigma(),
        seed=(config.seed, _HSTAR_TAG))
    if source == "closed-form":
        hstar = inference.restricted_population_hessian(dgp, theta_star,
                                                        basis, loss)
    else:
        hstar = inference.restricted_population_hessian(
            dgp, theta_star, basis, loss, n_mc=config.hstar_mc_factor * n)
    cov = inference.asymptotic_covariance(hstar)  # raises if degenerate
    z_crit = float(ndtri(1.0 - config.alpha / 2.0))
    half = z_crit * np.sqrt(np.diag(cov.inverse_hessian) / n)
    return RunContext(config=config, n=n, stream_tag=stream_tag,
                      theta_star=theta_star, basis=basis,
                      phi_star=inference.represent(theta_star, basis),
                      hstar=hstar, hstar_sqrt=inference.sqrtm_spd(hstar),
                      half_width=half, hstar_source=source)


def run_replications(config, n=None, stream_tag=_RUN_TAG, context=None):
    """Fit ``config.replications`` simulated datasets and record each result.

    Records are bit-identical across thread counts for a fixed seed.  More
    than 20% divergent replicates aborts the run.
    """
    if context is None:
        if n is None:
            if config.n is None:
                raise ConfigurationError("config.n is required")
            n = config.n
        context = build_context(config, n, stream_tag)
    R = config.replications
    if config.threads > 1 and R > 1:
        chunk = max(1, R // (config.threads * 4))
        with ProcessPoolExecutor(max_workers=config.threads,
                                 initializer=_init_worker,
                                 initargs=(context,)) as ex:
            records = list(ex.map(_worker, range(R), chunksize=chunk))
    else:
        records = [_replicate(context, r) for r in range(R)]
    records.sort(key=lambda rec: rec.index)
    n_div = sum(rec.diverged for rec in records)
    if n_div > 0.2 * R:
        raise HarnessAbort(
            f"{n_div}/{R} replicates diverged; check the configuration "
            "(loss scale, design, optimizer budget)")
    return records, context


# ---------------------------------------------------------------------------
# Normality experiment
# ---------------------------------------------------------------------------

@dataclass
class NormalityReport:
    n: int
    replications: int
    excluded: int
    hstar_source: str
    coordinate_means: np.ndarray
    coordinate_variances: np.ndarray
    covariance: np.ndarray
    covariance_rel_error: float
    coverage_per_coordinate: np.ndarray
    coverage_rate: float
    ks_distances: np.ndarray
    max_ks_distance: float
    median_distance: float
    max_distance: float
    z_matrix: np.ndarray = field(repr=False, default=None)

    def to_json_dict(self):
        return {
            "n": self.n,
            "replications": self.replications,
            "excluded": self.excluded,
            "hstar_source": self.hstar_source,
            "coordinate_means": self.coordinate_means.tolist(),
            "coordinate_variances": self.coordinate_variances.tolist(),
            "covariance": self.covariance.tolist(),
            "covariance_rel_error": self.covariance_rel_error,
            "coverage_per_coordinate": self.coverage_per_coordinate.tolist(),
            "coverage_rate": self.coverage_rate,
            "ks_distances": self.ks_distances.tolist(),
            "max_ks_distance": self.max_ks_distance,
            "median_distance": self.median_distance,
            "max_distance": self.max_distance,
        }


def normality_experiment(config):
    """Check that whitened coordinate errors behave like standard normals."""
    if config.n is None:
        raise ConfigurationError("normality experiment requires config.n")
    records, context = run_replications(config)
    good = [rec for rec in records if not rec.diverged]
    Z = np.array([rec.z for rec in good])
    hits = np.array([rec.ci_hits for rec in good])
    distances = np.array([rec.distance for rec in good])
    m = Z.shape[1]
    cov = np.cov(Z, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    rel_err = float(np.linalg.norm(cov - np.eye(m)) / math.sqrt(m))
    ks = np.array([stats.kstest(Z[:, j], "norm").statistic for j in range(m)])
    coverage = hits.mean(axis=0)
    return NormalityReport(
        n=context.n, replications=config.replications,
        excluded=len(records) - len(good),
        hstar_source=context.hstar_source,
        coordinate_means=Z.mean(axis=0),
        coordinate_variances=Z.var(axis=0, ddof=1),
        covariance=cov, covariance_rel_error=rel_err,
        coverage_per_coordinate=coverage,
        coverage_rate=float(coverage.mean()),
        ks_distances=ks, max_ks_distance=float(ks.max()),
        median_distance=float(np.median(distances)),
        max_distance=float(np.max(distances)),
        z_matrix=Z)


# ---------------------------------------------------------------------------
# Rate experiment
# ---------------------------------------------------------------------------

@dataclass
class RateReport:
    n_grid: list
    medians: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    slope: float
    intercept: float
    bound_values: np.ndarray
    floor_limited: bool
    excluded: list

    def to_json_dict(self):
        return {
            "n_grid": [int(n) for n in self.n_grid],
            "medians": self.medians.tolist(),
            "q25": self.q25.tolist(),
            "q75": self.q75.tolist(),
            "slope": self.slope,
            "intercept": self.intercept,
            "bound_values": self.bound_values.tolist(),
            "floor_limited": self.floor_limited,
            "excluded": [int(e) for e in self.excluded],
        }


def rate_experiment(config):
    """Median quotient distance against n, with the certificate overlay."""
    if config.n_grid is None or len(config.n_grid) < 4:
        raise ConfigurationError("rate experiment needs an n_grid of >= 4 points")
    grid = [int(n) for n in config.n_grid]
    if grid[-1] < 16 * grid[0]:
        raise ConfigurationError("n_grid must span at least a factor of 16")
    medians, q25, q75, excluded = [], [], [], []
    theta_star = make_truth(config)
    for i, n in enumerate(grid):
        records, _ = run_replications(config, n=n,
                                      stream_tag=_RATE_TAG_BASE + i)
        dist = np.array([rec.distance for rec in records if not rec.diverged])
        excluded.append(config.replications - dist.size)
        medians.append(float(np.median(dist)))
        q25.append(float(np.percentile(dist, 25)))
        q75.append(float(np.percentile(dist, 75)))
    medians = np.array(medians)
    slope, intercept = np.polyfit(np.log(grid), np.log(medians), 1)
    certificate = diagnostics.theory_constants(
        constants_for(config, theta_star), config.delta)
    bounds = np.array([certificate.rate_bound(n) for n in grid])
    floor = (config.resolved_noise() == "gaussian"
             and config.resolved_noise_sigma() == 0.0) \
        or bool(np.all(medians < 1e-6))
    return RateReport(n_grid=grid, medians=medians, q25=np.array(q25),
                      q75=np.array(q75), slope=float(slope),
                      intercept=float(intercept), bound_values=bounds,
                      floor_limited=floor, excluded=excluded)


# ---------------------------------------------------------------------------
# Deterministic serialization helpers
# ---------------------------------------------------------------------------

def report_envelope(config, report_dict, **extra):
    body = {"version": VERSION_STRING, "config": config.to_dict(),
            "report": report_dict}
    body.update(extra)
    return body


def dump_json(obj, path):
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
    return text


def write_matrix_csv(path, header, matrix):
    """CSV with a header row and shortest-round-trip float formatting."""
    lines = [",".join(header)]
    for row in np.atleast_2d(matrix):
        lines.append(",".join(repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def default_threads():
    env = os.environ.get("QSENSE_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError("QSENSE_THREADS must be an integer")
    return 1
