"""Benchmark dataset generators: Latin-hypercube and importance sampling.

Both sample the raw input box (no search-space reduction), label every draw,
and pair each infeasible draw with its nonlinear projection so the emitted
datasets stay balanced between feasible and infeasible points.  The
importance sampler first locates band-adjacent feasible points with an LHC
pass, fits a multivariate normal to them, and then draws from the fitted
distribution with its covariance shrunk toward the mean.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import acproj
from .dataset import evaluate_and_label, label, renumber
from .errors import InsufficientDataError
from .netmodel import NetworkModel, from_vector, input_box
from .powerflow import check_feasibility, solve_pf
from .smallsignal import DynamicsSet, try_zeta
from .walker import SecuritySpec

log = logging.getLogger(__name__)

MVN_JITTER = 1e-8
MVN_MAX_TRIES = 100


@dataclass(frozen=True)
class MvnSpec:
    """Fitted sampling distribution with covariance shrink factor s."""

    mu: np.ndarray
    sigma: np.ndarray
    s: float = 0.25

    def __post_init__(self):
        if not (0.0 < self.s <= 1.0):
            raise ValueError("need 0 < s <= 1")

    @property
    def sigma_red(self) -> np.ndarray:
        return self.s * self.sigma


def lhc_sample(lo, hi, n: int, seed) -> np.ndarray:
    """Latin-hypercube design on a box: per coordinate, each of the n equal
    strata holds exactly one sample."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    rng = np.random.default_rng(seed)
    d = len(lo)
    u = np.empty((n, d))
    for j in range(d):
        perm = rng.permutation(n)
        u[:, j] = (perm + rng.random(n)) / n
    return lo + u * (hi - lo)


def _evaluate_batch(model, dynamics, ops, spec, source, seed, bounds,
                    workers, start_id=0):
    """Label raw draws; infeasible ones get a projected feasible twin."""

    def _one(op):
        state = solve_pf(model, op)
        if state.converged and check_feasibility(model, state).feasible:
            _, zeta = try_zeta(model, dynamics, op, state)
            raw = (op, state.converged, True, zeta)
            return raw, None, 0
        zeta = None
        if state.converged:
            _, zeta = try_zeta(model, dynamics, op, state)
        raw = (op, state.converged, False, zeta)
        res = acproj.project_to_ac(model, bounds, op)
        if res.status != "local-optimal":
            return raw, None, 1
        _, zp = try_zeta(model, dynamics, res.x_star, res.state)
        return raw, (res.x_star, True, True, zp), 0

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one, ops))
    else:
        results = [_one(op) for op in ops]

    samples = []
    dropped = 0
    i = start_id
    for raw, pair, d in results:
        op, converged, feasible, zeta = raw
        samples.append(label(i, op, converged, feasible, zeta, spec,
                             source, seed))
        i += 1
        if pair is not None:
            pop, pconv, pfeas, pzeta = pair
            samples.append(label(i, pop, pconv, pfeas, pzeta, spec,
                                 "projection", seed))
            i += 1
        dropped += d
    return samples, dropped


def lhc_benchmark(model: NetworkModel, dynamics: DynamicsSet, n: int, seed,
                  spec: SecuritySpec = SecuritySpec(), load_band: float = 0.2,
                  workers: int = 1):
    """Uniform stratified sampling of the whole input space, labeled.

    Returns (samples, dropped_count).
    """
    lo, hi = input_box(model, load_band)
    xs = lhc_sample(lo, hi, n, seed)
    ops = [from_vector(model, x) for x in xs]
    samples, dropped = _evaluate_batch(model, dynamics, ops, spec, "lhc",
                                       seed, None, workers)
    return renumber(samples), dropped


def fit_mvn(points: np.ndarray, s: float = 0.25) -> MvnSpec:
    """Fit the sampling distribution to band-adjacent feasible points."""
    pts = np.atleast_2d(np.asarray(points, float))
    mu = pts.mean(axis=0)
    sigma = np.cov(pts, rowvar=False)
    sigma = np.atleast_2d(sigma) + MVN_JITTER * np.eye(pts.shape[1])
    return MvnSpec(mu=mu, sigma=sigma, s=s)


def mvn_draws(mvn: MvnSpec, lo, hi, n: int, seed):
    """Draw from N(mu, s*Sigma), rejecting points outside the box.

    Returns (draws, n_rejected_for_good).  A draw that fails the box test
    MVN_MAX_TRIES times is abandoned.
    """
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(mvn.sigma_red)
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    out = []
    abandoned = 0
    for _ in range(n):
        for _try in range(MVN_MAX_TRIES):
            x = mvn.mu + chol @ rng.standard_normal(len(mvn.mu))
            if np.all(x >= lo) and np.all(x <= hi):
                out.append(x)
                break
        else:
            abandoned += 1
    return np.array(out), abandoned


def importance_benchmark(model: NetworkModel, dynamics: DynamicsSet,
                         n_init: int, n: int, seed,
                         spec: SecuritySpec = SecuritySpec(), s: float = 0.25,
                         load_band: float = 0.2, workers: int = 1):
    """Importance sampling biased toward the boundary band.

    An LHC pass of ``n_init`` points locates feasible samples inside the
    band; the fitted normal (covariance scaled by ``s``) then drives the
    main pass of ``n`` draws.  Raises when the seed pass finds fewer than
    dim + 1 band points.
    """
    lo, hi = input_box(model, load_band)
    dim = len(lo)
    init_samples, _ = lhc_benchmark(model, dynamics, n_init, seed, spec,
                                    load_band, workers)
    seeds_x = np.array([smp.x for smp in init_samples
                        if smp.feasible and smp.in_hic])
    if seeds_x.shape[0] < dim + 1:
        raise InsufficientDataError(
            f"insufficient HIC seeds for MVN fit: found {seeds_x.shape[0]}, "
            f"need {dim + 1}")
    log.info("importance: %d band seeds from %d initial draws",
             seeds_x.shape[0], n_init)
    mvn = fit_mvn(seeds_x, s=s)
    draws, abandoned = mvn_draws(mvn, lo, hi, n, seed + 1)
    ops = [from_vector(model, x) for x in draws]
    samples, dropped = _evaluate_batch(model, dynamics, ops, spec,
                                       "importance", seed, None, workers)
    return renumber(samples), dropped + abandoned
