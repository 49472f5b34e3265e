"""Separating-hyperplane construction and the search-space reduction loop.

Each iteration samples the unclassified polytope, projects the sample onto
the QC-feasible set, and -- when the projection radius is positive -- cuts
away the certified-infeasible half-space.  The loop stops after ``n1``
hyperplanes or when the Monte-Carlo volume estimate fails to drop by more
than ``tau`` for ``eta`` consecutive iterations (iterations that add no cut
leave the volume unchanged and therefore count toward ``eta``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import RelaxationError
from ..netmodel import NetworkModel, from_vector
from .polytope import (HR_BURN_IN, HR_THINNING, Polytope,
                       estimate_volume_ratio, hit_and_run)
from .qc import Bounds, QcProjection

log = logging.getLogger(__name__)

HP_MIN_RADIUS = 1e-6


@dataclass(frozen=True)
class HyperplaneConfig:
    n1: int = 100
    tau: float = 0.05
    eta: int = 30
    volume_samples: int = 1000
    hr_burn_in: int = HR_BURN_IN
    hr_thinning: int = HR_THINNING
    hp_min_radius: float = HP_MIN_RADIUS
    max_failure_fraction: float = 0.2
    seed: int = 0


def make_hyperplane(xhat, xstar, hp_min_radius=HP_MIN_RADIUS):
    """Certificate half-space from a projection pair.

    Returns ``(normal, offset)`` with ``normal = xstar - xhat`` and
    ``offset = normal . xstar``: every x with ``normal . (x - xstar) < 0``
    is certified AC-infeasible; the closed half-space
    ``normal . x >= offset`` is retained.  Returns None when the projection
    moved less than ``hp_min_radius`` (treated as boundary noise).
    """
    xh = np.asarray(getattr(xhat, "x", xhat), float)
    xs = np.asarray(getattr(xstar, "x", xstar), float)
    n = xs - xh
    if np.linalg.norm(n) <= hp_min_radius:
        return None
    return n, float(n @ xs)


@dataclass(frozen=True)
class HyperplaneRun:
    polytope: Polytope
    iterations: int
    n_cuts: int
    n_failures: int
    n_degenerate: int
    stop_reason: str  # "n1" | "eta"
    stop_iteration: int


def separating_hyperplanes(model: NetworkModel, bounds: Bounds,
                           config: HyperplaneConfig = HyperplaneConfig(),
                           projection: QcProjection | None = None) -> HyperplaneRun:
    """Run the full certificate loop over OBBT-tightened bounds."""
    proj = projection if projection is not None else QcProjection(model, bounds)
    poly = Polytope.from_box(bounds.x_lo, bounds.x_hi)
    rng = np.random.default_rng(config.seed)

    consec = 0
    failures = 0
    degenerate = 0
    stop_reason = "n1"
    stop_iteration = config.n1
    k = 0
    while k <= config.n1:
        chain_seed = int(rng.integers(0, 2 ** 63 - 1))
        samples = hit_and_run(poly, config.volume_samples, chain_seed,
                              burn_in=config.hr_burn_in,
                              thinning=config.hr_thinning)
        xhat = from_vector(model, samples[0])
        v_prev = poly.volume_history[-1]
        ratio = 1.0
        try:
            xstar, r = proj.project(xhat)
        except RelaxationError as exc:
            failures += 1
            log.debug("iteration %d: projection failed (%s)", k, exc)
            if k + 1 >= 10 and failures > config.max_failure_fraction * (k + 1):
                raise RelaxationError(
                    f"aborting: {failures} conic failures in {k + 1} "
                    f"iterations (> {config.max_failure_fraction:.0%})")
        else:
            hp = make_hyperplane(xhat, xstar, config.hp_min_radius)
            if hp is not None:
                normal, offset = hp
                ratio = estimate_volume_ratio(poly, -normal, -offset, samples)
                if ratio <= 0.0:
                    degenerate += 1
                    ratio = 1.0
                    log.debug("iteration %d: degenerate cut skipped", k)
                else:
                    poly.add_cut(normal, offset)
        poly.volume_history.append(v_prev * ratio)
        if poly.volume_history[-1] > (1.0 - config.tau) * v_prev:
            consec += 1
        else:
            consec = 0
        if consec >= config.eta:
            stop_reason = "eta"
            stop_iteration = k
            log.info("stopping rule triggered at iteration %d "
                     "(volume flat for %d iterations)", k, config.eta)
            break
        k += 1
    return HyperplaneRun(polytope=poly, iterations=min(k, config.n1) + 1,
                         n_cuts=poly.n_cuts, n_failures=failures,
                         n_degenerate=degenerate, stop_reason=stop_reason,
                         stop_iteration=stop_iteration)
