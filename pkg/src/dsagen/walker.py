"""Boundary-dense dataset generation by damping-driven directed walks.

Pipeline: draw initialization points inside the unclassified polytope,
pair every AC-infeasible draw with a feasible counterpart (reactive-limit
re-solve, then nonlinear projection), then walk each feasible point toward
the security boundary using the sensitivity of the least-damped mode.  On
entering the high-information band the walk stores the point, scans its
one-megawatt neighborhood, and continues along the single most sensitive
dispatch dimension.  A final pass re-checks feasibility of every stored
band point and re-projects the violating ones.

Only generator active-power coordinates move during a walk; voltage
setpoints and loads stay frozen, and dispatch changes are absorbed by the
slack machine through the power flow.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import acproj
from .errors import ProjectionError
from .netmodel import NetworkModel, OperatingPoint, from_vector
from .powerflow import check_feasibility, solve_pf
from .relaxation.polytope import Polytope, hit_and_run
from .smallsignal import DynamicsSet, damping_sensitivity, try_zeta

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SecuritySpec:
    """Boundary location and band half-width, both in damping-ratio units."""

    gamma: float = 0.03
    beta: float = 0.0025

    def __post_init__(self):
        if not (0.0 < self.beta < self.gamma):
            raise ValueError("need 0 < beta < gamma")

    def distance(self, zeta: float) -> float:
        return abs(zeta - self.gamma)

    def in_band(self, zeta) -> bool:
        return zeta is not None and \
            self.gamma - self.beta < zeta < self.gamma + self.beta


@dataclass(frozen=True)
class DWConfig:
    """Directed-walk tuning: step tiers, band budgets, dispatch grid."""

    epsilons: tuple = (0.04, 0.03, 0.02, 0.01)  # fraction of each P_max
    distances: tuple = (0.010, 0.005, 0.0025)   # damping-ratio thresholds
    kappa_max: int = 30
    kappa_hic: int = 15
    discretization_mw: float = 1.0
    sensitivity_step: float = 1e-3

    def __post_init__(self):
        e1, e2, e3, e4 = self.epsilons
        if not (e1 >= e2 >= e3 >= e4 > 0):
            raise ValueError("epsilons must be non-increasing and positive")
        d1, d2, d3 = self.distances
        if not (d1 > d2 > d3 > 0):
            raise ValueError("distances must be decreasing and positive")


def distance(zeta: float, spec: SecuritySpec) -> float:
    """Distance of an operating point to the security boundary."""
    return spec.distance(zeta)


def step_size(d: float, gen_p_max_mw: float, config: DWConfig) -> float:
    """Tiered step size in MW for one generator."""
    e1, e2, e3, e4 = config.epsilons
    d1, d2, d3 = config.distances
    if d > d1:
        eps = e1
    elif d > d2:
        eps = e2
    elif d > d3:
        eps = e3
    else:
        eps = e4
    return eps * gen_p_max_mw


@dataclass(frozen=True)
class WalkPoint:
    op: OperatingPoint
    zeta: float
    d: float


@dataclass
class WalkTrace:
    points: list = field(default_factory=list)   # WalkPoint per step
    hic_points: list = field(default_factory=list)  # (op, zeta) inside the band
    termination: str = "step-budget"


class _FlatGradient(Exception):
    pass


def _grid_key(model, op, config):
    mw = op.pg * model.base_mva
    snapped = np.round(mw / config.discretization_mw).astype(int)
    return tuple(snapped.tolist())


def _snap_to_grid(model, op, config):
    step = config.discretization_mw / model.base_mva
    pg = np.round(op.pg / step) * step
    return op.replace_pg(pg)


def _pg_sensitivities(model, dynamics, op, config):
    n = len(op.pg)
    return np.array([
        damping_sensitivity(model, dynamics, op, i, step=config.sensitivity_step)
        for i in range(n)
    ])


def dw_step(model: NetworkModel, dynamics: DynamicsSet, op: OperatingPoint,
            zeta: float, spec: SecuritySpec, config: DWConfig,
            sens: np.ndarray | None = None) -> OperatingPoint:
    """One steepest-descent step on d = |zeta - gamma| over dispatch coords.

    The gradient is normalized in the infinity norm so that the most
    sensitive generator moves by exactly its tier step; every coordinate is
    clipped to the machine limits.  Raises when the gradient vanishes.
    """
    if sens is None:
        sens = _pg_sensitivities(model, dynamics, op, config)
    grad = np.sign(zeta - spec.gamma) * sens  # gradient of |zeta - gamma|
    gmax = np.max(np.abs(grad))
    if gmax == 0.0 or not np.isfinite(gmax):
        raise _FlatGradient
    direction = grad / gmax
    d = spec.distance(zeta)
    imap = model.input_index_map()
    pg = op.pg.copy()
    for i, gi in enumerate(imap.pg_gens):
        g = model.generators[gi]
        alpha_mw = step_size(d, g.p_max * model.base_mva, config)
        pg[i] -= alpha_mw / model.base_mva * direction[i]
        pg[i] = np.clip(pg[i], g.p_min, g.p_max)
    return op.replace_pg(pg)


def directed_walk(model: NetworkModel, dynamics: DynamicsSet,
                  op0: OperatingPoint, spec: SecuritySpec,
                  config: DWConfig) -> WalkTrace:
    """Walk from a feasible initialization point toward the boundary.

    Terminates on entering (and scanning) the high-information band, on the
    step budget, on power-flow divergence, or on a flat gradient.
    """
    trace = WalkTrace()
    op = op0
    seen = set()
    for _step in range(config.kappa_max + 1):
        state, zeta = try_zeta(model, dynamics, op)
        if zeta is None:
            trace.termination = "pf-divergence"
            return trace
        trace.points.append(WalkPoint(op=op, zeta=zeta, d=spec.distance(zeta)))
        if spec.in_band(zeta):
            _scan_band(model, dynamics, op, zeta, spec, config, trace, seen)
            trace.termination = "entered-HIC-and-scanned"
            return trace
        if _step == config.kappa_max:
            break
        try:
            op = dw_step(model, dynamics, op, zeta, spec, config)
        except _FlatGradient:
            trace.termination = "flat-gradient"
            return trace
    trace.termination = "step-budget"
    return trace


def _store_band_point(model, op, zeta, config, trace, seen) -> bool:
    key = _grid_key(model, op, config)
    if key in seen:
        return False
    seen.add(key)
    trace.hic_points.append((op, zeta))
    return True


def _scan_band(model, dynamics, op, zeta, spec, config, trace, seen):
    """Band protocol: store, scan 1-MW neighbors, ride one dimension."""
    op = _snap_to_grid(model, op, config)
    state, zeta = try_zeta(model, dynamics, op)
    if not spec.in_band(zeta):
        # snapping nudged the point out; keep the unsnapped entry point
        return
    _store_band_point(model, op, zeta, config, trace, seen)

    imap = model.input_index_map()
    step_pu = config.discretization_mw / model.base_mva
    for i, gi in enumerate(imap.pg_gens):
        g = model.generators[gi]
        for sgn in (+1.0, -1.0):
            pg = op.pg.copy()
            pg[i] = np.clip(pg[i] + sgn * step_pu, g.p_min, g.p_max)
            nb = op.replace_pg(pg)
            _, z = try_zeta(model, dynamics, nb)
            if spec.in_band(z):
                _store_band_point(model, nb, z, config, trace, seen)

    # continue along the single most sensitive dimension, minimal step size
    try:
        sens = _pg_sensitivities(model, dynamics, op, config)
    except Exception:
        return
    if not np.any(np.isfinite(sens)) or np.max(np.abs(sens)) == 0.0:
        return
    dim = int(np.argmax(np.abs(sens)))
    gi = imap.pg_gens[dim]
    g = model.generators[gi]
    alpha_mw = step_size(spec.distance(zeta), g.p_max * model.base_mva, config)
    alpha_mw = max(config.discretization_mw,
                   round(alpha_mw / config.discretization_mw)
                   * config.discretization_mw)
    cur, z_cur = op, zeta
    for _ in range(config.kappa_hic):
        # still steepest descent on d: the sign flips as zeta crosses gamma,
        # so the ride hugs the boundary instead of shooting through the band
        direction = -np.sign(z_cur - spec.gamma) * np.sign(sens[dim])
        pg = cur.pg.copy()
        new = pg[dim] + direction * alpha_mw / model.base_mva
        new = np.clip(new, g.p_min, g.p_max)
        if new == pg[dim]:
            return  # pinned at a machine limit
        pg[dim] = new
        cur = cur.replace_pg(pg)
        _, z = try_zeta(model, dynamics, cur)
        if not spec.in_band(z):
            return  # left the band (or flow diverged)
        if not _store_band_point(model, cur, z, config, trace, seen):
            return  # revisited a stored point
        z_cur = z


@dataclass(frozen=True)
class InitSets:
    feasible: tuple    # (op, zeta) pairs
    infeasible: tuple  # (op, zeta-or-None) pairs
    dropped: int


def init_points(model: NetworkModel, polytope: Polytope, n2: int, seed,
                dynamics: DynamicsSet, bounds=None, workers: int = 1) -> InitSets:
    """Draw walk initialization points and their infeasible twins.

    Per polytope sample: plain power flow; if infeasible, the raw point goes
    to the infeasible set and a feasible counterpart is sought by re-solving
    with reactive limits enforced (adjusted voltage setpoints) and, failing
    that, by the nonlinear projection.  Damping is evaluated for every
    convergent point in both sets.
    """
    if n2 < 1:
        raise ValueError("n2 must be >= 1")
    samples = hit_and_run(polytope, n2, seed)

    def _evaluate(idx):
        op = from_vector(model, samples[idx])
        state = solve_pf(model, op)
        if state.converged and check_feasibility(model, state).feasible:
            _, zeta = try_zeta(model, dynamics, op, state)
            return ("feasible", op, zeta), None
        raw_zeta = None
        if state.converged:
            _, raw_zeta = try_zeta(model, dynamics, op, state)
        infeasible_entry = (op, raw_zeta)
        # counterpart 1: enforce reactive limits, adopt the adjusted setpoints
        stq = solve_pf(model, op, enforce_q_limits=True)
        if stq.converged and check_feasibility(model, stq).feasible:
            gen_bus = [model.bus_index(model.generators[gi].bus_id)
                       for gi in op.imap.vg_gens]
            adj = op.replace_vg(stq.v[gen_bus])
            _, zeta = try_zeta(model, dynamics, adj, stq)
            return ("pair", adj, zeta), infeasible_entry
        # counterpart 2: closest AC-feasible dispatch
        res = acproj.project_to_ac(model, bounds, op)
        if res.status != "local-optimal":
            return ("dropped", None, None), infeasible_entry
        _, zeta = try_zeta(model, dynamics, res.x_star, res.state)
        return ("pair", res.x_star, zeta), infeasible_entry

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_evaluate, range(n2)))
    else:
        results = [_evaluate(i) for i in range(n2)]

    feasible, infeasible = [], []
    dropped = 0
    for (kind, op, zeta), inf_entry in results:
        if inf_entry is not None:
            infeasible.append(inf_entry)
        if kind in ("feasible", "pair"):
            feasible.append((op, zeta))
        elif kind == "dropped":
            dropped += 1
    return InitSets(feasible=tuple(feasible), infeasible=tuple(infeasible),
                    dropped=dropped)


@dataclass(frozen=True)
class FinalizedPoint:
    op: OperatingPoint
    zeta: float | None
    feasible: bool
    converged: bool
    source: str  # "dw" | "projection"


def finalize(hic_points, model: NetworkModel, dynamics: DynamicsSet,
             bounds=None, workers: int = 1):
    """Re-check feasibility of band points; pair violators with projections.

    Infeasible band points are kept (their damping stands) and each gains a
    projected feasible counterpart with freshly recomputed damping; the band
    flag downstream is recomputed from the stored values, never assumed.
    Returns (points, dropped_count).
    """
    unique = {}
    for op, zeta in hic_points:
        key = tuple(np.round(op.x, 12).tolist())
        unique.setdefault(key, (op, zeta))
    items = list(unique.values())

    def _finalize_one(item):
        op, zeta = item
        state = solve_pf(model, op)
        out = []
        if not state.converged:
            out.append(FinalizedPoint(op=op, zeta=None, feasible=False,
                                      converged=False, source="dw"))
            return out, 0
        report = check_feasibility(model, state)
        _, zeta_now = try_zeta(model, dynamics, op, state)
        if report.feasible:
            out.append(FinalizedPoint(op=op, zeta=zeta_now, feasible=True,
                                      converged=True, source="dw"))
            return out, 0
        out.append(FinalizedPoint(op=op, zeta=zeta_now, feasible=False,
                                  converged=True, source="dw"))
        res = acproj.project_to_ac(model, bounds, op)
        if res.status != "local-optimal":
            return out, 1
        _, zp = try_zeta(model, dynamics, res.x_star, res.state)
        out.append(FinalizedPoint(op=res.x_star, zeta=zp, feasible=True,
                                  converged=True, source="projection"))
        return out, 0

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_finalize_one, items))
    else:
        results = [_finalize_one(it) for it in items]

    points = []
    dropped = 0
    for out, d in results:
        points.extend(out)
        dropped += d
    return points, dropped


def run_walks(model: NetworkModel, dynamics: DynamicsSet, init: InitSets,
              spec: SecuritySpec, config: DWConfig, workers: int = 1):
    """Directed walks from every feasible initialization point.

    Returns traces ordered by walk index, so worker count never changes the
    output.
    """
    starts = [op for op, _ in init.feasible]

    def _walk(idx):
        return directed_walk(model, dynamics, starts[idx], spec, config)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(_walk, range(len(starts))))
    else:
        traces = [_walk(i) for i in range(len(starts))]
    return traces
