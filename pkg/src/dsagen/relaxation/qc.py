"""Quadratic-convex relaxation of the AC-OPF as a parametrized conic program.

The relaxation lifts voltage products into W variables, encloses the square,
bilinear, cosine and sine terms in convex envelopes over the current variable
bounds, links squared line currents to losses, and keeps the conic flow
inequality.  Three uses share one builder:

- :func:`solve_qc` -- minimize generation cost (or any linear objective),
- :func:`obbt` -- iterated per-variable min/max solves that shrink bounds,
- :func:`closest_qc_projection` -- minimum-distance projection onto the
  relaxed feasible set (the infeasibility-certificate workhorse).

Envelope validity is what makes every downstream certificate sound, so each
envelope here over-approximates its curve on the whole bound interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from ..errors import RelaxationError
from ..netmodel import NetworkModel, OperatingPoint, from_vector, input_box, nominal_point

CONIC_TOL = 1e-6
OBBT_MARGIN = 1e-6  # widen tightened bounds by this much against solver noise

_SOLVER_KW = dict(solver="CLARABEL")


@dataclass(frozen=True)
class Bounds:
    """Variable bounds driving the envelopes: per-bus V, per-line angle,
    plus the input-vector box."""

    v_lo: np.ndarray
    v_hi: np.ndarray
    th_lo: np.ndarray  # per line, angle difference from->to
    th_hi: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray

    def nested_within(self, other: "Bounds", tol=1e-9) -> bool:
        return bool(
            np.all(self.v_lo >= other.v_lo - tol)
            and np.all(self.v_hi <= other.v_hi + tol)
            and np.all(self.th_lo >= other.th_lo - tol)
            and np.all(self.th_hi <= other.th_hi + tol)
            and np.all(self.x_lo >= other.x_lo - tol)
            and np.all(self.x_hi <= other.x_hi + tol)
        )


def initial_bounds(model: NetworkModel, load_band: float = 0.2) -> Bounds:
    x_lo, x_hi = input_box(model, load_band)
    return Bounds(
        v_lo=np.array([b.v_min for b in model.buses]),
        v_hi=np.array([b.v_max for b in model.buses]),
        th_lo=np.array([ln.theta_min for ln in model.lines]),
        th_hi=np.array([ln.theta_max for ln in model.lines]),
        x_lo=x_lo, x_hi=x_hi,
    )


@dataclass(frozen=True)
class RelaxedSolution:
    status: str  # "optimal" | "infeasible" | "numerical-failure"
    x: OperatingPoint | None = None
    objective: float | None = None
    r: float | None = None
    v: np.ndarray | None = None
    theta: np.ndarray | None = None
    w_diag: np.ndarray | None = None
    l: np.ndarray | None = None
    s_from: np.ndarray | None = None
    s_to: np.ndarray | None = None
    pg: np.ndarray | None = None
    qg: np.ndarray | None = None


def _mccormick(z, x, y, xl, xu, yl, yu):
    return [
        z >= xl * y + yl * x - xl * yl,
        z >= xu * y + yu * x - xu * yu,
        z <= xl * y + yu * x - xl * yu,
        z <= xu * y + yl * x - xu * yl,
    ]


class _QcProgram:
    """The QC constraint system over one set of bounds (cvxpy)."""

    def __init__(self, model: NetworkModel, bounds: Bounds):
        self.model = model
        self.bounds = bounds
        n, nl, ng, nd = (model.n_bus, len(model.lines),
                         len(model.generators), len(model.loads))
        imap = model.input_index_map()
        self.imap = imap

        v = cp.Variable(n, name="v")
        th = cp.Variable(n, name="th")
        w = cp.Variable(n, name="w")
        wr = cp.Variable(nl, name="wr")
        wi = cp.Variable(nl, name="wi")
        vv = cp.Variable(nl, name="vv")
        csv_ = cp.Variable(nl, name="cs")
        snv = cp.Variable(nl, name="sn")
        l = cp.Variable(nl, nonneg=True, name="l")
        pf = cp.Variable(nl, name="pf")
        qf = cp.Variable(nl, name="qf")
        pt = cp.Variable(nl, name="pt")
        qt = cp.Variable(nl, name="qt")
        pg = cp.Variable(ng, name="pg")
        qg = cp.Variable(ng, name="qg")
        pd = cp.Variable(nd, name="pd") if nd else None
        qd = cp.Variable(nd, name="qd") if nd else None
        self.vars = dict(v=v, th=th, w=w, wr=wr, wi=wi, l=l, pf=pf, qf=qf,
                         pt=pt, qt=qt, pg=pg, qg=qg, pd=pd, qd=qd)

        con = [th[model.slack_bus] == 0]

        # (3a) + square envelopes for W_kk
        vlo, vhi = bounds.v_lo, bounds.v_hi
        con += [v >= vlo, v <= vhi,
                w >= vlo ** 2, w <= vhi ** 2,
                w >= cp.square(v),
                w <= cp.multiply(vlo + vhi, v) - vlo * vhi]

        # generator and load bounds, and the input-vector box
        con += [pg >= np.array([g.p_min for g in model.generators]),
                pg <= np.array([g.p_max for g in model.generators]),
                qg >= np.array([g.q_min for g in model.generators]),
                qg <= np.array([g.q_max for g in model.generators])]
        xlo, xhi = bounds.x_lo, bounds.x_hi
        pg_ns = cp.hstack([pg[gi] for gi in imap.pg_gens]) \
            if imap.pg_gens else None
        if pg_ns is not None:
            con += [pg_ns >= xlo[imap.sl_pg], pg_ns <= xhi[imap.sl_pg]]
        v_gen = cp.hstack([v[model.bus_index(model.generators[gi].bus_id)]
                           for gi in imap.vg_gens])
        con += [v_gen >= xlo[imap.sl_vg], v_gen <= xhi[imap.sl_vg]]
        if nd:
            con += [pd >= xlo[imap.sl_pd], pd <= xhi[imap.sl_pd],
                    qd >= xlo[imap.sl_qd], qd <= xhi[imap.sl_qd]]

        # per-line constraints
        for e, ln in enumerate(model.lines):
            i = model.bus_index(ln.from_bus)
            j = model.bus_index(ln.to_bus)
            y = 1.0 / ln.z
            g_, b_ = y.real, y.imag
            bc2 = ln.b_charge / 2.0
            tl, tu = bounds.th_lo[e], bounds.th_hi[e]
            dth = th[i] - th[j]
            con += [dth >= tl, dth <= tu]

            if tu - tl < 1e-9:
                con += [csv_[e] == math.cos(tl), snv[e] == math.sin(tl)]
            else:
                # cosine: concave on (-pi/2, pi/2); tangents above, secant below
                for t in (tl, 0.5 * (tl + tu), tu):
                    con += [csv_[e] <= math.cos(t) - math.sin(t) * (dth - t)]
                slope = (math.cos(tu) - math.cos(tl)) / (tu - tl)
                con += [csv_[e] >= math.cos(tl) + slope * (dth - tl)]
                # sine: tangents at +/- tm/2 enclose it on [-tm, tm]
                tm = max(abs(tl), abs(tu), 1e-6)
                c_, s_ = math.cos(tm / 2.0), math.sin(tm / 2.0)
                con += [snv[e] <= c_ * (dth - tm / 2.0) + s_,
                        snv[e] >= c_ * (dth + tm / 2.0) - s_,
                        snv[e] >= math.sin(tl), snv[e] <= math.sin(tu)]
            cs_lo = min(math.cos(tl), math.cos(tu))
            cs_hi = 1.0 if tl < 0.0 < tu else max(math.cos(tl), math.cos(tu))
            con += [csv_[e] >= cs_lo, csv_[e] <= cs_hi]

            # bilinear chains: vv = <v_i v_j>, wr = <vv cs>, wi = <vv sn>
            con += _mccormick(vv[e], v[i], v[j],
                              vlo[i], vhi[i], vlo[j], vhi[j])
            vv_lo, vv_hi = vlo[i] * vlo[j], vhi[i] * vhi[j]
            sn_lo, sn_hi = math.sin(tl), math.sin(tu)
            con += _mccormick(wr[e], vv[e], csv_[e], vv_lo, vv_hi, cs_lo, cs_hi)
            con += _mccormick(wi[e], vv[e], snv[e], vv_lo, vv_hi, sn_lo, sn_hi)

            # (3d) linearized tan coupling of the W off-diagonals
            con += [wi[e] <= math.tan(tu) * wr[e],
                    wi[e] >= math.tan(tl) * wr[e]]

            # (3b)/(3c) flow definitions on the pi model
            con += [pf[e] == g_ * w[i] - g_ * wr[e] - b_ * wi[e],
                    qf[e] == -(b_ + bc2) * w[i] + b_ * wr[e] - g_ * wi[e],
                    pt[e] == g_ * w[j] - g_ * wr[e] + b_ * wi[e],
                    qt[e] == -(b_ + bc2) * w[j] + b_ * wr[e] + g_ * wi[e]]

            # (4d) series loss link and (4e) conic current inequality
            con += [pf[e] + pt[e] == ln.z.real * l[e],
                    qf[e] + qt[e] == ln.z.imag * l[e] - bc2 * (w[i] + w[j])]
            con += [cp.norm(cp.hstack([2 * pf[e], 2 * (qf[e] + bc2 * w[i]),
                                       w[i] - l[e]])) <= w[i] + l[e]]

            # (1c) thermal limits, both ends
            con += [cp.norm(cp.hstack([pf[e], qf[e]])) <= ln.s_max,
                    cp.norm(cp.hstack([pt[e], qt[e]])) <= ln.s_max]

        # (1d) nodal balance
        for k in range(model.n_bus):
            inj = 0
            for gi in model.gens_at_bus(k):
                inj = inj + pg[gi]
            for di in model.loads_at_bus(k):
                inj = inj - pd[di]
            flow = 0
            for e, ln in enumerate(model.lines):
                if model.bus_index(ln.from_bus) == k:
                    flow = flow + pf[e]
                if model.bus_index(ln.to_bus) == k:
                    flow = flow + pt[e]
            bus = model.buses[k]
            con += [inj - bus.g_shunt * w[k] == flow]
            injq = 0
            for gi in model.gens_at_bus(k):
                injq = injq + qg[gi]
            for di in model.loads_at_bus(k):
                injq = injq - qd[di]
            flowq = 0
            for e, ln in enumerate(model.lines):
                if model.bus_index(ln.from_bus) == k:
                    flowq = flowq + qf[e]
                if model.bus_index(ln.to_bus) == k:
                    flowq = flowq + qt[e]
            con += [injq + bus.b_shunt * w[k] == flowq]

        self.constraints = con
        # the input-vector expression in index-map order
        blocks = []
        if imap.pg_gens:
            blocks.append(pg_ns)
        blocks.append(v_gen)
        if nd:
            blocks.append(pd)
            blocks.append(qd)
        self.x_expr = cp.hstack(blocks)

    def solution_point(self) -> OperatingPoint:
        return from_vector(self.model, np.asarray(self.x_expr.value, float))

    def solution(self, status, objective=None, r=None) -> RelaxedSolution:
        V = self.vars
        sf = np.asarray(V["pf"].value) + 1j * np.asarray(V["qf"].value)
        st = np.asarray(V["pt"].value) + 1j * np.asarray(V["qt"].value)
        return RelaxedSolution(
            status=status, x=self.solution_point(), objective=objective, r=r,
            v=np.asarray(V["v"].value), theta=np.asarray(V["th"].value),
            w_diag=np.asarray(V["w"].value), l=np.asarray(V["l"].value),
            s_from=sf, s_to=st,
            pg=np.asarray(V["pg"].value), qg=np.asarray(V["qg"].value))


def _run(problem: cp.Problem) -> str:
    try:
        problem.solve(**_SOLVER_KW)
    except cp.error.SolverError:
        return "numerical-failure"
    if problem.status == cp.OPTIMAL:
        return "optimal"
    if problem.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return "infeasible"
    return "numerical-failure"


def solve_qc(model: NetworkModel, bounds: Bounds | None = None,
             objective: str = "cost", c: np.ndarray | None = None,
             fix_loads: OperatingPoint | None = None) -> RelaxedSolution:
    """Solve the QC relaxation with a cost or custom linear objective.

    ``objective="cost"`` minimizes the quadratic generation cost (loads fixed
    at ``fix_loads`` or the scaled nominal point).  ``objective="linear"``
    minimizes ``c @ x`` over the input vector.
    """
    if bounds is None:
        bounds = initial_bounds(model)
    prog = _QcProgram(model, bounds)
    con = list(prog.constraints)
    if objective == "cost":
        anchor = fix_loads if fix_loads is not None else nominal_point(model)
        if len(model.loads):
            con += [prog.vars["pd"] == anchor.pd, prog.vars["qd"] == anchor.qd]
        base = model.base_mva
        pg = prog.vars["pg"]
        terms = []
        for gi, g in enumerate(model.generators):
            c2, c1, c0 = g.cost
            terms.append(c2 * cp.square(pg[gi] * base) + c1 * pg[gi] * base + c0)
        obj = cp.Minimize(cp.sum(cp.hstack(terms)))
    elif objective == "linear":
        obj = cp.Minimize(cp.sum(cp.multiply(np.asarray(c, float), prog.x_expr)))
    else:
        raise ValueError(f"unknown objective {objective!r}")
    problem = cp.Problem(obj, con)
    status = _run(problem)
    if status != "optimal":
        return RelaxedSolution(status=status)
    return prog.solution("optimal", objective=float(problem.value))


class QcProjection:
    """Reusable minimum-distance projection onto the QC-feasible set.

    Built once per bounds; solving for a new target only updates a parameter,
    so Algorithm-1 style loops stay fast.
    """

    def __init__(self, model: NetworkModel, bounds: Bounds):
        self.model = model
        self.prog = _QcProgram(model, bounds)
        dim = model.input_index_map().dimension
        self.xhat = cp.Parameter(dim, name="xhat")
        r = cp.Variable(nonneg=True, name="r")
        con = list(self.prog.constraints) + [
            cp.norm(self.prog.x_expr - self.xhat) <= r]
        self.problem = cp.Problem(cp.Minimize(r), con)

    def project(self, xhat: OperatingPoint):
        """Returns (x_star, R).  Raises RelaxationError on solver failure."""
        self.xhat.value = np.asarray(xhat.x, float)
        status = _run(self.problem)
        if status != "optimal":
            raise RelaxationError(f"QC projection failed: {status}")
        x_star = self.prog.solution_point()
        r = float(np.linalg.norm(x_star.x - xhat.x))
        return x_star, r


def closest_qc_projection(model: NetworkModel, bounds: Bounds,
                          xhat: OperatingPoint):
    """One-shot projection; see :class:`QcProjection` for the loop variant."""
    return QcProjection(model, bounds).project(xhat)


def obbt(model: NetworkModel, bounds: Bounds, iterations: int = 3) -> Bounds:
    """Optimization-based bound tightening under the QC relaxation.

    Per iteration, each bus voltage magnitude, line angle difference, and
    input-vector coordinate is minimized and maximized subject to the
    relaxation; the optima (widened by a small sound margin) become the new
    bounds.  Output is always nested within the input.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    n, nl = model.n_bus, len(model.lines)
    imap = model.input_index_map()
    dim = imap.dimension

    for _ in range(iterations):
        prog = _QcProgram(model, bounds)
        c_v = cp.Parameter(n, name="c_v")
        c_th = cp.Parameter(n, name="c_th")
        c_x = cp.Parameter(dim, name="c_x")
        c_v.value = np.zeros(n)
        c_th.value = np.zeros(n)
        c_x.value = np.zeros(dim)
        obj = cp.Minimize(c_v @ prog.vars["v"] + c_th @ prog.vars["th"]
                          + c_x @ prog.x_expr)
        problem = cp.Problem(obj, prog.constraints)

        def _extremes(set_coeff, clear_coeff):
            set_coeff(+1.0)
            st = _run(problem)
            if st == "infeasible":
                raise RelaxationError("relaxation infeasible under bounds")
            lo = problem.value if st == "optimal" else None
            set_coeff(-1.0)
            st = _run(problem)
            if st == "infeasible":
                raise RelaxationError("relaxation infeasible under bounds")
            hi = -problem.value if st == "optimal" else None
            clear_coeff()
            return lo, hi

        new = dict(v_lo=bounds.v_lo.copy(), v_hi=bounds.v_hi.copy(),
                   th_lo=bounds.th_lo.copy(), th_hi=bounds.th_hi.copy(),
                   x_lo=bounds.x_lo.copy(), x_hi=bounds.x_hi.copy())

        def _apply(lo_arr, hi_arr, idx, lo, hi):
            if lo is not None:
                lo_arr[idx] = np.clip(lo - OBBT_MARGIN, lo_arr[idx], hi_arr[idx])
            if hi is not None:
                hi_arr[idx] = np.clip(hi + OBBT_MARGIN, lo_arr[idx], hi_arr[idx])

        for k in range(n):
            def set_k(s, k=k):
                vec = np.zeros(n); vec[k] = s
                c_v.value = vec
            lo, hi = _extremes(set_k, lambda: c_v.__setattr__("value", np.zeros(n)))
            _apply(new["v_lo"], new["v_hi"], k, lo, hi)

        for e, ln in enumerate(model.lines):
            i, j = model.bus_index(ln.from_bus), model.bus_index(ln.to_bus)
            def set_e(s, i=i, j=j):
                vec = np.zeros(n); vec[i] = s; vec[j] = -s
                c_th.value = vec
            lo, hi = _extremes(set_e, lambda: c_th.__setattr__("value", np.zeros(n)))
            _apply(new["th_lo"], new["th_hi"], e, lo, hi)

        for k in range(dim):
            if bounds.x_hi[k] - bounds.x_lo[k] < 1e-12:
                continue  # pinned coordinate
            def set_x(s, k=k):
                vec = np.zeros(dim); vec[k] = s
                c_x.value = vec
            lo, hi = _extremes(set_x, lambda: c_x.__setattr__("value", np.zeros(dim)))
            _apply(new["x_lo"], new["x_hi"], k, lo, hi)

        # keep the VG block of the box consistent with the per-bus V bounds
        for pos, gi in enumerate(imap.vg_gens):
            k = model.bus_index(model.generators[gi].bus_id)
            sl = imap.sl_vg
            new["x_lo"][sl][pos] = max(new["x_lo"][sl][pos], new["v_lo"][k])
            new["x_hi"][sl][pos] = min(new["x_hi"][sl][pos], new["v_hi"][k])

        bounds = Bounds(**new)
    return bounds
