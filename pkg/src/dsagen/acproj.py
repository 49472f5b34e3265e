"""Closest-dispatch projection onto the nonlinear AC-feasible set.

Given a target operating point, finds the nearest point (Euclidean distance
over the input vector) satisfying the full AC power-flow equations and all
operational constraints.  Loads are held fixed at the target's values: only
generator active-power and voltage setpoints move, so a projected sample
keeps the demand scenario it was drawn for.

The solver is a full-space SQP (scipy SLSQP) over polar voltages and
generator injections, with analytic Jacobians for the power-balance
equalities.  A small restart ladder (power-flow warm start, flat start,
perturbed warm start) handles hard points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import ProjectionError
from .netmodel import NetworkModel, OperatingPoint, encode
from .powerflow import SolvedState, check_feasibility, solve_pf

NLP_TOL = 1e-6
NLP_MAX_ITER = 200
NLP_RESTARTS = 3


@dataclass(frozen=True)
class ProjectionResult:
    x_star: OperatingPoint
    r: float
    state: SolvedState
    status: str  # "local-optimal" | "failed"


class _AcNlp:
    """Shared machinery for NLP formulations over the polar AC equations.

    Decision vector: z = [theta (non-slack buses) | v (all buses) |
    pg (all gens) | qg (all gens)].
    """

    def __init__(self, model: NetworkModel, pd_bus, qd_bus,
                 pg_lo=None, pg_hi=None, vg_lo=None, vg_hi=None):
        self.model = model
        n = model.n_bus
        self.n = n
        self.slack = model.slack_bus
        self.nonslack = [k for k in range(n) if k != self.slack]
        self.ng = len(model.generators)
        self.gen_bus = np.array([model.bus_index(g.bus_id)
                                 for g in model.generators])
        self.pd_bus = pd_bus
        self.qd_bus = qd_bus
        self.off_v = n - 1
        self.off_pg = self.off_v + n
        self.off_qg = self.off_pg + self.ng
        self.nz = self.off_qg + self.ng

        # generator -> bus incidence for balance equations
        self.Mg = np.zeros((n, self.ng))
        for gi, k in enumerate(self.gen_bus):
            self.Mg[k, gi] = 1.0

        lb = np.full(self.nz, -np.inf)
        ub = np.full(self.nz, np.inf)
        lb[: self.off_v] = -np.pi
        ub[: self.off_v] = np.pi
        for k, b in enumerate(model.buses):
            lb[self.off_v + k] = b.v_min
            ub[self.off_v + k] = b.v_max
        for gi, g in enumerate(model.generators):
            lb[self.off_pg + gi] = g.p_min
            ub[self.off_pg + gi] = g.p_max
            lb[self.off_qg + gi] = g.q_min
            ub[self.off_qg + gi] = g.q_max
        # optional tighter boxes on the input-vector coordinates
        imap = model.input_index_map()
        if pg_lo is not None:
            for pos, gi in enumerate(imap.pg_gens):
                lb[self.off_pg + gi] = max(lb[self.off_pg + gi], pg_lo[pos])
                ub[self.off_pg + gi] = min(ub[self.off_pg + gi], pg_hi[pos])
        if vg_lo is not None:
            for pos, gi in enumerate(imap.vg_gens):
                k = self.gen_bus[gi]
                lb[self.off_v + k] = max(lb[self.off_v + k], vg_lo[pos])
                ub[self.off_v + k] = min(ub[self.off_v + k], vg_hi[pos])
        self.lb, self.ub = lb, ub

    # -- decision-vector access ------------------------------------------
    def unpack(self, z):
        th = np.zeros(self.n)
        th[self.nonslack] = z[: self.off_v]
        v = z[self.off_v: self.off_pg]
        pg = z[self.off_pg: self.off_qg]
        qg = z[self.off_qg:]
        return th, v, pg, qg

    def pack(self, th, v, pg, qg):
        z = np.empty(self.nz)
        z[: self.off_v] = th[self.nonslack]
        z[self.off_v: self.off_pg] = v
        z[self.off_pg: self.off_qg] = pg
        z[self.off_qg:] = qg
        return np.clip(z, self.lb, self.ub)

    # -- power-balance equalities and their Jacobian ---------------------
    def balance(self, z):
        th, v, pg, qg = self.unpack(z)
        V = v * np.exp(1j * th)
        S = V * np.conj(self.model.Y @ V)
        cp = S.real - (self.Mg @ pg - self.pd_bus)
        cq = S.imag - (self.Mg @ qg - self.qd_bus)
        return np.concatenate([cp, cq])

    def balance_jac(self, z):
        th, v, pg, qg = self.unpack(z)
        V = v * np.exp(1j * th)
        Ibus = self.model.Y @ V
        diagV = np.diag(V)
        diagI = np.diag(Ibus)
        diagVnorm = np.diag(np.exp(1j * th))
        dS_dVa = 1j * diagV @ np.conj(diagI - self.model.Y @ diagV)
        dS_dVm = diagV @ np.conj(self.model.Y @ diagVnorm) \
            + np.conj(diagI) @ diagVnorm
        J = np.zeros((2 * self.n, self.nz))
        J[: self.n, : self.off_v] = dS_dVa.real[:, self.nonslack]
        J[: self.n, self.off_v: self.off_pg] = dS_dVm.real
        J[: self.n, self.off_pg: self.off_qg] = -self.Mg
        J[self.n:, : self.off_v] = dS_dVa.imag[:, self.nonslack]
        J[self.n:, self.off_v: self.off_pg] = dS_dVm.imag
        J[self.n:, self.off_qg:] = -self.Mg
        return J

    # -- line-limit and angle inequalities (>= 0 feasible) ---------------
    def line_margins(self, z):
        th, v, _, _ = self.unpack(z)
        V = v * np.exp(1j * th)
        out = []
        for ln in self.model.lines:
            i = self.model.bus_index(ln.from_bus)
            j = self.model.bus_index(ln.to_bus)
            y = 1.0 / ln.z
            bc2 = 1j * ln.b_charge / 2.0
            sf = V[i] * np.conj(y * (V[i] - V[j]) + bc2 * V[i])
            st = V[j] * np.conj(y * (V[j] - V[i]) + bc2 * V[j])
            out.append(ln.s_max ** 2 - (sf.real ** 2 + sf.imag ** 2))
            out.append(ln.s_max ** 2 - (st.real ** 2 + st.imag ** 2))
            dth = th[i] - th[j]
            out.append(ln.theta_max - dth)
            out.append(dth - ln.theta_min)
        return np.array(out)

    def constraints(self):
        return [
            {"type": "eq", "fun": self.balance, "jac": self.balance_jac},
            {"type": "ineq", "fun": self.line_margins},
        ]

    def pf_start(self, op: OperatingPoint):
        """Starting point from a power-flow solve (falls back to flat)."""
        st = solve_pf(self.model, op)
        imap = self.model.input_index_map()
        pg = np.zeros(self.ng)
        for pos, gi in enumerate(imap.pg_gens):
            pg[gi] = op.pg[pos]
        if st.converged:
            pg[self.model.slack_gen] = st.p_gen[self.model.slack_gen]
            return self.pack(st.theta, st.v, pg, st.q_gen)
        v = np.ones(self.n)
        for pos, gi in enumerate(imap.vg_gens):
            v[self.gen_bus[gi]] = op.vg[pos]
        pg[self.model.slack_gen] = np.clip(
            self.pd_bus.sum() - pg.sum() + pg[self.model.slack_gen],
            self.model.generators[self.model.slack_gen].p_min,
            self.model.generators[self.model.slack_gen].p_max)
        return self.pack(np.zeros(self.n), v, pg, np.zeros(self.ng))

    def to_operating_point(self, z, pd, qd):
        th, v, pg, qg = self.unpack(z)
        imap = self.model.input_index_map()
        pg_x = np.array([pg[gi] for gi in imap.pg_gens])
        vg_x = np.array([v[self.gen_bus[gi]] for gi in imap.vg_gens])
        return encode(self.model, pg_x, vg_x, pd, qd)


def _loads_per_bus(model: NetworkModel, op: OperatingPoint):
    pd = np.zeros(model.n_bus)
    qd = np.zeros(model.n_bus)
    for pos, li in enumerate(op.imap.load_idx):
        k = model.bus_index(model.loads[li].bus_id)
        pd[k] += op.pd[pos]
        qd[k] += op.qd[pos]
    return pd, qd


def project_to_ac(model: NetworkModel, bounds, xhat: OperatingPoint,
                  nlp_tol=NLP_TOL, nlp_max_iter=NLP_MAX_ITER,
                  nlp_restarts=NLP_RESTARTS, qc_warm=None) -> ProjectionResult:
    """Project an operating point onto the AC-feasible set.

    ``bounds`` may be None (case limits) or an object with ``x_lo``/``x_hi``
    box arrays to tighten the generator coordinates.  ``qc_warm`` optionally
    supplies a relaxation solution used as one of the restart initializers.
    Returns status "failed" after exhausting restarts; every "local-optimal"
    result has been re-verified through the independent power-flow check.
    """
    imap = model.input_index_map()
    pd_bus, qd_bus = _loads_per_bus(model, xhat)
    kw = {}
    if bounds is not None:
        x_lo, x_hi = bounds.x_lo, bounds.x_hi
        kw = dict(pg_lo=x_lo[imap.sl_pg], pg_hi=x_hi[imap.sl_pg],
                  vg_lo=x_lo[imap.sl_vg], vg_hi=x_hi[imap.sl_vg])
    nlp = _AcNlp(model, pd_bus, qd_bus, **kw)

    pg_hat = xhat.pg
    vg_hat = xhat.vg
    pg_cols = np.array([nlp.off_pg + gi for gi in imap.pg_gens])
    vg_cols = np.array([nlp.off_v + nlp.gen_bus[gi] for gi in imap.vg_gens])

    def objective(z):
        d_pg = z[pg_cols] - pg_hat
        d_vg = z[vg_cols] - vg_hat
        return float(d_pg @ d_pg + d_vg @ d_vg)

    def objective_grad(z):
        g = np.zeros(nlp.nz)
        np.add.at(g, pg_cols, 2.0 * (z[pg_cols] - pg_hat))
        np.add.at(g, vg_cols, 2.0 * (z[vg_cols] - vg_hat))
        return g

    starts = [lambda: nlp.pf_start(xhat)]
    if qc_warm is not None:
        starts.append(lambda: nlp.pf_start(qc_warm))
    starts.append(lambda: nlp.pack(
        np.zeros(model.n_bus), np.ones(model.n_bus),
        np.full(nlp.ng, 0.0), np.zeros(nlp.ng)))
    rng = np.random.default_rng(0)
    base = nlp.pf_start(xhat)
    starts.append(lambda: np.clip(
        base + rng.normal(0.0, 0.01, nlp.nz), nlp.lb, nlp.ub))

    last_err = "no restarts attempted"
    for attempt, make_start in enumerate(starts[: max(nlp_restarts + 1, 1)]):
        z0 = make_start()
        res = minimize(objective, z0, jac=objective_grad, method="SLSQP",
                       bounds=list(zip(nlp.lb, nlp.ub)),
                       constraints=nlp.constraints(),
                       options={"maxiter": nlp_max_iter, "ftol": 1e-12})
        if not res.success:
            last_err = f"restart {attempt}: {res.message}"
            continue
        x_star = nlp.to_operating_point(res.x, xhat.pd, xhat.qd)
        state = solve_pf(model, x_star)
        if not state.converged:
            last_err = f"restart {attempt}: verification flow diverged"
            continue
        report = check_feasibility(model, state)
        if not report.feasible:
            last_err = f"restart {attempt}: verification found {report.violations}"
            continue
        r = float(np.linalg.norm(x_star.x - xhat.x))
        return ProjectionResult(x_star=x_star, r=r, state=state,
                                status="local-optimal")
    return ProjectionResult(x_star=xhat, r=float("nan"),
                            state=solve_pf(model, xhat), status="failed")


def solve_ac_opf_cost(model: NetworkModel, loads: OperatingPoint | None = None,
                      nlp_max_iter=300):
    """Cost-minimizing AC-OPF (testing/calibration helper, not a user feature).

    Loads are fixed at the given operating point's demand (default: scaled
    nominal).  Returns (op, state, cost_per_hour).
    """
    from .netmodel import nominal_point

    op0 = loads if loads is not None else nominal_point(model)
    pd_bus, qd_bus = _loads_per_bus(model, op0)
    nlp = _AcNlp(model, pd_bus, qd_bus)
    base = model.base_mva

    cost_c = np.array([g.cost for g in model.generators])

    def objective(z):
        pg_mw = z[nlp.off_pg: nlp.off_qg] * base
        return float(np.sum(cost_c[:, 0] * pg_mw ** 2
                            + cost_c[:, 1] * pg_mw + cost_c[:, 2]))

    def objective_grad(z):
        g = np.zeros(nlp.nz)
        pg_mw = z[nlp.off_pg: nlp.off_qg] * base
        g[nlp.off_pg: nlp.off_qg] = (2 * cost_c[:, 0] * pg_mw
                                     + cost_c[:, 1]) * base
        return g

    z0 = nlp.pf_start(op0)
    res = minimize(objective, z0, jac=objective_grad, method="SLSQP",
                   bounds=list(zip(nlp.lb, nlp.ub)),
                   constraints=nlp.constraints(),
                   options={"maxiter": nlp_max_iter, "ftol": 1e-12})
    if not res.success:
        raise ProjectionError(f"AC-OPF failed: {res.message}")
    op = nlp.to_operating_point(res.x, op0.pd, op0.qd)
    state = solve_pf(model, op)
    if not state.converged:
        raise ProjectionError("AC-OPF verification flow diverged")
    report = check_feasibility(model, state)
    if not report.feasible:
        raise ProjectionError(f"AC-OPF verification failed: {report.violations}")
    return op, state, objective(res.x)
