"""Nonlinear AC power flow and operational-feasibility checking.

The solver is a dense Newton-Raphson on the polar mismatch equations with an
optional outer loop that clamps generator reactive power at its limits
(PV -> PQ switching).  Divergence is a labeled outcome, not an exception:
the sampling pipeline keeps non-converged points as infeasible samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PowerFlowError
from .netmodel import NetworkModel, OperatingPoint

PF_TOL = 1e-8
FEAS_TOL = 1e-6
MAX_ITER = 50
MAX_SWITCH_ROUNDS = 10


@dataclass(frozen=True)
class SolvedState:
    """A power-flow solution (all quantities p.u. / rad)."""

    v: np.ndarray          # per-bus voltage magnitude
    theta: np.ndarray      # per-bus voltage angle
    p_gen: np.ndarray      # per-generator active output (slack solved)
    q_gen: np.ndarray      # per-generator reactive output
    s_from: np.ndarray     # per-line complex flow, from side
    s_to: np.ndarray       # per-line complex flow, to side
    converged: bool
    iterations: int
    q_clamped: tuple = ()  # (gen index, bound) pairs fixed at a Q limit

    def v_complex(self) -> np.ndarray:
        return self.v * np.exp(1j * self.theta)


@dataclass(frozen=True)
class Violation:
    constraint: str  # "1a" | "1b" | "1c" | "1f"
    element: str
    magnitude: float


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    violations: tuple


def _bus_injections(model: NetworkModel, op: OperatingPoint):
    """Specified net (gen - load) P per bus and load Q per bus."""
    n = model.n_bus
    p_load = np.zeros(n)
    q_load = np.zeros(n)
    imap = op.imap
    for pos, li in enumerate(imap.load_idx):
        k = model.bus_index(model.loads[li].bus_id)
        p_load[k] += op.pd[pos]
        q_load[k] += op.qd[pos]
    p_spec = -p_load.copy()
    for pos, gi in enumerate(imap.pg_gens):
        k = model.bus_index(model.generators[gi].bus_id)
        p_spec[k] += op.pg[pos]
    return p_spec, p_load, q_load


def _newton(Y, v, th, p_spec, q_spec, pv, pq, tol, max_iter):
    """Dense polar Newton iteration.  Mutates v, th in place."""
    pvpq = np.concatenate([pv, pq]).astype(int)
    n_pv, n_pq = len(pv), len(pq)
    for it in range(1, max_iter + 1):
        V = v * np.exp(1j * th)
        S = V * np.conj(Y @ V)
        mism = np.concatenate([
            S.real[pvpq] - p_spec[pvpq],
            S.imag[pq] - q_spec[pq],
        ])
        if not np.all(np.isfinite(mism)):
            return False, it
        if np.max(np.abs(mism)) <= tol:
            return True, it
        Ibus = Y @ V
        diagV = np.diag(V)
        diagI = np.diag(Ibus)
        diagVnorm = np.diag(V / v)
        dS_dVa = 1j * diagV @ np.conj(diagI - Y @ diagV)
        dS_dVm = diagV @ np.conj(Y @ diagVnorm) + np.conj(diagI) @ diagVnorm
        J = np.empty((n_pv + 2 * n_pq, n_pv + 2 * n_pq))
        J[: n_pv + n_pq, : n_pv + n_pq] = dS_dVa.real[np.ix_(pvpq, pvpq)]
        J[: n_pv + n_pq, n_pv + n_pq:] = dS_dVm.real[np.ix_(pvpq, pq)]
        J[n_pv + n_pq:, : n_pv + n_pq] = dS_dVa.imag[np.ix_(pq, pvpq)]
        J[n_pv + n_pq:, n_pv + n_pq:] = dS_dVm.imag[np.ix_(pq, pq)]
        try:
            dx = np.linalg.solve(J, mism)
        except np.linalg.LinAlgError:
            return False, it
        if not np.all(np.isfinite(dx)):
            return False, it
        th[pvpq] -= dx[: n_pv + n_pq]
        v[pq] -= dx[n_pv + n_pq:]
        if np.any(v <= 0):
            return False, it
    return False, max_iter


def _line_flows(model: NetworkModel, V: np.ndarray):
    nl = len(model.lines)
    s_from = np.empty(nl, dtype=complex)
    s_to = np.empty(nl, dtype=complex)
    for e, ln in enumerate(model.lines):
        i, j = model.bus_index(ln.from_bus), model.bus_index(ln.to_bus)
        y = 1.0 / ln.z
        bc2 = 1j * ln.b_charge / 2.0
        s_from[e] = V[i] * np.conj(y * (V[i] - V[j]) + bc2 * V[i])
        s_to[e] = V[j] * np.conj(y * (V[j] - V[i]) + bc2 * V[j])
    return s_from, s_to


def solve_pf(model: NetworkModel, op: OperatingPoint, enforce_q_limits=False,
             pf_tol=PF_TOL, max_iter=MAX_ITER,
             max_switch_rounds=MAX_SWITCH_ROUNDS) -> SolvedState:
    """Solve the AC power flow for an operating point.

    Flat start (V = 1 at load buses, angles 0).  With ``enforce_q_limits``,
    generators violating a reactive bound are clamped there (their bus
    becomes PQ) and the solve repeats until no switching occurs;
    ``max_switch_rounds`` exceeded raises :class:`PowerFlowError`.
    """
    imap = op.imap
    if imap != model.input_index_map():
        raise PowerFlowError("operating point does not match this network")
    n = model.n_bus
    slack = model.slack_bus
    gen_bus = np.array([model.bus_index(g.bus_id) for g in model.generators])
    p_spec, p_load, q_load = _bus_injections(model, op)

    v_set = np.ones(n)
    for pos, gi in enumerate(imap.vg_gens):
        v_set[gen_bus[gi]] = op.vg[pos]

    clamped: dict[int, float] = {}  # gen index -> Q bound (p.u.)
    total_iters = 0
    v = v_set.copy()
    th = np.zeros(n)

    for _round in range(max_switch_rounds + 1):
        pv, pq = [], []
        q_spec = -q_load.copy()
        for gi in range(len(model.generators)):
            k = gen_bus[gi]
            if k == slack:
                continue
            if gi in clamped:
                q_spec[k] += clamped[gi]
            else:
                pv.append(k)
                v[k] = v_set[k]
        pq = [k for k in range(n) if k != slack and k not in pv]
        v[slack] = v_set[slack]
        th[slack] = 0.0

        ok, iters = _newton(model.Y, v, th, p_spec, q_spec,
                            np.array(pv, dtype=int), np.array(pq, dtype=int),
                            pf_tol, max_iter)
        total_iters += iters
        if not ok:
            return _assemble_state(model, op, v, th, p_load, q_load,
                                   converged=False, iterations=total_iters,
                                   clamped=clamped)
        if not enforce_q_limits:
            break

        V = v * np.exp(1j * th)
        S = V * np.conj(model.Y @ V)
        switched = False
        for gi, g in enumerate(model.generators):
            k = gen_bus[gi]
            if k == slack or gi in clamped:
                continue
            qg = S.imag[k] + q_load[k]
            if qg > g.q_max + FEAS_TOL:
                clamped[gi] = g.q_max
                switched = True
            elif qg < g.q_min - FEAS_TOL:
                clamped[gi] = g.q_min
                switched = True
        if not switched:
            break
    else:
        raise PowerFlowError(
            f"Q-limit switching livelock after {max_switch_rounds} rounds")

    return _assemble_state(model, op, v, th, p_load, q_load, converged=True,
                           iterations=total_iters, clamped=clamped)


def _assemble_state(model, op, v, th, p_load, q_load, converged, iterations,
                    clamped):
    if not converged or not np.all(np.isfinite(v)) or not np.all(np.isfinite(th)):
        nan = np.full(model.n_bus, np.nan)
        nanl = np.full(len(model.lines), np.nan, dtype=complex)
        nang = np.full(len(model.generators), np.nan)
        return SolvedState(v=nan, theta=nan, p_gen=nang, q_gen=nang,
                           s_from=nanl, s_to=nanl, converged=False,
                           iterations=iterations,
                           q_clamped=tuple(sorted(clamped.items())))
    V = v * np.exp(1j * th)
    S = V * np.conj(model.Y @ V)
    p_gen = np.empty(len(model.generators))
    q_gen = np.empty(len(model.generators))
    for gi, g in enumerate(model.generators):
        k = model.bus_index(g.bus_id)
        q_gen[gi] = S.imag[k] + q_load[k]
        if k == model.slack_bus:
            p_gen[gi] = S.real[k] + p_load[k]
        else:
            pos = op.imap.pg_gens.index(gi)
            p_gen[gi] = op.pg[pos]
    s_from, s_to = _line_flows(model, V)
    return SolvedState(v=v.copy(), theta=th.copy(), p_gen=p_gen, q_gen=q_gen,
                       s_from=s_from, s_to=s_to, converged=True,
                       iterations=iterations,
                       q_clamped=tuple(sorted(clamped.items())))


def check_feasibility(model: NetworkModel, state: SolvedState,
                      feas_tol=FEAS_TOL) -> FeasibilityReport:
    """Evaluate the operational constraints at a converged solution.

    Checks voltage bounds (1a), generator P and Q bounds including the slack
    machine (1b), both-end apparent-power ratings (1c), and angle-difference
    bounds (1f).
    """
    if not state.converged:
        raise PowerFlowError("cannot assess feasibility of diverged flow")
    viol = []
    for k, b in enumerate(model.buses):
        if state.v[k] > b.v_max + feas_tol:
            viol.append(Violation("1a", f"bus {b.id}", state.v[k] - b.v_max))
        elif state.v[k] < b.v_min - feas_tol:
            viol.append(Violation("1a", f"bus {b.id}", b.v_min - state.v[k]))
    for gi, g in enumerate(model.generators):
        if state.p_gen[gi] > g.p_max + feas_tol:
            viol.append(Violation("1b", f"gen {g.bus_id} P",
                                  state.p_gen[gi] - g.p_max))
        elif state.p_gen[gi] < g.p_min - feas_tol:
            viol.append(Violation("1b", f"gen {g.bus_id} P",
                                  g.p_min - state.p_gen[gi]))
        if state.q_gen[gi] > g.q_max + feas_tol:
            viol.append(Violation("1b", f"gen {g.bus_id} Q",
                                  state.q_gen[gi] - g.q_max))
        elif state.q_gen[gi] < g.q_min - feas_tol:
            viol.append(Violation("1b", f"gen {g.bus_id} Q",
                                  g.q_min - state.q_gen[gi]))
    for e, ln in enumerate(model.lines):
        name = f"line {ln.from_bus}-{ln.to_bus}"
        for s, tag in ((state.s_from[e], "from"), (state.s_to[e], "to")):
            if abs(s) > ln.s_max + feas_tol:
                viol.append(Violation("1c", f"{name} ({tag})",
                                      abs(s) - ln.s_max))
        dth = state.theta[model.bus_index(ln.from_bus)] \
            - state.theta[model.bus_index(ln.to_bus)]
        if dth > ln.theta_max + feas_tol:
            viol.append(Violation("1f", name, dth - ln.theta_max))
        elif dth < ln.theta_min - feas_tol:
            viol.append(Violation("1f", name, ln.theta_min - dth))
    return FeasibilityReport(feasible=not viol, violations=tuple(viol))


def is_feasible(model, op, enforce_q_limits=False):
    """Convenience: solve + check; (state, report|None)."""
    state = solve_pf(model, op, enforce_q_limits=enforce_q_limits)
    if not state.converged:
        return state, None
    return state, check_feasibility(model, state)
