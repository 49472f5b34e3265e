"""Small-signal stability: linearized multi-machine dynamics and damping.

Machine model: two-axis (fourth-order) synchronous generator with a
first-order exciter and a droop governor, interfaced to the algebraic
network equations (constant-power loads).  States per machine:

    delta, domega, eq_p, ed_p, efd, pm

domega is the per-unit speed deviation.  The algebraic variables (bus
voltage magnitudes and angles) are eliminated by a Schur complement of the
network Jacobian, and the rotational-reference redundancy is removed by
re-expressing rotor angles relative to the first machine (one state fewer).

All Jacobians are computed by complex-step differentiation, which is exact
to machine precision, so closed-form checks hold to ~1e-12.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import LinearizationError, PowerFlowError
from .netmodel import NetworkModel, OperatingPoint
from .powerflow import SolvedState, solve_pf

ZERO_MODE_TOL = 1e-8
N_MACHINE_STATES = 6
STATE_NAMES = ("delta", "domega", "eq_p", "ed_p", "efd", "pm")


@dataclass(frozen=True)
class MachineDynamics:
    """Dynamic parameters of one machine, p.u. on the system MVA base.

    ``r_droop`` is the governor droop (p.u. speed per p.u. power); zero
    disables the frequency response.  ``infinite_bus`` marks an ideal source:
    the bus voltage is frozen and the machine contributes no states.
    """

    h: float          # inertia constant, s
    d: float          # damping torque coefficient, p.u.
    x_d: float
    x_q: float
    x_d_p: float
    x_q_p: float
    t_do_p: float     # s
    t_qo_p: float     # s
    k_a: float        # exciter gain
    t_a: float        # exciter time constant, s
    r_droop: float
    t_g: float        # governor time constant, s
    infinite_bus: bool = False

    def __post_init__(self):
        if self.infinite_bus:
            return
        if self.h <= 0:
            raise ValueError("inertia must be positive")
        for name in ("t_do_p", "t_qo_p", "t_a", "t_g"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (self.x_d >= self.x_d_p > 0):
            raise ValueError("need x_d >= x_d_p > 0")
        if not (self.x_q >= self.x_q_p > 0):
            raise ValueError("need x_q >= x_q_p > 0")


@dataclass(frozen=True)
class DynamicsSet:
    """Per-generator dynamics keyed by bus id, plus system frequency."""

    f_hz: float
    machines: dict  # bus id -> MachineDynamics

    @property
    def omega_s(self) -> float:
        return 2.0 * math.pi * self.f_hz


def load_dynamics(path) -> DynamicsSet:
    """Read a dynamics sidecar file (JSON map generator-id -> parameters)."""
    raw = json.loads(Path(path).read_text())
    machines = {}
    for gid, rec in raw["machines"].items():
        machines[int(gid)] = MachineDynamics(**rec)
    return DynamicsSet(f_hz=float(raw.get("f_hz", 60.0)), machines=machines)


@dataclass(frozen=True)
class StateSpace:
    """Linearized system matrix with state labels."""

    a: np.ndarray
    labels: tuple


@dataclass(frozen=True)
class Mode:
    sigma: float   # 1/s
    omega: float   # rad/s
    zeta: float

    @property
    def magnitude(self) -> float:
        return math.hypot(self.sigma, self.omega)


@dataclass(frozen=True)
class ModeSet:
    modes: tuple

    def retained(self, zero_mode_tol=ZERO_MODE_TOL):
        return tuple(m for m in self.modes if m.magnitude >= zero_mode_tol)


class _Machine:
    """Per-machine constants and initial conditions for linearization."""

    def __init__(self, bus_idx, dyn, v0, th0, p0, q0, omega_s):
        self.bus = bus_idx
        self.dyn = dyn
        self.omega_s = omega_s
        V = v0 * np.exp(1j * th0)
        I = np.conj((p0 + 1j * q0) / V)
        delta0 = np.angle(V + 1j * dyn.x_q * I)
        rot = np.exp(-1j * (delta0 - np.pi / 2.0))
        vd, vq = (V * rot).real, (V * rot).imag
        idq = I * rot
        i_d, i_q = idq.real, idq.imag
        self.delta0 = float(delta0)
        self.eq_p0 = vq + dyn.x_d_p * i_d
        self.ed_p0 = vd - dyn.x_q_p * i_q
        self.efd0 = self.eq_p0 + (dyn.x_d - dyn.x_d_p) * i_d
        self.pm0 = self.ed_p0 * i_d + self.eq_p0 * i_q \
            + (dyn.x_q_p - dyn.x_d_p) * i_d * i_q
        self.v0 = v0

    def x0(self):
        return np.array([self.delta0, 0.0, self.eq_p0, self.ed_p0,
                         self.efd0, self.pm0])

    def currents(self, delta, eq_p, ed_p, v, th):
        vd = v * np.sin(delta - th)
        vq = v * np.cos(delta - th)
        i_d = (eq_p - vq) / self.dyn.x_d_p
        i_q = (vd - ed_p) / self.dyn.x_q_p
        return vd, vq, i_d, i_q

    def f(self, x, v, th):
        """State derivatives; complex-step safe."""
        dyn = self.dyn
        delta, domega, eq_p, ed_p, efd, pm = x
        vd, vq, i_d, i_q = self.currents(delta, eq_p, ed_p, v, th)
        pe = ed_p * i_d + eq_p * i_q + (dyn.x_q_p - dyn.x_d_p) * i_d * i_q
        droop_inv = 1.0 / dyn.r_droop if dyn.r_droop > 0 else 0.0
        return np.array([
            self.omega_s * domega,
            (pm - pe - dyn.d * domega) / (2.0 * dyn.h),
            (-eq_p - (dyn.x_d - dyn.x_d_p) * i_d + efd) / dyn.t_do_p,
            (-ed_p + (dyn.x_q - dyn.x_q_p) * i_q) / dyn.t_qo_p,
            (-(efd - self.efd0) - dyn.k_a * (v - self.v0)) / dyn.t_a,
            (-(pm - self.pm0) - droop_inv * domega) / dyn.t_g,
        ])

    def injection(self, x, v, th):
        """Complex power injected into the network; complex-step safe."""
        delta, _, eq_p, ed_p, _, _ = x
        vd, vq, i_d, i_q = self.currents(delta, eq_p, ed_p, v, th)
        p = vd * i_d + vq * i_q
        q = vq * i_d - vd * i_q
        return p, q


def linearize(model: NetworkModel, dynamics: DynamicsSet,
              state: SolvedState) -> StateSpace:
    """Linearize machine + network dynamics around a converged power flow."""
    if not state.converged:
        raise LinearizationError("cannot linearize around a diverged power flow")

    omega_s = dynamics.omega_s
    machines = []
    fixed = {}  # bus index -> (v, theta) held constant (infinite bus)
    for gi, g in enumerate(model.generators):
        if g.bus_id not in dynamics.machines:
            raise LinearizationError(f"no dynamics for generator at bus {g.bus_id}")
        dyn = dynamics.machines[g.bus_id]
        k = model.bus_index(g.bus_id)
        if dyn.infinite_bus:
            fixed[k] = (state.v[k], state.theta[k])
        else:
            machines.append(_Machine(k, dyn, state.v[k], state.theta[k],
                                     state.p_gen[gi], state.q_gen[gi], omega_s))
    if not machines:
        raise LinearizationError("no dynamic machines in the system")

    n = model.n_bus
    free = [k for k in range(n) if k not in fixed]
    nf = len(free)
    bus_pos = {k: p for p, k in enumerate(free)}
    G, B = model.Y.real, model.Y.imag

    # constant-power demand recovered from the solved state (gen - injection)
    V0 = state.v_complex()
    S0 = V0 * np.conj(model.Y @ V0)
    inj_gen = np.zeros(n, dtype=complex)
    for gi, g in enumerate(model.generators):
        inj_gen[model.bus_index(g.bus_id)] += state.p_gen[gi] + 1j * state.q_gen[gi]
    S_load = inj_gen - S0  # constant-power demand per bus
    p_load, q_load = S_load.real.copy(), S_load.imag.copy()

    mach_at = {m.bus: (mi, m) for mi, m in enumerate(machines)}
    n_x = N_MACHINE_STATES * len(machines)
    x0 = np.concatenate([m.x0() for m in machines])
    y0 = np.concatenate([state.theta[free], state.v[free]])

    def split(y):
        return y[:nf], y[nf:]

    def bus_vth(th_f, v_f, k, dtype):
        if k in fixed:
            return dtype(fixed[k][1]), dtype(fixed[k][0])
        return th_f[bus_pos[k]], v_f[bus_pos[k]]

    def f_fun(x, y):
        th_f, v_f = split(y)
        out = np.empty(n_x, dtype=np.result_type(x, y))
        for mi, m in enumerate(machines):
            th_k, v_k = bus_vth(th_f, v_f, m.bus, out.dtype.type)
            out[mi * 6:(mi + 1) * 6] = m.f(x[mi * 6:(mi + 1) * 6], v_k, th_k)
        return out

    def g_fun(x, y):
        th_f, v_f = split(y)
        dtype = np.result_type(x, y)
        th = np.empty(n, dtype=dtype)
        v = np.empty(n, dtype=dtype)
        for k in range(n):
            th[k], v[k] = bus_vth(th_f, v_f, k, dtype.type)
        out = np.empty(2 * nf, dtype=dtype)
        for pos, k in enumerate(free):
            dth = th[k] - th
            p_net = v[k] * np.sum(v * (G[k] * np.cos(dth) + B[k] * np.sin(dth)))
            q_net = v[k] * np.sum(v * (G[k] * np.sin(dth) - B[k] * np.cos(dth)))
            if k in mach_at:
                mi, m = mach_at[k]
                pg, qg = m.injection(x[mi * 6:(mi + 1) * 6], v[k], th[k])
            else:
                pg, qg = 0.0, 0.0
            out[2 * pos] = pg - p_load[k] - p_net
            out[2 * pos + 1] = qg - q_load[k] - q_net
        return out

    f_x = _cstep_jac(lambda xx: f_fun(xx, y0), x0)
    f_y = _cstep_jac(lambda yy: f_fun(x0, yy), y0)
    g_x = _cstep_jac(lambda xx: g_fun(xx, y0), x0)
    g_y = _cstep_jac(lambda yy: g_fun(x0, yy), y0)

    try:
        gy_inv_gx = np.linalg.solve(g_y, g_x)
    except np.linalg.LinAlgError:
        raise LinearizationError(
            "algebraic singularity (voltage collapse proximity)") from None
    cond = np.linalg.cond(g_y)
    if not np.isfinite(cond) or cond > 1e12:
        raise LinearizationError(
            "algebraic singularity (voltage collapse proximity)")
    a_full = f_x - f_y @ gy_inv_gx

    labels = [f"{name}:{model.buses[m.bus].id}"
              for m in machines for name in STATE_NAMES]

    if fixed:
        return StateSpace(a=a_full, labels=tuple(labels))

    # remove the rotational reference: delta_i := delta_i - delta_1
    nm = len(machines)
    keep = [i for i in range(n_x) if i != 0]  # drop machine-1 delta
    U = np.zeros((n_x - 1, n_x))
    for r, i in enumerate(keep):
        U[r, i] = 1.0
        if i % N_MACHINE_STATES == 0:  # another machine's delta row
            U[r, 0] = -1.0
    Vb = np.zeros((n_x, n_x - 1))
    for r, i in enumerate(keep):
        Vb[i, r] = 1.0
    a_red = U @ a_full @ Vb
    red_labels = [labels[i] if i % N_MACHINE_STATES != 0
                  else labels[i] + f"-delta:{model.buses[machines[0].bus].id}"
                  for i in keep]
    return StateSpace(a=a_red, labels=tuple(red_labels))


def _cstep_jac(fun, x0):
    """Jacobian by complex-step differentiation (exact to machine precision)."""
    h = 1e-100
    n = len(x0)
    cols = []
    for i in range(n):
        xp = x0.astype(complex)
        xp[i] += 1j * h
        cols.append(fun(xp).imag / h)
    return np.column_stack(cols) if cols else np.zeros((len(fun(x0)), 0))


def eigenmodes(a: np.ndarray) -> ModeSet:
    """Full spectrum with per-mode damping; conjugate pairs reported once."""
    if not np.all(np.isfinite(a)):
        raise LinearizationError("system matrix has non-finite entries")
    lam = scipy.linalg.eigvals(a)
    modes = []
    for z in lam:
        if z.imag < 0:
            continue  # conjugate partner is retained
        mag = abs(z)
        zeta = -z.real / mag if mag > 0 else 0.0
        modes.append(Mode(sigma=float(z.real), omega=float(z.imag),
                          zeta=float(zeta)))
    modes.sort(key=lambda m: (m.zeta, m.sigma, m.omega))
    return ModeSet(modes=tuple(modes))


def min_damping(modes: ModeSet, zero_mode_tol=ZERO_MODE_TOL) -> float:
    """Least damping ratio over retained modes (|lambda| >= tolerance)."""
    retained = modes.retained(zero_mode_tol)
    if not retained:
        raise LinearizationError("no retained modes to assess")
    return min(m.zeta for m in retained)


def zeta_of(model, dynamics, op, state=None):
    """Damping ratio of the least-damped mode at an operating point."""
    if state is None:
        state = solve_pf(model, op)
    return min_damping(eigenmodes(linearize(model, dynamics, state).a))


def try_zeta(model, dynamics, op, state=None):
    """(state, zeta); zeta is None when the flow diverges or linearization fails."""
    if state is None:
        state = solve_pf(model, op)
    if not state.converged:
        return state, None
    try:
        return state, min_damping(eigenmodes(linearize(model, dynamics, state).a))
    except LinearizationError:
        return state, None


def damping_sensitivity(model: NetworkModel, dynamics: DynamicsSet,
                        op: OperatingPoint, coord: int,
                        step: float = 1e-3) -> float:
    """d(zeta_min)/d(rho) for one non-slack generator P coordinate.

    Central finite difference with the perturbed dispatch rebalanced by the
    slack machine; falls back to a one-sided difference when one side
    diverges.
    """
    pg = op.pg.copy()
    sides = {}
    for sign in (+1.0, -1.0):
        p = pg.copy()
        p[coord] += sign * step
        _, z = try_zeta(model, dynamics, op.replace_pg(p))
        sides[sign] = z
    zp, zm = sides[+1.0], sides[-1.0]
    if zp is not None and zm is not None:
        return (zp - zm) / (2.0 * step)
    _, z0 = try_zeta(model, dynamics, op)
    if z0 is None:
        raise PowerFlowError("sensitivity: base power flow diverged")
    if zp is not None:
        return (zp - z0) / step
    if zm is not None:
        return (z0 - zm) / step
    raise PowerFlowError("sensitivity: power flow diverged on both sides")
