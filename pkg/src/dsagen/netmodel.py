"""Static network model: case parsing, admittance, and the input-vector encoding.

Everything downstream works on :class:`NetworkModel` (immutable) and on
operating points encoded as flat vectors.  The vector layout is

    x = [P_G (non-slack gens) | V (all gen buses) | P_D (loads) | Q_D (loads)]

with a fixed :class:`InputIndexMap` recorded once per network.  All quantities
are stored in per-unit on the system MVA base; megawatts appear only at I/O
boundaries and in the directed-walk discretization.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CaseParseError

BUS_PQ = 1
BUS_PV = 2
BUS_SLACK = 3

# MATPOWER writes unconstrained angle-difference bounds as 0 or +/-360 deg.
# The relaxation needs a finite interval inside (-pi/2, pi/2), so such rows
# are clamped to +/-DEFAULT_ANGLE_LIMIT_DEG.
DEFAULT_ANGLE_LIMIT_DEG = 60.0

# Lines with rateA == 0 are unconstrained in MATPOWER; use a rating that no
# sane flow in a per-unit network will reach.
UNLIMITED_RATE_PU = 1e4


@dataclass(frozen=True)
class Bus:
    """A network bus with voltage-magnitude bounds (p.u.)."""

    id: int
    v_min: float
    v_max: float
    bus_kind: str  # "slack" | "generator" | "load"
    g_shunt: float = 0.0  # shunt conductance, p.u. on system base
    b_shunt: float = 0.0  # shunt susceptance, p.u.

    def __post_init__(self):
        if not (0.0 < self.v_min <= self.v_max):
            raise CaseParseError(
                f"bus {self.id}: voltage bounds must satisfy 0 < v_min <= v_max "
                f"(got [{self.v_min}, {self.v_max}])"
            )


@dataclass(frozen=True)
class Generator:
    """A generator with active/reactive bounds (p.u.) and quadratic cost.

    ``cost`` is (c2, c1, c0) in $/MW^2h, $/MWh, $/h, applied to megawatt
    output.  ``p_set`` and ``v_set`` keep the case-file dispatch so the
    nominal operating point can be reconstructed.
    """

    bus_id: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost: tuple[float, float, float]
    p_set: float
    v_set: float

    def __post_init__(self):
        if self.p_min > self.p_max:
            raise CaseParseError(f"generator at bus {self.bus_id}: p_min > p_max")
        if self.q_min > self.q_max:
            raise CaseParseError(f"generator at bus {self.bus_id}: q_min > q_max")


@dataclass(frozen=True)
class Line:
    """A transmission line (pi model), impedance and limits in p.u./rad."""

    from_bus: int
    to_bus: int
    z: complex  # series impedance
    b_charge: float  # total charging susceptance
    s_max: float  # apparent-power rating
    theta_min: float
    theta_max: float

    def __post_init__(self):
        if self.z == 0:
            raise CaseParseError(
                f"line {self.from_bus}-{self.to_bus}: zero series impedance"
            )
        if self.s_max <= 0:
            raise CaseParseError(f"line {self.from_bus}-{self.to_bus}: s_max <= 0")
        if not self.theta_min < self.theta_max:
            raise CaseParseError(
                f"line {self.from_bus}-{self.to_bus}: empty angle interval"
            )


@dataclass(frozen=True)
class LoadPoint:
    """Nominal complex demand at a bus (p.u., already load-scaled)."""

    bus_id: int
    p_nominal: float
    q_nominal: float


class NetworkModel:
    """Immutable static description of a power network.

    Construction validates the single-slack invariant, resolves bus ids to
    dense indices, and builds the complex bus-admittance matrix.
    """

    def __init__(self, name, base_mva, buses, generators, lines, loads):
        self.name = str(name)
        self.base_mva = float(base_mva)
        self.buses = tuple(buses)
        self.generators = tuple(generators)
        self.lines = tuple(lines)
        self.loads = tuple(loads)

        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise CaseParseError(f"duplicate bus ids: {dup}")
        self._bus_index = {b.id: k for k, b in enumerate(self.buses)}

        slack = [k for k, b in enumerate(self.buses) if b.bus_kind == "slack"]
        if len(slack) == 0:
            raise CaseParseError("missing slack bus")
        if len(slack) > 1:
            raise CaseParseError("multiple slack buses")
        self.slack_bus = slack[0]

        gen_buses = [g.bus_id for g in self.generators]
        if len(set(gen_buses)) != len(gen_buses):
            raise CaseParseError("multiple generators at one bus are not supported")
        for g in self.generators:
            if g.bus_id not in self._bus_index:
                raise CaseParseError(f"generator references unknown bus {g.bus_id}")
        slack_gens = [
            k for k, g in enumerate(self.generators)
            if self._bus_index[g.bus_id] == self.slack_bus
        ]
        if len(slack_gens) != 1:
            raise CaseParseError("slack bus must carry exactly one generator")
        self.slack_gen = slack_gens[0]

        for ld in self.loads:
            if ld.bus_id not in self._bus_index:
                raise CaseParseError(f"load references unknown bus {ld.bus_id}")
        for ln in self.lines:
            if ln.from_bus not in self._bus_index or ln.to_bus not in self._bus_index:
                raise CaseParseError(
                    f"line {ln.from_bus}-{ln.to_bus} references unknown bus"
                )

        self.Y = build_admittance(self)
        self.Y.setflags(write=False)
        self._imap = _build_index_map(self)

    @property
    def n_bus(self):
        return len(self.buses)

    def bus_index(self, bus_id: int) -> int:
        return self._bus_index[bus_id]

    def gens_at_bus(self, k: int):
        """Generator indices whose bus has dense index ``k``."""
        return tuple(
            i for i, g in enumerate(self.generators) if self._bus_index[g.bus_id] == k
        )

    def loads_at_bus(self, k: int):
        return tuple(
            i for i, d in enumerate(self.loads) if self._bus_index[d.bus_id] == k
        )

    def input_index_map(self) -> "InputIndexMap":
        return self._imap

    def case_hash(self) -> str:
        """Stable fingerprint of the parsed model (for manifests)."""
        h = hashlib.sha256()
        h.update(repr((self.name, self.base_mva, self.buses, self.generators,
                       self.lines, self.loads)).encode())
        return h.hexdigest()

    def __repr__(self):
        return (
            f"NetworkModel({self.name!r}, {self.n_bus} buses, "
            f"{len(self.generators)} gens, {len(self.lines)} lines, "
            f"{len(self.loads)} loads)"
        )


@dataclass(frozen=True)
class InputIndexMap:
    """Bijection between named setpoints and the flat input vector.

    ``pg_gens`` lists generator indices (into ``model.generators``) excluding
    the slack machine; ``vg_gens`` lists all generator indices; ``load_idx``
    lists load indices.  Each is sorted by bus id so the map is stable for a
    given network.
    """

    pg_gens: tuple[int, ...]
    vg_gens: tuple[int, ...]
    load_idx: tuple[int, ...]

    @property
    def dimension(self) -> int:
        return len(self.pg_gens) + len(self.vg_gens) + 2 * len(self.load_idx)

    @property
    def sl_pg(self) -> slice:
        return slice(0, len(self.pg_gens))

    @property
    def sl_vg(self) -> slice:
        n = len(self.pg_gens)
        return slice(n, n + len(self.vg_gens))

    @property
    def sl_pd(self) -> slice:
        n = len(self.pg_gens) + len(self.vg_gens)
        return slice(n, n + len(self.load_idx))

    @property
    def sl_qd(self) -> slice:
        n = len(self.pg_gens) + len(self.vg_gens) + len(self.load_idx)
        return slice(n, n + len(self.load_idx))

    def fingerprint(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


def _build_index_map(model: NetworkModel) -> InputIndexMap:
    by_bus = sorted(range(len(model.generators)),
                    key=lambda i: model.generators[i].bus_id)
    pg = tuple(i for i in by_bus if i != model.slack_gen)
    loads = tuple(sorted(range(len(model.loads)),
                         key=lambda i: model.loads[i].bus_id))
    return InputIndexMap(pg_gens=pg, vg_gens=tuple(by_bus), load_idx=loads)


@dataclass(frozen=True)
class OperatingPoint:
    """A point in the input space: flat vector plus its index map."""

    x: np.ndarray
    imap: InputIndexMap

    def __post_init__(self):
        if self.x.shape != (self.imap.dimension,):
            raise ValueError(
                f"operating point has length {self.x.shape}, "
                f"expected ({self.imap.dimension},)"
            )
        self.x.setflags(write=False)

    @property
    def pg(self) -> np.ndarray:
        return self.x[self.imap.sl_pg]

    @property
    def vg(self) -> np.ndarray:
        return self.x[self.imap.sl_vg]

    @property
    def pd(self) -> np.ndarray:
        return self.x[self.imap.sl_pd]

    @property
    def qd(self) -> np.ndarray:
        return self.x[self.imap.sl_qd]

    def replace_pg(self, new_pg: np.ndarray) -> "OperatingPoint":
        x = self.x.copy()
        x[self.imap.sl_pg] = new_pg
        return OperatingPoint(x, self.imap)

    def replace_vg(self, new_vg: np.ndarray) -> "OperatingPoint":
        x = self.x.copy()
        x[self.imap.sl_vg] = new_vg
        return OperatingPoint(x, self.imap)


def encode(model: NetworkModel, pg, vg, pd, qd) -> OperatingPoint:
    """Pack named setpoint blocks into an operating-point vector."""
    imap = model.input_index_map()
    parts = [np.asarray(v, dtype=float) for v in (pg, vg, pd, qd)]
    sizes = (len(imap.pg_gens), len(imap.vg_gens), len(imap.load_idx),
             len(imap.load_idx))
    for part, size, name in zip(parts, sizes, ("pg", "vg", "pd", "qd")):
        if part.shape != (size,):
            raise ValueError(f"{name} block has shape {part.shape}, expected ({size},)")
    return OperatingPoint(np.concatenate(parts), imap)


def decode(op: OperatingPoint):
    """Unpack an operating point into its (pg, vg, pd, qd) blocks."""
    return op.pg.copy(), op.vg.copy(), op.pd.copy(), op.qd.copy()


def from_vector(model: NetworkModel, x) -> OperatingPoint:
    x = np.asarray(x, dtype=float)
    imap = model.input_index_map()
    if x.shape != (imap.dimension,):
        raise ValueError(f"vector has shape {x.shape}, expected ({imap.dimension},)")
    return OperatingPoint(x.copy(), imap)


def nominal_point(model: NetworkModel) -> OperatingPoint:
    """The case-file dispatch at (scaled) nominal load."""
    imap = model.input_index_map()
    pg = np.array([model.generators[i].p_set for i in imap.pg_gens])
    vg = np.array([model.generators[i].v_set for i in imap.vg_gens])
    pd = np.array([model.loads[i].p_nominal for i in imap.load_idx])
    qd = np.array([model.loads[i].q_nominal for i in imap.load_idx])
    return encode(model, pg, vg, pd, qd)


def input_box(model: NetworkModel, load_band: float = 0.2):
    """Box bounds (lo, hi) on the input vector.

    Generator P coordinates use the machine limits, generator V coordinates
    the bus voltage bounds.  Load coordinates vary within
    ``(1 +/- load_band) * nominal``; a zero nominal pins the coordinate.
    """
    imap = model.input_index_map()
    lo = np.empty(imap.dimension)
    hi = np.empty(imap.dimension)
    for pos, gi in enumerate(imap.pg_gens):
        g = model.generators[gi]
        lo[imap.sl_pg][pos] = g.p_min
        hi[imap.sl_pg][pos] = g.p_max
    for pos, gi in enumerate(imap.vg_gens):
        b = model.buses[model.bus_index(model.generators[gi].bus_id)]
        lo[imap.sl_vg][pos] = b.v_min
        hi[imap.sl_vg][pos] = b.v_max
    for pos, li in enumerate(imap.load_idx):
        ld = model.loads[li]
        for sl, nom in ((imap.sl_pd, ld.p_nominal), (imap.sl_qd, ld.q_nominal)):
            a, b_ = nom * (1.0 - load_band), nom * (1.0 + load_band)
            lo[sl][pos] = min(a, b_)
            hi[sl][pos] = max(a, b_)
    return lo, hi


def build_admittance(model: NetworkModel) -> np.ndarray:
    """Complex bus-admittance matrix from line and shunt data (pi model)."""
    n = model.n_bus
    Y = np.zeros((n, n), dtype=complex)
    adj = {k: set() for k in range(n)}
    for ln in model.lines:
        i = model.bus_index(ln.from_bus)
        j = model.bus_index(ln.to_bus)
        y = 1.0 / ln.z
        Y[i, i] += y + 1j * ln.b_charge / 2.0
        Y[j, j] += y + 1j * ln.b_charge / 2.0
        Y[i, j] -= y
        Y[j, i] -= y
        adj[i].add(j)
        adj[j].add(i)
    for k, b in enumerate(model.buses):
        Y[k, k] += b.g_shunt + 1j * b.b_shunt

    # connectivity check: every bus reachable from the slack
    seen = {model.slack_bus}
    stack = [model.slack_bus]
    while stack:
        k = stack.pop()
        for m in adj[k]:
            if m not in seen:
                seen.add(m)
                stack.append(m)
    if len(seen) != n:
        missing = sorted(model.buses[k].id for k in range(n) if k not in seen)
        raise CaseParseError(f"islanded network: buses {missing} unreachable")
    return Y


# --- MATPOWER-style case parsing -------------------------------------------

_MATRIX_RE = re.compile(
    r"mpc\.(?P<name>\w+)\s*=\s*\[(?P<body>.*?)\]\s*;", re.DOTALL)
_SCALAR_RE = re.compile(
    r"mpc\.(?P<name>\w+)\s*=\s*(?P<value>[-\d.eE+]+)\s*;")


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_matrix(name: str, body: str):
    rows = []
    for rn, raw in enumerate(re.split(r"[;\n]", body)):
        raw = raw.strip()
        if not raw:
            continue
        try:
            rows.append([float(tok) for tok in raw.replace(",", " ").split()])
        except ValueError as exc:
            raise CaseParseError(f"table {name}, row {rn + 1}: {exc}") from None
    return rows


def parse_case(text: str, load_scale: float = 0.8, name: str = "case") -> NetworkModel:
    """Parse MATPOWER-style case text into a :class:`NetworkModel`.

    Supported tables: ``bus``, ``gen``, ``branch`` and quadratic version-2
    ``gencost``.  Loads are multiplied by ``load_scale`` at parse time.
    """
    text = _strip_comments(text)
    matrices = {}
    for m in _MATRIX_RE.finditer(text):
        matrices[m.group("name")] = _parse_matrix(m.group("name"), m.group("body"))
    scalars = {m.group("name"): float(m.group("value"))
               for m in _SCALAR_RE.finditer(text)}

    for required in ("bus", "gen", "branch"):
        if required not in matrices:
            raise CaseParseError(f"missing table mpc.{required}")
    if "baseMVA" not in scalars:
        raise CaseParseError("missing scalar mpc.baseMVA")
    base = scalars["baseMVA"]
    if base <= 0:
        raise CaseParseError("baseMVA must be positive")

    bus_rows = matrices["bus"]
    gen_rows = matrices["gen"]
    branch_rows = matrices["branch"]
    cost_rows = matrices.get("gencost", [])

    slack_ids = set()
    gen_bus_ids = {int(r[0]) for r in gen_rows if len(r) < 8 or r[7] > 0}
    buses = []
    loads = []
    for rn, r in enumerate(bus_rows):
        if len(r) < 13:
            raise CaseParseError(f"table bus, row {rn + 1}: expected 13 columns")
        bid, btype = int(r[0]), int(r[1])
        pd, qd, gs, bs = r[2], r[3], r[4], r[5]
        vmax, vmin = r[11], r[12]
        if btype == BUS_SLACK:
            slack_ids.add(bid)
            kind = "slack"
        elif bid in gen_bus_ids:
            kind = "generator"
        elif btype == BUS_PQ:
            kind = "load"
        elif btype == BUS_PV:
            raise CaseParseError(
                f"table bus, row {rn + 1}: PV bus {bid} has no in-service generator")
        else:
            raise CaseParseError(f"table bus, row {rn + 1}: unknown bus type {btype}")
        buses.append(Bus(id=bid, v_min=vmin, v_max=vmax, bus_kind=kind,
                         g_shunt=gs / base, b_shunt=bs / base))
        if pd != 0.0 or qd != 0.0:
            loads.append(LoadPoint(bus_id=bid,
                                   p_nominal=load_scale * pd / base,
                                   q_nominal=load_scale * qd / base))
    if len(slack_ids) > 1:
        raise CaseParseError("multiple slack buses")

    generators = []
    for rn, r in enumerate(gen_rows):
        if len(r) < 10:
            raise CaseParseError(f"table gen, row {rn + 1}: expected >= 10 columns")
        if len(r) >= 8 and r[7] <= 0:
            continue  # out of service
        cost = (0.0, 0.0, 0.0)
        if rn < len(cost_rows):
            c = cost_rows[rn]
            if len(c) < 4 or int(c[0]) != 2 or int(c[3]) != 3:
                raise CaseParseError(
                    f"table gencost, row {rn + 1}: only 3-term polynomial "
                    f"(model 2) costs are supported")
            cost = (c[4], c[5], c[6])
        generators.append(Generator(
            bus_id=int(r[0]),
            p_min=r[9] / base, p_max=r[8] / base,
            q_min=r[4] / base, q_max=r[3] / base,
            cost=cost, p_set=r[1] / base, v_set=r[5]))

    ang_default = math.radians(DEFAULT_ANGLE_LIMIT_DEG)
    lines = []
    for rn, r in enumerate(branch_rows):
        if len(r) < 13:
            raise CaseParseError(f"table branch, row {rn + 1}: expected 13 columns")
        if r[10] <= 0:
            continue  # out of service
        tap, shift = r[8], r[9]
        if (tap not in (0.0, 1.0)) or shift != 0.0:
            raise CaseParseError(
                f"table branch, row {rn + 1}: off-nominal transformer unsupported")
        rate = r[5] / base if r[5] > 0 else UNLIMITED_RATE_PU
        amin, amax = math.radians(r[11]), math.radians(r[12])
        if amin == 0.0 and amax == 0.0:  # MATPOWER convention: unconstrained
            amin, amax = -ang_default, ang_default
        amin = max(amin, -ang_default)
        amax = min(amax, ang_default)
        lines.append(Line(from_bus=int(r[0]), to_bus=int(r[1]),
                          z=complex(r[2], r[3]), b_charge=r[4],
                          s_max=rate, theta_min=amin, theta_max=amax))

    return NetworkModel(name=name, base_mva=base, buses=buses,
                        generators=generators, lines=lines, loads=loads)


def parse_case_file(path, load_scale: float = 0.8) -> NetworkModel:
    p = Path(path)
    return parse_case(p.read_text(), load_scale=load_scale, name=p.stem)
