"""The unclassified region: a box plus certificate half-spaces, with
uniform sampling and Monte-Carlo volume tracking.

Rows are stored in ``A x <= b`` form.  Coordinates whose box is collapsed
(lo == hi, e.g. pinned zero-nominal loads) are treated as fixed: sampling
directions and the Chebyshev center ignore them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from ..errors import RelaxationError

FIXED_DIM_TOL = 1e-12
HR_BURN_IN = 100
HR_THINNING = 10


@dataclass
class Polytope:
    """{x : lo <= x <= hi, A x <= b} with the cut rows appended over time."""

    lo: np.ndarray
    hi: np.ndarray
    a: np.ndarray  # (m, dim) cut rows
    b: np.ndarray  # (m,)
    volume_history: list = field(default_factory=lambda: [1.0])

    @classmethod
    def from_box(cls, lo, hi) -> "Polytope":
        lo = np.asarray(lo, float).copy()
        hi = np.asarray(hi, float).copy()
        if lo.shape != hi.shape or np.any(lo > hi):
            raise RelaxationError("invalid box bounds")
        return cls(lo=lo, hi=hi, a=np.zeros((0, len(lo))), b=np.zeros(0))

    @property
    def dimension(self) -> int:
        return len(self.lo)

    @property
    def n_cuts(self) -> int:
        return self.a.shape[0]

    def free_dims(self) -> np.ndarray:
        return np.where(self.hi - self.lo > FIXED_DIM_TOL)[0]

    def add_cut(self, normal: np.ndarray, offset: float):
        """Append the certificate half-space, keeping {x : n.x >= offset}."""
        row = -np.asarray(normal, float)
        self.a = np.vstack([self.a, row])
        self.b = np.append(self.b, -float(offset))

    def contains(self, x, tol=1e-9):
        x = np.asarray(x, float)
        inside = np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol)
        if self.n_cuts and inside:
            inside = bool(np.all(self.a @ x <= self.b + tol))
        return bool(inside)

    def full_rows(self):
        """All rows (box facets first, then cuts) in A x <= b form."""
        d = self.dimension
        eye = np.eye(d)
        A = np.vstack([eye, -eye, self.a])
        b = np.concatenate([self.hi, -self.lo, self.b])
        return A, b

    def chebyshev_center(self) -> np.ndarray:
        """Center of the largest inscribed ball (over the free dimensions)."""
        free = self.free_dims()
        if len(free) == 0:
            return self.lo.copy()
        A, b = self.full_rows()
        fixed = np.setdiff1d(np.arange(self.dimension), free)
        b_adj = b - A[:, fixed] @ self.lo[fixed]
        Af = A[:, free]
        norms = np.linalg.norm(Af, axis=1)
        keep = norms > 0
        M = np.hstack([Af[keep], norms[keep, None]])
        cvec = np.zeros(len(free) + 1)
        cvec[-1] = -1.0  # maximize the radius
        res = linprog(cvec, A_ub=M, b_ub=b_adj[keep],
                      bounds=[(None, None)] * len(free) + [(0, None)],
                      method="highs")
        if not res.success or res.x[-1] <= 0:
            raise RelaxationError("empty polytope: no interior point found")
        x = self.lo.copy()
        x[free] = res.x[:-1]
        return x


def hit_and_run(polytope: Polytope, n: int, seed, burn_in=HR_BURN_IN,
                thinning=HR_THINNING, start=None) -> np.ndarray:
    """n asymptotically-uniform samples from the polytope (seeded chain).

    The chain starts at the Chebyshev center (or ``start``), discards
    ``burn_in`` steps and keeps every ``thinning``-th state.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    x = polytope.chebyshev_center() if start is None else np.asarray(start, float).copy()
    if not polytope.contains(x, tol=1e-7):
        raise RelaxationError("hit-and-run start point is outside the polytope")
    free = polytope.free_dims()
    if len(free) == 0:
        return np.tile(x, (n, 1))
    A, b = polytope.full_rows()
    out = np.empty((n, polytope.dimension))
    kept = 0
    step = 0
    total = burn_in + n * thinning
    while kept < n:
        step += 1
        d = np.zeros(polytope.dimension)
        g = rng.standard_normal(len(free))
        norm = np.linalg.norm(g)
        if norm == 0.0:
            continue
        d[free] = g / norm
        ad = A @ d
        slack = b - A @ x
        with np.errstate(divide="ignore", invalid="ignore"):
            t = slack / ad
        t_hi = t[ad > 1e-14]
        t_lo = t[ad < -1e-14]
        hi = np.min(t_hi) if len(t_hi) else np.inf
        lo = np.max(t_lo) if len(t_lo) else -np.inf
        if not np.isfinite(hi) or not np.isfinite(lo):
            raise RelaxationError("polytope is unbounded along a chord")
        lo, hi = min(lo, 0.0), max(hi, 0.0)  # keep the current point valid
        x = x + d * rng.uniform(lo, hi)
        if step > burn_in and (step - burn_in) % thinning == 0:
            out[kept] = x
            kept += 1
        if step > 100 * total:
            raise RelaxationError("hit-and-run failed to make progress")
    return out


def estimate_volume_ratio(polytope: Polytope, row: np.ndarray, offset: float,
                          samples: np.ndarray) -> float:
    """Fraction of polytope samples kept by a candidate row ``row.x <= offset``.

    Multiplying the current volume estimate by this fraction gives the next
    volume estimate for the stopping rule.
    """
    samples = np.atleast_2d(np.asarray(samples, float))
    if samples.shape[0] < 100:
        raise RelaxationError(
            f"insufficient samples for volume estimate ({samples.shape[0]} < 100)")
    kept = np.sum(samples @ np.asarray(row, float) <= offset + 1e-12)
    return float(kept) / samples.shape[0]


def save_polytope(polytope: Polytope, out_dir, index_map_hash: str):
    """Persist as a CSV pair (A rows, b entries) plus a JSON header."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    A, b = polytope.full_rows()
    np.savetxt(out / "polytope_A.csv", A, delimiter=",", fmt="%.17g")
    np.savetxt(out / "polytope_b.csv", b, delimiter=",", fmt="%.17g")
    header = {
        "dimension": polytope.dimension,
        "index_map_hash": index_map_hash,
        "n_cuts": polytope.n_cuts,
        "volume_history": polytope.volume_history,
    }
    (out / "polytope.json").write_text(
        json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_polytope(out_dir) -> tuple[Polytope, dict]:
    out = Path(out_dir)
    header = json.loads((out / "polytope.json").read_text())
    A = np.atleast_2d(np.loadtxt(out / "polytope_A.csv", delimiter=","))
    b = np.atleast_1d(np.loadtxt(out / "polytope_b.csv", delimiter=","))
    d = int(header["dimension"])
    hi = b[:d]
    lo = -b[d:2 * d]
    poly = Polytope(lo=lo, hi=hi, a=A[2 * d:], b=b[2 * d:],
                    volume_history=list(header["volume_history"]))
    return poly, header
