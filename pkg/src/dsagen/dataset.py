"""Uniform labeling, persistence, statistics, and balance resampling.

All three generators (directed walks, Latin hypercube, importance) emit the
same row schema, so datasets are interchangeable downstream:

    id, PG_<gid>..., VG_<gid>..., PD_<bus>..., QD_<bus>...,
    converged, feasible, zeta, stable, secure, in_hic, source, seed

Values are per-unit, formatted with 9 significant digits; flags are 0/1;
zeta is blank when undefined (diverged flow).  Writing the same samples
twice yields byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InsufficientDataError
from .netmodel import NetworkModel, OperatingPoint, from_vector
from .powerflow import check_feasibility, solve_pf
from .smallsignal import DynamicsSet, try_zeta
from .walker import SecuritySpec

FLOAT_FMT = "%.9g"


@dataclass(frozen=True)
class LabeledSample:
    id: int
    x: np.ndarray
    converged: bool
    feasible: bool
    zeta: float | None
    stable: bool
    secure: bool
    in_hic: bool
    source: str  # "dw" | "lhc" | "importance" | "projection"
    seed: int


@dataclass(frozen=True)
class DatasetStats:
    feasible_share: float
    stable_share: float
    secure_share: float
    hic_share: float

    def as_dict(self):
        return {"feasible": self.feasible_share, "stable": self.stable_share,
                "secure": self.secure_share, "hic": self.hic_share}


def label(sample_id: int, op: OperatingPoint, converged: bool, feasible: bool,
          zeta: float | None, spec: SecuritySpec, source: str,
          seed: int) -> LabeledSample:
    """Apply the security semantics to one evaluated point.

    secure  <=> feasible and zeta >= gamma
    in_hic  <=> converged and gamma - beta < zeta < gamma + beta
    diverged points are never secure nor in the band.
    """
    if not converged:
        feasible = False
        zeta = None
    stable = zeta is not None and zeta > 0.0
    secure = bool(feasible and zeta is not None and zeta >= spec.gamma)
    in_hic = bool(converged and spec.in_band(zeta))
    return LabeledSample(id=sample_id, x=np.asarray(op.x, float),
                         converged=bool(converged), feasible=bool(feasible),
                         zeta=zeta, stable=bool(stable), secure=secure,
                         in_hic=in_hic, source=source, seed=int(seed))


def evaluate_and_label(model: NetworkModel, dynamics: DynamicsSet,
                       op: OperatingPoint, spec: SecuritySpec, sample_id: int,
                       source: str, seed: int,
                       state=None, zeta=None) -> LabeledSample:
    """Solve, assess damping, check feasibility, and label in one step."""
    if state is None:
        state, zeta = try_zeta(model, dynamics, op)
    elif zeta is None and state.converged:
        _, zeta = try_zeta(model, dynamics, op, state)
    feasible = bool(state.converged
                    and check_feasibility(model, state).feasible)
    return label(sample_id, op, state.converged, feasible, zeta, spec,
                 source, seed)


def columns(model: NetworkModel):
    imap = model.input_index_map()
    cols = ["id"]
    cols += [f"PG_{model.generators[gi].bus_id}" for gi in imap.pg_gens]
    cols += [f"VG_{model.generators[gi].bus_id}" for gi in imap.vg_gens]
    cols += [f"PD_{model.loads[li].bus_id}" for li in imap.load_idx]
    cols += [f"QD_{model.loads[li].bus_id}" for li in imap.load_idx]
    cols += ["converged", "feasible", "zeta", "stable", "secure", "in_hic",
             "source", "seed"]
    return cols


def write_csv(samples, model: NetworkModel, path):
    rows = [columns(model)]
    for s in samples:
        row = [str(s.id)]
        row += [FLOAT_FMT % v for v in s.x]
        row += [str(int(s.converged)), str(int(s.feasible)),
                "" if s.zeta is None else FLOAT_FMT % s.zeta,
                str(int(s.stable)), str(int(s.secure)), str(int(s.in_hic)),
                s.source, str(s.seed)]
        rows.append(row)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue())


def read_csv(path, model: NetworkModel):
    expected = columns(model)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != expected:
            raise InsufficientDataError(
                f"dataset columns do not match the model (got {header[:4]}...)")
        dim = model.input_index_map().dimension
        samples = []
        for row in reader:
            x = np.array([float(v) for v in row[1:1 + dim]])
            tail = row[1 + dim:]
            zeta = None if tail[2] == "" else float(tail[2])
            samples.append(LabeledSample(
                id=int(row[0]), x=x, converged=tail[0] == "1",
                feasible=tail[1] == "1", zeta=zeta, stable=tail[3] == "1",
                secure=tail[4] == "1", in_hic=tail[5] == "1",
                source=tail[6], seed=int(tail[7])))
    return samples


def stats(samples) -> DatasetStats:
    if not samples:
        raise InsufficientDataError("cannot compute statistics of an empty dataset")
    n = len(samples)
    return DatasetStats(
        feasible_share=sum(s.feasible for s in samples) / n,
        stable_share=sum(s.stable for s in samples) / n,
        secure_share=sum(s.secure for s in samples) / n,
        hic_share=sum(s.in_hic for s in samples) / n,
    )


def rebalance(samples, n: int, mode: str, seed) -> list:
    """Subsample: uniformly at random, or half secure / half insecure."""
    rng = np.random.default_rng(seed)
    samples = list(samples)
    if mode == "random":
        if n > len(samples):
            raise InsufficientDataError(
                f"requested {n} of {len(samples)} samples")
        idx = rng.choice(len(samples), size=n, replace=False)
        return [samples[i] for i in sorted(idx)]
    if mode == "balanced-secure":
        secure = [s for s in samples if s.secure]
        insecure = [s for s in samples if not s.secure]
        half, rem = n // 2, n % 2
        if len(secure) < half + rem or len(insecure) < half:
            raise InsufficientDataError(
                f"balanced resample of {n} needs {half + rem} secure and "
                f"{half} insecure; have {len(secure)} / {len(insecure)}")
        pick_s = rng.choice(len(secure), size=half + rem, replace=False)
        pick_i = rng.choice(len(insecure), size=half, replace=False)
        out = [secure[i] for i in sorted(pick_s)]
        out += [insecure[i] for i in sorted(pick_i)]
        return out
    raise ValueError(f"unknown rebalance mode {mode!r}")


def renumber(samples):
    """Reassign consecutive ids (after merges or subsampling)."""
    return [replace(s, id=i) for i, s in enumerate(samples)]


def audit(samples, model: NetworkModel, dynamics: DynamicsSet,
          spec: SecuritySpec, k: int = 100, seed: int = 0):
    """Re-derive the flags of k random rows from their stored x alone.

    Returns the list of mismatching sample ids (empty = consistent).
    """
    rng = np.random.default_rng(seed)
    pool = list(samples)
    idx = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
    bad = []
    for i in sorted(idx):
        s = pool[i]
        op = from_vector(model, s.x)
        fresh = evaluate_and_label(model, dynamics, op, spec, s.id,
                                   s.source, s.seed)
        zeta_ok = (s.zeta is None and fresh.zeta is None) or (
            s.zeta is not None and fresh.zeta is not None
            and abs(s.zeta - fresh.zeta) < 1e-9)
        if not (fresh.converged == s.converged and fresh.feasible == s.feasible
                and fresh.stable == s.stable and fresh.secure == s.secure
                and fresh.in_hic == s.in_hic and zeta_ok):
            bad.append(s.id)
    return bad


def write_stats(samples, path):
    st = stats(samples)
    Path(path).write_text(json.dumps(st.as_dict(), indent=2, sort_keys=True) + "\n")


def write_manifest(path, model: NetworkModel, config: dict, seeds):
    from . import __version__

    manifest = {
        "case": model.name,
        "case_hash": model.case_hash(),
        "index_map_hash": model.input_index_map().fingerprint(),
        "config": config,
        "seeds": seeds,
        "version": __version__,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]
