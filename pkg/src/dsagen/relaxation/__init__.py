"""Convex relaxation machinery: QC programs, bound tightening, certificates.

Public surface re-exported here:

- :func:`solve_qc`, :func:`obbt`, :func:`closest_qc_projection`,
  :class:`Bounds`, :class:`RelaxedSolution` (``qc``)
- :class:`Polytope`, :func:`hit_and_run`, :func:`estimate_volume_ratio`
  (``polytope``)
- :func:`make_hyperplane`, :func:`separating_hyperplanes`,
  :class:`HyperplaneConfig` (``hyperplanes``)
"""

from .qc import (  # noqa: F401
    Bounds,
    QcProjection,
    RelaxedSolution,
    initial_bounds,
    obbt,
    closest_qc_projection,
    solve_qc,
)
from .polytope import (  # noqa: F401
    Polytope,
    estimate_volume_ratio,
    hit_and_run,
    load_polytope,
    save_polytope,
)
from .hyperplanes import (  # noqa: F401
    HyperplaneConfig,
    make_hyperplane,
    separating_hyperplanes,
)
