"""dsagen: security-boundary dataset generation for power-system operation.

Generates labeled operating-point datasets densely concentrated around the
security boundary (AC feasibility intersected with a minimum small-signal
damping ratio), plus naive and importance-sampling benchmarks and a
decision-tree harness for evaluating data-driven security classifiers.

Submodules are imported explicitly, e.g. ``from dsagen import powerflow``.
"""

__version__ = "0.1.0"
