"""Bundled test cases and their machine-dynamics sidecar files."""

from importlib import resources
from pathlib import Path


def case_path(name: str) -> Path:
    """Filesystem path of a bundled case file (e.g. ``case9``)."""
    if not name.endswith(".m"):
        name = name + ".m"
    with resources.as_file(resources.files(__package__) / name) as p:
        return Path(p)


def dynamics_path(name: str) -> Path:
    """Filesystem path of a bundled dynamics sidecar (e.g. ``case9``)."""
    if not name.endswith(".json"):
        name = name + "_dynamics.json"
    with resources.as_file(resources.files(__package__) / name) as p:
        return Path(p)
