"""Exception hierarchy shared by all dsagen modules."""


class DsagenError(Exception):
    """Base class for all errors raised by this package."""


class CaseParseError(DsagenError):
    """A case file is syntactically or semantically invalid."""


class ConfigError(DsagenError):
    """A run configuration is missing, malformed, or inconsistent."""


class PowerFlowError(DsagenError):
    """A power-flow operation was used outside its contract."""


class RelaxationError(DsagenError):
    """A conic solve or polytope operation failed."""


class ProjectionError(DsagenError):
    """The nonlinear feasibility projection could not produce a usable point."""


class LinearizationError(DsagenError):
    """Small-signal linearization failed (singular algebraics, bad input)."""


class InsufficientDataError(DsagenError):
    """Not enough samples or class members to perform the requested operation."""
