"""
Exception hierarchy for the EDNN engine.

Every error raised on purpose by the library derives from EdnnError. The CLI maps
ConfigurationError to exit code 2 and every other EdnnError to exit code 1.
"""


class EdnnError(Exception):
    """Base class of all library errors"""
    exit_code = 1


class ConfigurationError(EdnnError):
    """Invalid configuration, missing input file, inconsistent problem setup"""
    exit_code = 2


class FormatError(EdnnError, ValueError):
    """Malformed interchange file (basis, mesh, CSV)"""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{message} (field: {field})")
        self.field = field


class LookupFailure(EdnnError, KeyError):
    """Point not tabulated in a discrete basis"""

    def __str__(self):
        return str(self.args[0]) if self.args else ''


class CapabilityError(EdnnError):
    """Requested derivative order exceeds what a basis or batch provides"""


class ShapeError(EdnnError, ValueError):
    """Array width or length does not match the network/config"""


class MeshError(EdnnError):
    """Invalid mesh: degenerate triangle, uncovered boundary edge, point outside the mesh"""

    def __init__(self, message, triangle=None):
        super().__init__(message)
        self.triangle = triangle


class SolverError(EdnnError):
    """Linear/eigen/Newton solver failure"""

    def __init__(self, message, residual=None):
        super().__init__(message if residual is None else f"{message} (residual {residual:.3e})")
        self.residual = residual


class RhsError(EdnnError):
    """Non-finite PDE right-hand side"""

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} at point {index}")
        self.index = index


class SamplingError(EdnnError):
    """Non-finite importance weight"""

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} at candidate {index}")
        self.index = index


class MetricError(EdnnError):
    """Zero-norm denominator in an error metric"""


class StepRejected(EdnnError):
    """Time integration aborted after too many consecutive step rejections"""

    def __init__(self, message, t=None, h=None):
        super().__init__(message)
        self.t = t
        self.h = h
