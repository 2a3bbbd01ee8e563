"""Exception types shared across the package.

The CLI maps these onto its exit codes, so every module raises one of these
rather than a bare ``ValueError`` when the failure is part of the contract.
"""


class MeshDrrError(Exception):
    """Base class for all package errors."""


class MeshError(MeshDrrError):
    """Malformed mesh data (bad indices, empty mesh, unparsable file)."""


class CameraError(MeshDrrError):
    """Projection matrix and detector geometry disagree or are invalid."""


class ProjectionError(MeshDrrError):
    """A vertex cannot be projected (behind the source or past the detector)."""


class ContainmentError(MeshDrrError):
    """A nested object extends outside its container by more than the tolerance."""

    def __init__(self, message, pixels=()):
        super().__init__(message)
        self.pixels = list(pixels)


class MaterialError(MeshDrrError):
    """A scene label has no attenuation table."""


class DimensionError(MeshDrrError):
    """Image shapes do not match each other or the detector."""


class NgcUndefinedError(MeshDrrError):
    """Correlation is undefined because no gradient channel varies in both images."""


class NonFiniteLossError(MeshDrrError):
    """The optimizer produced a NaN or infinite loss."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory or []


class MissingForwardError(MeshDrrError):
    """A backward pass was requested without its forward artifacts."""


class ConfigError(MeshDrrError):
    """Invalid scene, generator or optimizer configuration."""
