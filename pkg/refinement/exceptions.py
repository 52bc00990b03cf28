class PoseRefinementError(Exception):
    """Base class for every error raised by the refinement toolkit."""


class InvalidArgumentError(PoseRefinementError, ValueError):
    pass


class BehindCameraError(InvalidArgumentError):
    """A point that must be projected has nonpositive depth."""


class DegeneratePoseError(InvalidArgumentError):
    pass


class MeshFormatError(PoseRefinementError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ''
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{where}{message}")


class EmptyMeshError(MeshFormatError):
    pass


class CriticProtocolError(PoseRefinementError):
    pass


class RefinementAborted(PoseRefinementError):
    """An objective evaluation failed mid-run; ``trace`` holds what was recorded."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class VisibilityExhaustedError(PoseRefinementError):
    pass


class ConfigurationError(PoseRefinementError):
    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


class KeyMismatchError(ConfigurationError):
    def __init__(self, missing, extra):
        self.missing = sorted(missing)
        self.extra = sorted(extra)
        super().__init__(
            f"Estimated and ground-truth keys differ: "
            f"{len(self.missing)} missing, {len(self.extra)} extra",
            details={'missing': self.missing, 'extra': self.extra},
        )
