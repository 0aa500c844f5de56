"""Exception types shared across the simulator and trainer."""


class BeamfocusError(Exception):
    """Base class for all package-specific errors."""


class DegenerateGeometry(BeamfocusError):
    """Geometric inputs admit no well-defined answer (coincident points,
    antiparallel directions at the grazing limit, ...)."""


class NotUnit(BeamfocusError):
    """A vector documented as a unit direction is not normalized."""


class GeometryError(BeamfocusError):
    """A geometric query fell outside its valid domain (e.g. specular point
    off a finite wall)."""


class ConfigError(BeamfocusError):
    """Configuration violates an invariant."""


class ActionShapeError(BeamfocusError):
    """An action batch has the wrong arity or component count."""


class PhaseError(BeamfocusError):
    """A macro-timescale operation was invoked off its step boundary."""


class ShapeMismatch(BeamfocusError):
    """Tensor or matrix shapes do not agree."""


class LengthMismatch(BeamfocusError):
    """Sequence arguments differ in length."""


class NonFinite(BeamfocusError):
    """A NaN or infinity appeared where only finite values are allowed."""


class DimensionMismatch(BeamfocusError):
    """A checkpoint or batch is incompatible with the configured sizes."""


class WorkerFailure(BeamfocusError):
    """A rollout environment failed; carries the env id and seed."""

    def __init__(self, env_id: int, seed, cause: Exception):
        super().__init__(f"env {env_id} (seed {seed}) failed: {cause!r}")
        self.env_id = env_id
        self.seed = seed
        self.cause = cause
