"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class UsageError(ValueError):
    """An API was called in a way its contract forbids."""


class TrainingError(RuntimeError):
    """Optimization failed; carries the step index where it happened."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SamplingError(RuntimeError):
    """ODE integration produced a non-finite state; carries the step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SingularityError(ValueError):
    """A time value hit the singular endpoint of a velocity formula."""


class SceneSpecError(ValueError):
    """A scene specification violates its geometric constraints."""


class EmptyMaskError(ValueError):
    """An operation requiring a non-empty mask received an empty one."""


class ConfigError(ValueError):
    """A run configuration is malformed or contains unknown keys."""


class PipelineOrderError(RuntimeError):
    """A training phase was requested before its prerequisite phase ran."""

    def __init__(self, message, missing_phase=None):
        super().__init__(message)
        self.missing_phase = missing_phase


class MetricError(ValueError):
    """A metric could not be evaluated on the given inputs."""


class IntegrityError(RuntimeError):
    """Frozen parameters were mutated by a phase that must not touch them."""
