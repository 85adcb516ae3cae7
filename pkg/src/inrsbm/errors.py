"""Exception types shared across the pipeline.

Two families matter to callers: input/config problems (``InputError``) and
numerical failures (``NumericalError``). The CLI maps them to exit codes 2 and 3.
"""


class InputError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


class DomainError(InputError):
    """Non-finite query point or invalid shape parameters."""


class ParameterError(InputError):
    pass


class DegenerateGradientError(NumericalError):
    """Gradient norm below the degeneracy floor (medial axis / kink)."""

    def __init__(self, message, points=None):
        super().__init__(message)
        self.points = points


class MeshReadError(InputError):
    code = "unreadable"


class MeshFormatError(MeshReadError):
    code = "format"


class EmptyMeshError(MeshReadError):
    code = "empty"


class NotWatertightError(NumericalError):
    """Sign is unavailable; ``unsigned`` carries the distances anyway."""

    def __init__(self, message, unsigned=None, foot=None):
        super().__init__(message)
        self.unsigned = unsigned
        self.foot = foot


class SamplingError(NumericalError):
    pass


class TrainingDiverged(NumericalError):
    def __init__(self, step, message=None):
        super().__init__(message or f"training diverged at step {step}")
        self.step = step


class EmptyBandError(InputError):
    pass


class OctreeError(InputError):
    pass


class UnbalancedTreeError(OctreeError):
    pass


class ClassificationError(NumericalError):
    pass


class BoundaryError(NumericalError):
    pass


class AssemblyError(NumericalError):
    pass


class LinearSolverError(NumericalError):
    pass


class ZeroPivotError(LinearSolverError):
    pass


class BreakdownError(LinearSolverError):
    pass


class KrylovNonConvergence(LinearSolverError):
    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = stats


class ConstraintCycleError(InputError):
    pass


class NewtonNonConvergence(NumericalError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


class ConfigError(InputError):
    pass
