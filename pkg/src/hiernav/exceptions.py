class HierNavError(Exception):
    """Base class for user-facing validation errors."""


class HierarchyError(HierNavError, ValueError):
    pass


class DatasetError(HierNavError, ValueError):
    pass


class ModelError(HierNavError, ValueError):
    pass


class CalibrationError(HierNavError, ValueError):
    """Raised when a node lacks the calibration pairs needed for a threshold."""

    def __init__(self, message, nodes=()):
        super().__init__(message)
        self.nodes = tuple(nodes)


class TrainingDivergedError(HierNavError, RuntimeError):
    pass
