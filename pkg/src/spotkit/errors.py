"""Exception types shared across spotkit."""


class SpotkitError(Exception):
    """Base class for every error raised by this package."""


class QuantizationRangeError(SpotkitError, ValueError):
    def __init__(self, axis, value, limit):
        self.axis = axis
        self.value = value
        self.limit = limit
        super().__init__(f"{axis}={value!r} outside [0, {limit}]")


class VocabularyError(SpotkitError, ValueError):
    pass


class TaskGrammarError(SpotkitError, ValueError):
    """Instances lack the labels a task grammar requires."""


class TableStructureError(SpotkitError, ValueError):
    pass


class AlignmentError(SpotkitError, ValueError):
    """Two index-aligned collections have different lengths."""


class GeometryError(SpotkitError, ValueError):
    pass


class ConfigError(SpotkitError, ValueError):
    pass


class PlacementError(SpotkitError, RuntimeError):
    pass


class ContractError(SpotkitError, ValueError):
    pass


class DivergenceError(SpotkitError, RuntimeError):
    def __init__(self, step, last_checkpoint=None):
        self.step = step
        self.last_checkpoint = last_checkpoint
        super().__init__(f"non-finite loss at step {step}")
