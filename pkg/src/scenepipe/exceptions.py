"""Error hierarchy shared by every pipeline stage.

Each error also derives from the nearest builtin, so ``except ValueError`` and
friends keep catching them.
"""


class ScenePipeError(Exception):
    """Root of all scenepipe errors."""


class ConfigError(ScenePipeError, ValueError):
    pass


class ShapeError(ScenePipeError, ValueError):
    pass


class ChannelError(ShapeError):
    pass


class BoundsError(ScenePipeError, IndexError):
    pass


class AlignmentError(ScenePipeError, ValueError):
    pass


class ArgumentError(ScenePipeError, ValueError):
    pass


class NumericError(ScenePipeError, ArithmeticError):
    """A loss, score or feature went non-finite.

    Args:
        message (str): Human-readable description.
        term (str | None): Name of the offending loss term, if known.
    """

    def __init__(self, message: str, term: str | None = None) -> None:
        super().__init__(message if term is None else f'{message} [term: {term}]')
        self.term = term


class DecodeError(ScenePipeError, OSError):
    pass


class PersistenceError(ScenePipeError, OSError):
    pass


class CheckpointError(ScenePipeError, OSError):
    pass


class PriorLoadError(ScenePipeError, ImportError):
    pass
