"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument violates a documented precondition."""


class InsufficientDataError(RuntimeError):
    """A private subroutine could not produce a usable release.

    Raised by the dyadic-histogram scale estimator when every noisy bin is
    zeroed out, and by the private range subroutine of the mean estimator.
    The caller decides whether to abort or fall back.
    """


class ProtocolError(RuntimeError):
    """A site-local computation broke the round/partition discipline."""


class DivergenceError(ArithmeticError):
    """Gradient-descent iterates left the finite range; carries the round index."""

    def __init__(self, round_index: int, detail: str = ""):
        self.round_index = round_index
        super().__init__(f"iterates diverged at round {round_index}" + (f": {detail}" if detail else ""))


class CalibrationError(RuntimeError):
    """Threshold calibration failed to reach the target recovery rate."""


class TranscriptFormatError(ValueError):
    """A serialized transcript could not be parsed."""
