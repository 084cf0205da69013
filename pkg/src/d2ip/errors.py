"""Exception classes shared across the package.

Plain ``ValueError`` is used for invalid arguments; the classes here cover
failure modes that callers may want to catch separately (and that the CLI
maps to distinct exit codes).
"""


class DegenerateOperatorError(RuntimeError):
    """A linear operator is unusable, e.g. a sensitivity row of all zeros."""


class FormatError(ValueError):
    """A data file and its sidecar disagree, or a sidecar is malformed."""


class NumericalError(RuntimeError):
    """An optimization or solve produced non-finite values."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. constant volumes)."""


class ReconstructionAborted(NumericalError):
    """A sequence run failed mid-way; partial results are attached.

    Attributes:
        frame_index: 1-based index of the frame that failed.
        partial: the ReconstructionResult accumulated before the failure.
    """

    def __init__(self, message, frame_index, partial=None):
        super().__init__(message)
        self.frame_index = frame_index
        self.partial = partial
