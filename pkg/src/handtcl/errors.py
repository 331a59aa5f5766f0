"""Exception types raised across the package.

Every error subclasses :class:`HandTCLError` and carries a stable ``code``
string, which the command line layer serializes into its JSON error objects.
"""


class HandTCLError(Exception):
    code = "error"


class DegenerateInput(HandTCLError, ValueError):
    code = "degenerate_input"


class NotARotation(HandTCLError, ValueError):
    code = "not_a_rotation"


class InvalidCamera(HandTCLError, ValueError):
    code = "invalid_camera"


class InvalidConfig(HandTCLError, ValueError):
    code = "invalid_config"


class OutOfRange(HandTCLError, IndexError):
    code = "out_of_range"


class InvalidStrategy(HandTCLError, ValueError):
    code = "invalid_strategy"


class EmptyCandidates(HandTCLError, ValueError):
    code = "empty_candidates"


class SequenceTooShort(HandTCLError, ValueError):
    code = "sequence_too_short"


class ShapeMismatch(HandTCLError, ValueError):
    code = "shape_mismatch"


class ZeroVector(HandTCLError, ValueError):
    code = "zero_vector"


class EmptyBatch(HandTCLError, ValueError):
    code = "empty_batch"


class GraphNotBuilt(HandTCLError, RuntimeError):
    code = "graph_not_built"


class DegenerateCloud(HandTCLError, ValueError):
    code = "degenerate_cloud"


class TooShort(HandTCLError, ValueError):
    code = "too_short"


class FormatError(HandTCLError, ValueError):
    """A dataset container, manifest or checkpoint failed validation."""

    code = "format_error"
