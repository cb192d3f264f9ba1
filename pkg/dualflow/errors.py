"""Error types raised by dualflow.

Every error carries a short ``code`` so the CLI can report failures as a single
machine-parsable line.
"""


class DualflowError(ValueError):
    """Base class for all dualflow errors."""

    code = "error"


class ShapeError(DualflowError):
    code = "shape-mismatch"


class NonFiniteError(DualflowError):
    code = "non-finite"


class GradientError(DualflowError):
    code = "gradient"


class PyramidError(DualflowError):
    code = "image-too-small"


class StimulusError(DualflowError):
    code = "stimulus"


class AliasingError(StimulusError):
    code = "aliasing"


class RegionExitError(StimulusError):
    code = "region-exit"


class GraphSizeError(DualflowError):
    code = "graph-too-large"


class LaplacianError(DualflowError):
    """Invalid adjacency; ``node`` names the offending node when there is one."""

    code = "laplacian"

    def __init__(self, message: str, node: int | None = None) -> None:
        super().__init__(message)
        self.node = node


class DegenerateSpectrumError(DualflowError):
    code = "degenerate-spectrum"


class DegenerateMaskError(DualflowError):
    code = "degenerate-mask"


class CorrelationError(DualflowError):
    code = "undefined-correlation"


class DegenerateTuningError(DualflowError):
    code = "degenerate-tuning"


class FloFormatError(DualflowError):
    code = "flo-format"


class BadMagicError(FloFormatError):
    code = "bad-magic"


class TruncatedFileError(FloFormatError):
    code = "truncated-file"


class BadDimensionsError(FloFormatError):
    code = "bad-dimensions"


class SequenceLoadError(DualflowError):
    code = "sequence-load"


class CheckpointError(DualflowError):
    code = "checkpoint"


class ConfigError(DualflowError):
    code = "config"


class TrainingDivergedError(DualflowError):
    code = "nan-loss"

    def __init__(self, message: str, batch_id: int) -> None:
        super().__init__(message)
        self.batch_id = batch_id
