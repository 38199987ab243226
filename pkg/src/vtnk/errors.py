"""Exception hierarchy shared across the kernel modules.

Everything raised on bad *input* derives from VtnkError so callers (and the
CLI) can distinguish user errors from internal failures.
"""


class VtnkError(Exception):
    """Base class for all input/contract violations raised by this package."""


# --- geometry ---

class AllRegionsAbsent(VtnkError):
    """No body region has enough confident keypoints to build a box."""


class DimensionMismatch(VtnkError):
    """Grids/boxes built on one canvas were applied to another."""


class DegenerateCorners(VtnkError):
    """Three of the four correspondence corners are (nearly) collinear."""


class MissingHomography(VtnkError):
    """A region mask has no matching homography."""


class EmptyMask(VtnkError):
    """A mask with zero set pixels where a nonempty one is required."""


# --- spectral ---

class NonPositiveTau(VtnkError):
    """Gaussian cutoff parameter must be > 0."""


class ExcessiveImaginaryResidual(VtnkError):
    """Inverse transform produced an imaginary part too large to discard."""


class ShapeMismatch(VtnkError):
    """Spectra/latents with incompatible shapes."""


# --- attention ---

class DimMismatch(VtnkError):
    """Token or head dimensions of attention tensors do not agree."""


class InvalidTarget(VtnkError):
    """Pooling target larger than the source grid or non-positive."""


# --- pipeline ---

class InvalidSteps(VtnkError):
    """Schedule step count outside the valid range."""


class HookMismatch(VtnkError):
    """Denoising branches disagree on the attention layer registry."""


class PipelineStageError(VtnkError):
    """Failure inside a named pipeline stage; wraps the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# --- io ---

class BadMagic(VtnkError):
    """File does not start with the tensor container magic."""


class UnsupportedVersion(VtnkError):
    """Tensor container version not understood by this reader."""


class UnsupportedDtype(VtnkError):
    """Tensor container dtype code not understood by this reader."""


class TruncatedPayload(VtnkError):
    """Payload length does not match the header-declared dimensions."""


class MalformedDocument(VtnkError):
    """Keypoint document is not parseable or lacks required fields."""


class WrongKeypointCount(VtnkError):
    """A person entry does not carry exactly 25 (x, y, confidence) triples."""


class UnsupportedFormat(VtnkError):
    """Raster file is not 8-bit grayscale/RGB in a lossless format."""


class DecodeError(VtnkError):
    """Raster file exists but cannot be decoded."""
