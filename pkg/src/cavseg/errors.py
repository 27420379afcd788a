"""Exception and warning types shared across the package."""


class CavsegError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(CavsegError, ValueError):
    """A configuration value or config file is invalid."""


class InvalidConfig(ConfigError):
    """Phantom generator configuration violates its invariants."""


# volume grid / NIfTI I/O -----------------------------------------------------

class MalformedHeader(CavsegError, ValueError):
    """NIfTI-1 header is not the supported single-file little-endian form."""


class UnsupportedDatatype(CavsegError, ValueError):
    """NIfTI datatype other than uint8, int16 or float32."""


class TruncatedFile(CavsegError, ValueError):
    """File data segment is shorter than the header promises."""


class IoFailure(CavsegError, OSError):
    """Reading or writing a file failed."""


class EmptyForeground(CavsegError, ValueError):
    """Normalization requested on an all-zero volume."""


class ChannelDimsMismatch(CavsegError, ValueError):
    """Channels of one case do not share dims/spacing."""


class MissingChannel(CavsegError, ValueError):
    """A manifest entry lacks one of the four required channels."""


# autodiff / model ------------------------------------------------------------

class ShapeMismatch(CavsegError, ValueError):
    """Operands have incompatible shapes."""


class OddSpatialDim(CavsegError, ValueError):
    """Max-pooling requires even spatial extents."""


class NotScalar(CavsegError, ValueError):
    """backward() was called on a non-scalar tensor."""


class IndivisiblePatch(CavsegError, ValueError):
    """Input spatial dims are not divisible by the pooling stride product."""


# pipeline --------------------------------------------------------------------

class NoForeground(CavsegError, ValueError):
    """Patch sampling requires a non-empty mask."""


class MissingGradient(CavsegError, RuntimeError):
    """Optimizer step requested before gradients were populated."""


class TrainingFailure(CavsegError, RuntimeError):
    """A training unit failed irrecoverably."""


class NoBackgroundPatchWarning(UserWarning):
    """Background-only patch sampling failed; a foreground patch was substituted."""


# evaluation / statistics -----------------------------------------------------

class TooFewCases(CavsegError, ValueError):
    """Not enough cases for the requested split."""


class LengthMismatch(CavsegError, ValueError):
    """Paired samples have different lengths."""


class AllZeroDifferences(CavsegError, ValueError):
    """Every paired difference is zero; the signed-rank test is undefined."""


class EmptyInput(CavsegError, ValueError):
    """An operation received an empty collection."""


class UnpairedRecords(CavsegError, ValueError):
    """Metric records do not cover the same case set for every configuration."""
