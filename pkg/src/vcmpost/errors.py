"""Exception taxonomy shared across the toolkit.

Exit-code policy for the CLI: errors a user can fix by changing inputs or
flags (usage, config, validation, parsing, templates, ingestion) map to
exit code 2; everything else is an internal failure and maps to 1.
"""


class VcmpostError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(VcmpostError):
    """Invalid configuration value; message names the offending field."""


class UsageError(VcmpostError):
    """Operation called with arguments outside its contract."""


class ShapeMismatchError(VcmpostError):
    """Tensor or frame shapes do not line up."""


class ValidationError(VcmpostError):
    """Input data violates a documented invariant."""


class ParseError(VcmpostError):
    """Malformed text input; message carries file and line context."""


class FormatError(VcmpostError):
    """Binary or structured payload does not match the expected layout."""


class CapabilityError(VcmpostError):
    """Backend does not support the requested capability."""


class TemplateError(VcmpostError):
    """Command template is missing a required placeholder."""


class EncoderEnvironmentError(VcmpostError):
    """External encoder binary could not be located or started."""


class CodecError(VcmpostError):
    """External encoder ran but failed; message carries captured output."""


class IngestionError(VcmpostError):
    """Referenced media or manifest entries could not be loaded."""


class AlignmentError(VcmpostError):
    """Paired sequences disagree in frame count or frame size."""


USER_ERRORS = (
    ConfigurationError,
    UsageError,
    ValidationError,
    ParseError,
    FormatError,
    TemplateError,
    IngestionError,
    CapabilityError,
    EncoderEnvironmentError,
)
