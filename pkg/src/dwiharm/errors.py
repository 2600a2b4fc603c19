"""Exception types shared across the package.

Every error carries a short machine-readable ``code`` so the CLI can print
one parseable line per failure.
"""


class HarmonizationError(Exception):
    """Base class for all package errors."""

    code = "error"


class FormatError(HarmonizationError):
    """Unreadable or inconsistent file content (bad magic, count mismatch...)."""

    code = "format"


class ArgumentError(HarmonizationError, ValueError):
    """Invalid argument or violated precondition."""

    code = "argument"


class ExtractionError(HarmonizationError):
    """Patch extraction produced no usable output."""

    code = "extraction"


class FitError(HarmonizationError):
    """Model fit could not be carried out (rank deficiency, too few directions)."""

    code = "fit"


class EvaluationError(HarmonizationError):
    """A statistical comparison could not be evaluated."""

    code = "evaluation"


class DegenerateDataError(HarmonizationError):
    """Degenerate statistical input (zero variance and similar)."""

    code = "degenerate"
