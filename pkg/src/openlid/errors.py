"""Exception types shared across the toolkit."""


class OpenLidError(Exception):
    """Base class for all toolkit errors."""


class FormatError(OpenLidError):
    """Input violates a documented file format (bad magic, wrong version, ...)."""


class UnsupportedEncodingError(FormatError):
    """Well-formed container, but an encoding we deliberately do not handle."""


class CorruptFileError(FormatError):
    """File is structurally damaged (truncated payload, impossible sizes)."""


class StaleArtifactError(OpenLidError):
    """A pipeline artifact no longer matches the inputs it was built from."""


class NumericError(OpenLidError):
    """A numeric invariant broke at runtime (NaN loss, non-finite gradient)."""
