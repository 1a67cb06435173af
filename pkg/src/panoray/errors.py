"""Error types shared across the toolkit.

The CLI maps each class to a distinct diagnostic prefix, so keep the split:
FormatError for broken file contents, DimsError for shape/dimension trouble.
"""


class FormatError(ValueError):
    """A file's header or payload does not match its declared format."""


class DimsError(ValueError):
    """Dimensions are invalid or inconsistent between two objects."""
