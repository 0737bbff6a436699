"""Exception types shared across the package.

The CLI maps InputError to exit code 2 and DataMismatchError to exit
code 3; everything else is a programming error and propagates.
"""


class InputError(Exception):
    """Bad user input: unreadable/missing files, invalid configuration."""


class ParseError(InputError):
    """Malformed serialized data; message names the offending record."""


class DataMismatchError(Exception):
    """Inconsistent data: dimension mismatches, misaligned utterance ids."""
