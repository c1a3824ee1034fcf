"""Exception types shared across the package."""


class MagicError(Exception):
    """Base class for all errors raised by :mod:`magicct`."""


class ConfigError(MagicError, ValueError):
    """Invalid geometry, hyperparameters or experiment configuration."""


class InputError(MagicError, ValueError):
    """Array arguments with the wrong shape, sign or content."""


class FormatError(MagicError, ValueError):
    """Malformed file on disk.

    ``offset`` is the byte offset at which parsing failed.
    """

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DivergenceError(MagicError, RuntimeError):
    """Training produced a non-finite loss."""
