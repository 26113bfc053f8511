"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates an operation's precondition."""


class ParseError(ValueError):
    """A serialized object (RLE string, JSON file, raw payload) is malformed."""

    def __init__(self, message: str, source: str | None = None, offset: int | None = None):
        where = ""
        if source is not None:
            where = f"{source}"
            if offset is not None:
                where += f" @ {offset}"
            where += ": "
        super().__init__(where + message)
        self.source = source
        self.offset = offset


class ValidationError(ValueError):
    """Inputs are individually well-formed but inconsistent with each other."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class ConfigError(ValueError):
    """A configuration cannot be satisfied (e.g. phantom placement failed)."""


class DetectorError(RuntimeError):
    """Raised by or on behalf of an external detector hook."""
