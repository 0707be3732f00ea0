class ShapeError(ValueError):
    """Operand shapes do not agree."""


class ParseError(ValueError):
    """Malformed input file. ``lineno`` is 1-based when known."""

    def __init__(self, msg, lineno=None):
        if lineno is not None:
            msg = f"line {lineno}: {msg}"
        super().__init__(msg)
        self.lineno = lineno


class ConfigError(ValueError):
    pass


class ProtocolError(RuntimeError):
    """Ranks disagree about a collective (round id, payload length, ...)."""


class CommError(RuntimeError):
    """A peer did not answer within the timeout."""
