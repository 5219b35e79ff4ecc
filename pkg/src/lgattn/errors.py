"""Exception hierarchy shared across the package."""


class LgattnError(Exception):
    pass


class ShapeError(LgattnError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(LgattnError):
    """A precondition of an operation was violated."""


class DegenerateError(LgattnError, ValueError):
    """A reduction has nothing to reduce over (fully masked row, all targets ignored)."""


class ConfigError(LgattnError, ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key is not None:
            where += f"[{key}]"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"{where} {message}".strip())
        self.key = key
        self.line = line


class ExtrapolationError(LgattnError, ValueError):
    """Absolute position embeddings asked for a position past the table."""


class TokenRangeError(LgattnError, IndexError):
    """Token or target id outside the vocabulary."""


class NonFiniteError(LgattnError, FloatingPointError):
    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name
