"""
Exception types raised by the registration package.

Configuration problems use ``utils.config_utils.ConfigurationError`` so the
CLI can treat profile errors and checkpoint mismatches the same way.
"""

from typing import Optional


class RegistrationError(Exception):
    """Base class for registration errors."""
    pass


class InvalidShapeError(RegistrationError, ValueError):
    """Raised when array or image dimensions do not line up."""
    pass


class ContractError(RegistrationError, ValueError):
    """Raised when a caller violates an operation's precondition."""
    pass


class GraphStateError(RegistrationError, RuntimeError):
    """Raised when a differentiation graph is used in the wrong state."""
    pass


class ParseError(RegistrationError, ValueError):
    """Malformed file contents, with the byte offset of the failure."""

    def __init__(self, message: str, offset: int, path: Optional[str] = None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (byte offset {offset})")


class DivergenceError(RegistrationError, ArithmeticError):
    """Raised when the objective becomes non-finite during optimization."""

    def __init__(self, scale: str, step: int, value: float):
        self.scale = scale
        self.step = step
        self.value = value
        super().__init__(f"Non-finite loss {value} at scale {scale}, step {step}")
