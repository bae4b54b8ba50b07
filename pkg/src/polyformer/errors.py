"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes, so new failure modes should
subclass one of the exceptions below rather than raising bare ValueErrors.
"""

from __future__ import annotations


class PolyformerError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(PolyformerError):
    """Tensor shapes are incompatible for the requested operation."""


class DomainError(PolyformerError):
    """A value fell outside a polynomial's declared validity domain.

    Carries the offending value and the domain so callers can report the
    exact violation.
    """

    def __init__(self, value: float, domain: tuple[float, float], site: str | None = None):
        self.value = float(value)
        self.domain = (float(domain[0]), float(domain[1]))
        self.site = site
        where = f" at site '{site}'" if site else ""
        super().__init__(
            f"value {self.value!r} outside domain [{self.domain[0]!r}, {self.domain[1]!r}]{where}"
        )


class ConvergenceError(PolyformerError):
    """An iterative fit failed to converge; carries the last residual."""

    def __init__(self, message: str, residual: float):
        self.residual = float(residual)
        super().__init__(f"{message} (last residual {residual:.6e})")


class ArchitectureError(PolyformerError):
    """The model architecture does not admit the requested transformation."""


class DivergenceError(PolyformerError):
    """Training produced a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict):
        self.snapshot = snapshot
        super().__init__(message)


class ConfigError(PolyformerError):
    """An experiment configuration is malformed or inconsistent."""


class StageError(PolyformerError):
    """A pipeline stage failed; the run report is marked incomplete."""


class VerificationError(PolyformerError):
    """A converted model's computation graph failed the arithmetic audit."""
