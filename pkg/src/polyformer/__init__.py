"""Desk-scale toolkit for polynomial transformer models.

Builds, trains, and polynomializes small transformer models whose every
operation can ultimately be expressed with additions and multiplications,
then audits the result: arithmetic-whitelist graph verification,
multiplicative-depth and bootstrap accounting, and paired fidelity
evaluation against the pre-conversion model.
"""

from .errors import (
    ArchitectureError,
    ConfigError,
    ConvergenceError,
    DivergenceError,
    DomainError,
    PolyformerError,
    ShapeError,
    StageError,
    VerificationError,
)

__version__ = "0.1.0"
