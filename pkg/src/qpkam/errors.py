"""Exception types shared across the package.

Every error that can reach the CLI derives from QpkamError and knows how to
serialize itself, so subcommands can emit machine-readable JSON on stderr.
"""

from __future__ import annotations

from typing import Any


class QpkamError(Exception):
    """Base class; carries a stable error code and optional detail payload."""

    code = "error"

    def __init__(self, message: str, **detail: Any):
        super().__init__(message)
        self.detail = detail

    def to_json(self) -> dict[str, Any]:
        return {"error": self.code, "message": str(self), "detail": self.detail}


class ValidationError(QpkamError):
    """An asserted model property failed at a concrete point."""

    code = "validation"


class UnsupportedDerivativeError(QpkamError):
    code = "unsupported-derivative"


class NoTurningPointError(QpkamError):
    code = "no-turning-point"


class DomainTooSmallError(QpkamError):
    code = "domain-too-small"


class TruncationError(QpkamError):
    code = "truncation"


class UnderResolvedError(QpkamError):
    code = "under-resolved"


class DegenerateFitError(QpkamError):
    code = "degenerate-fit"


class UnsupportedIndexError(QpkamError):
    code = "unsupported-index"


class RayDomainError(QpkamError):
    """Argument off the evaluation rays of the special-function code."""

    code = "ray-domain"


class BranchError(QpkamError):
    """Sign change of the phase integrand away from the turning point."""

    code = "branch"


class ResonanceError(QpkamError):
    """A small divisor fell below the floor; detail carries (i, j, l)."""

    code = "resonance"


class SingularSystemError(QpkamError):
    code = "singular-system"


class IterationLimitError(QpkamError):
    code = "iteration-limit"


class DivergenceError(QpkamError):
    code = "divergence"


class OverExclusionError(QpkamError):
    code = "over-exclusion"


class StepSizeError(QpkamError):
    code = "step-size"


class ConfigError(QpkamError):
    code = "config"
