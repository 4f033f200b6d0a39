"""Exception types shared across the package."""


class ConNRSfMError(Exception):
    """Base class for all package-specific errors."""


class DomainError(ConNRSfMError, ValueError):
    """Input outside the mathematical domain of an operation."""


class DegenerateGeometryError(ConNRSfMError):
    """Frame matrix singular or near-singular; connection undefined."""


class IllPosedFitError(ConNRSfMError):
    """Spline normal equations are rank deficient.

    Usually fixed by a larger smoothing weight or a coarser control grid.
    """


class ExtrapolationError(ConNRSfMError):
    """Query point outside the fitted domain of a spline model."""


class DegenerateWarpError(ConNRSfMError):
    """Warp Jacobian (near-)singular: fold or collapsed mapping."""


class DegenerateScaleError(ConNRSfMError):
    """All closed-form conformal-scale estimates had vanishing denominators."""


class DisconnectedGraphError(ConNRSfMError):
    """View graph does not connect all frames."""

    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        super().__init__(
            f"view graph is disconnected; components: {self.components}"
        )


class UnreconstructablePointError(ConNRSfMError):
    """No point has enough connected observations to be reconstructed."""
