"""Exception hierarchy shared by all modules."""


class AnisobubbleError(Exception):
    """Base class for all package errors."""


# geometry
class NonPositiveCoefficient(AnisobubbleError):
    """Anisotropy coefficient evaluated to a non-positive value."""


class OutsideDomain(AnisobubbleError):
    """Point lies outside the closed domain beyond tolerance."""


# fem
class MeshBudgetExceeded(AnisobubbleError):
    """Requested resolution would exceed the configured node cap."""


class SolverDiverged(AnisobubbleError):
    """Linear solve failed or produced a residual above tolerance."""


# green
class TagMismatch(AnisobubbleError):
    """Source-point tag inconsistent with its boundary distance."""


class EvalAtSingularity(AnisobubbleError):
    """Green's function evaluated too close to its source point."""


# bubble
class NoRoot(AnisobubbleError):
    """Bisection bracket failed in the eps <-> lambda conversion."""


class MissingLowerOrder(AnisobubbleError):
    """Source term f^j requested without omega^1..omega^(j-1)."""


class QuadratureFailure(AnisobubbleError):
    """Radial quadrature failed to reach its accuracy target."""


class TailDivergence(AnisobubbleError):
    """Far-field coefficient integral did not converge."""


class FixedPointDiverged(AnisobubbleError):
    """mu-system fixed point failed to converge.

    Carries the last iterate in .last_iterate.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class MissingCorrections(AnisobubbleError):
    """Ansatz assembly requested before corrections were tabulated."""


# reduction
class OverflowInExponential(AnisobubbleError):
    """Nonlinearity exceeded floating range (under-resolved bubble)."""


class NonPositiveField(AnisobubbleError):
    """u^p requested for a field that is not positive."""


class SaddleSingular(AnisobubbleError):
    """Projected linear system is singular (near-resonant configuration)."""


class ContractionFailed(AnisobubbleError):
    """Projected nonlinear fixed point exceeded its iteration budget."""


# validate
class NewtonDiverged(AnisobubbleError):
    """Damped Newton failed; .last_damping holds the final step factor."""

    def __init__(self, message, last_damping=None):
        super().__init__(message)
        self.last_damping = last_damping


class LeftBasin(AnisobubbleError):
    """Newton converged to the small constant branch instead of a bubble."""


# energy
class InfeasibleConfig(AnisobubbleError):
    """Configuration violates its feasibility region."""


class NoCriticalPoint(AnisobubbleError):
    """No critical point found inside the search box."""


class MaximizerOnBoundary(AnisobubbleError):
    """Clustered maximizer hit a constraint; .case identifies which."""

    def __init__(self, message, case=None):
        super().__init__(message)
        self.case = case


# cli
class ConfigError(AnisobubbleError):
    """Malformed run configuration; message carries the offending key."""
