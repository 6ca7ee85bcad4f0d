"""Exception types shared across the package."""


class TrendexError(Exception):
    """Base class for all errors raised by trendex."""


class NonFiniteCoefficient(TrendexError):
    """A coefficient function returned NaN or infinity."""


class SingularFundamentalMatrix(TrendexError):
    """|det Phi| fell below the singularity tolerance.

    The true fundamental matrix is nondegenerate, so this signals an
    integrator failure or a violated precondition, not a property of
    the model.
    """


class StepTooLarge(TrendexError):
    """h * ||b_n(kh)|| > 1/2 somewhere; the one-step factors I + h*b_n
    are no longer guaranteed invertible.  Increase n."""


class InvalidParameter(TrendexError):
    """A model or density parameter is outside its admissible range."""


class UnboundedCoefficient(TrendexError):
    """Probe-box sampling of a coefficient exceeded its declared bound."""


class NotSPD(TrendexError):
    """A covariance matrix failed its Cholesky factorization."""


class NonFiniteState(TrendexError):
    """A simulated path left the space of finite states (explosion or
    bad coefficients); states are never clipped because clipping would
    silently bias densities."""


class GridTooSmall(TrendexError):
    """Probability mass leaked off the spatial grid; enlarge it."""


class GridCoverage(TrendexError):
    """A density transform would need to extrapolate outside the grid
    the source field is tabulated on."""


class GridMismatch(TrendexError):
    """Two density fields that must share a grid do not."""


class UnknownExample(TrendexError):
    """Unrecognized built-in example name."""


class ConfigInvalid(TrendexError):
    """A configuration file or study configuration is malformed."""
