"""Exception hierarchy shared by every module."""


class GmjeError(Exception):
    """Base class for all library errors."""


class NotPositiveDefinite(GmjeError):
    """A covariance or Gram matrix could not be Cholesky-factored."""


class RankDeficient(GmjeError):
    """A batch does not have full column rank."""


class AllZeroLikelihood(GmjeError):
    """Every mixture component assigns -inf log-density to an input."""


class DegenerateComponent(GmjeError):
    """An EM component variance fell below the configured floor."""


class NotNormalized(GmjeError):
    """An embedding expected to lie on the unit sphere does not."""


class Diverged(GmjeError):
    """Training produced a non-finite loss."""


class DegenerateSeed(GmjeError):
    """GNG seed points coincide."""


class IdentityCollapse(GmjeError):
    """A conditional density head was wired to see its own target."""


class ConfigError(GmjeError):
    """Bad or unknown configuration key."""
