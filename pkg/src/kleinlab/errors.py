"""Exception types shared across kleinlab modules."""


class KleinlabError(Exception):
    """Base class for all library errors."""


class NonConvergence(KleinlabError):
    """An iterative scheme did not stabilize within its budget."""


class BoxChartError(KleinlabError):
    """Element lies outside the N-ANM coordinate chart."""


class OverlappingDisks(KleinlabError):
    """Schottky disk closures intersect."""


class DegeneratePair(KleinlabError):
    """A disk pair has nonpositive radius or coincident data."""


class BasepointInDisk(KleinlabError):
    """The reference point o=(0,1) sits inside a disk hemisphere."""


class IterationBudgetExceeded(KleinlabError):
    """Fundamental-domain reduction stagnated near a disk boundary."""


class NonBracketed(KleinlabError):
    """Critical-exponent bisection found no sign change on (0, 2]."""


class SubcriticalExponent(KleinlabError):
    """Requested series parameter s at or below the critical exponent."""


class ZeroAcceptance(KleinlabError):
    """A rejection sampler accepted no proposals."""


class EmptyBall(KleinlabError):
    """A measure ball contains no atoms at the requested radius."""


class DegenerateRange(KleinlabError):
    """Regression range too short or degenerate for a slope fit."""


class DenominatorZero(KleinlabError):
    """Ratio denominator vanished on the whole time grid."""


class ConfigError(KleinlabError):
    """Malformed experiment configuration."""

    def __init__(self, message, line=None, field=None):
        super().__init__(message)
        self.line = line
        self.field = field
