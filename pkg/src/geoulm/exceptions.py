"""Exception hierarchy shared by the localization pipeline."""


class GeoULMError(Exception):
    """Base class for all package errors."""


class ValidationError(GeoULMError, ValueError):
    """Input or configuration violates a documented invariant."""


class FitDivergedError(GeoULMError):
    """Levenberg-Marquardt produced non-finite values.

    The last finite iterate is kept on ``last_params`` so callers can decide
    whether to fall back to it.
    """

    def __init__(self, message, last_params=None):
        super().__init__(message)
        self.last_params = last_params


class InvalidComponentError(GeoULMError, ValueError):
    """An echo component cannot be used for phase refinement."""


class DegenerateEllipseError(GeoULMError, ValueError):
    """Round-trip path does not exceed the focal separation."""


class InfiniteIntersectionsError(GeoULMError):
    """Two conics coincide, so the intersection set is a curve."""


class IllConditionedError(GeoULMError):
    """Intersection is numerically unreliable.

    ``points`` carries the best-effort roots and ``condition`` the score that
    triggered the failure.
    """

    def __init__(self, message, points=None, condition=float("inf")):
        super().__init__(message)
        self.points = [] if points is None else points
        self.condition = condition


class FormatError(GeoULMError, ValueError):
    """File header does not describe a supported container."""


class CorruptStreamError(GeoULMError, ValueError):
    """File ended in the middle of a record."""


class UndefinedMetricError(GeoULMError, ValueError):
    """Metric has no defined value for the given inputs."""
