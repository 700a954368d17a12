"""Exception hierarchy shared by every module of the package."""


class JtlnError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(JtlnError, ValueError):
    pass


class InvalidHistogram(JtlnError, ValueError):
    pass


class InvalidConfig(JtlnError, ValueError):
    pass


class NumericalUnderflow(JtlnError, ArithmeticError):
    """Scaling denominators underflowed; lambda * C is too large for plain-domain scaling."""


class InvalidSolution(JtlnError, ValueError):
    pass


class InstanceTooLarge(JtlnError, ValueError):
    pass


class TooFewSamples(JtlnError, ValueError):
    pass


class MetricError(JtlnError):
    """A per-pair distance failed while building a cost matrix."""

    def __init__(self, source_label, target_label, cause):
        self.source_label = source_label
        self.target_label = target_label
        self.cause = cause
        super().__init__(
            f"cost metric failed for source category {source_label!r} / "
            f"target category {target_label!r}: {cause}"
        )


class InvalidSpec(JtlnError, ValueError):
    pass


class ParseError(JtlnError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(JtlnError, ValueError):
    pass


class NonFiniteLoss(JtlnError, FloatingPointError):
    pass
