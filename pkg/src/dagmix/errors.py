"""Exception hierarchy shared across the package."""


class DagmixError(Exception):
    """Base class for all errors raised by dagmix."""


class ModelSyntaxError(DagmixError):
    """A model document could not be parsed at all."""


class ModelSemanticError(DagmixError):
    """A model document parsed but violates a structural rule."""

    def __init__(self, message, node=None):
        if node is not None:
            message = f"node {node!r}: {message}"
        super().__init__(message)
        self.node = node


class DataError(DagmixError):
    """A data file or data array is inconsistent with the model."""


class NumericalError(DagmixError):
    """A numerical procedure failed (underflow, divergence, singularity)."""


class LinkError(NumericalError):
    """Logit values are invalid for the requested link family."""
