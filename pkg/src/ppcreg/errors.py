"""Exception hierarchy shared by all ppcreg modules."""


class PPCRegError(Exception):
    """Base class for every error raised by ppcreg."""


class InvalidArgumentError(PPCRegError, ValueError):
    pass


class BranchSingularityError(PPCRegError, ValueError):
    """Rotation angle too close to pi for a unique axis-angle logarithm."""


class NoIntersectionError(PPCRegError, ValueError):
    """A ray does not intersect the detector plane."""


class FormatError(PPCRegError, ValueError):
    """Malformed volume/image file.

    ``offset`` is the byte offset into the file where the problem was detected.
    """

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class InsufficientContourError(PPCRegError):
    pass


class NoCorrespondenceError(PPCRegError):
    pass


class InsufficientConstraintsError(PPCRegError):
    pass


class SingularSystemError(PPCRegError):
    """Weighted normal matrix is rank deficient or badly conditioned."""

    def __init__(self, message, condition=float("inf")):
        super().__init__(f"{message} (condition estimate {condition:.3g})")
        self.condition = condition


class DegenerateEmbeddingError(PPCRegError, ValueError):
    pass


class SamplingError(PPCRegError):
    pass


class RegistrationError(PPCRegError):
    """Failure inside the iterative registration loop, tagged with the iteration."""

    def __init__(self, iteration, cause):
        super().__init__(f"iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause
