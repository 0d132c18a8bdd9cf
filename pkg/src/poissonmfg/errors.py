"""Exception types shared across the package."""


class InvalidParameter(ValueError):
    """A parameter lies outside its admissible range."""


class InvalidInput(ValueError):
    """Inputs are inconsistent with each other (dimensions, grids, intervals)."""


class UnsupportedDimension(InvalidInput):
    """An operation that only exists in a given dimension was called elsewhere."""


class UnsupportedModel(TypeError):
    """The model does not expose a capability the operation needs."""


class SimulationFault(RuntimeError):
    """A thinning majorant was exceeded by the intensity it should dominate."""

    def __init__(self, message, time=None, rate=None, bound=None):
        super().__init__(message)
        self.time = time
        self.rate = rate
        self.bound = bound


class NumericalBlowup(ArithmeticError):
    """A forward or backward scheme produced non-finite values."""

    def __init__(self, message, step=None, particle=None):
        super().__init__(message)
        self.step = step
        self.particle = particle


class DegenerateBasis(ArithmeticError):
    """The regression design matrix is singular at some step."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
