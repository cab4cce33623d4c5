"""Exception types raised across the package."""


class AfemError(Exception):
    """Base class for all package errors."""


class MeshError(AfemError, ValueError):
    pass


class InterpolationError(AfemError, ValueError):
    def __init__(self, vertex: int, value: float):
        super().__init__(f"non-finite value {value!r} at vertex {vertex}")
        self.vertex = vertex
        self.value = value


class CastError(AfemError, ValueError):
    def __init__(self, got, expected):
        super().__init__(f"cannot cast tensor of shape {tuple(got)} to mesh grid of shape {tuple(expected)}")
        self.got = tuple(got)
        self.expected = tuple(expected)


class AssemblyError(AfemError, FloatingPointError):
    def __init__(self, element: int, msg: str = "non-finite coefficient"):
        super().__init__(f"{msg} on element {element}")
        self.element = element


class SolverError(AfemError, ArithmeticError):
    """CG failed to reach the requested relative residual."""

    kind = "forward"

    def __init__(self, residual: float, iterations: int, tol: float):
        super().__init__(
            f"{self.kind} solve did not converge: relative residual {residual:.3e} "
            f"> tol {tol:.1e} after {iterations} iterations"
        )
        self.residual = residual
        self.iterations = iterations
        self.tol = tol


class AdjointSolverError(SolverError):
    kind = "adjoint"


class MeshMismatchError(AfemError, ValueError):
    pass


class ShapeError(AfemError, ValueError):
    pass


class TapeError(AfemError, RuntimeError):
    pass


class DivergenceError(AfemError, FloatingPointError):
    """Non-finite loss or gradient during optimisation."""

    def __init__(self, msg: str, epoch: int | None = None, last_good=None):
        super().__init__(msg)
        self.epoch = epoch
        self.last_good = last_good


class DatasetFormatError(AfemError, ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset
