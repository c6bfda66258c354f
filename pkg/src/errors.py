import math
from typing import Optional


class AsmError(ValueError):
    """Base class for every failure the model, solvers and CLI report on purpose."""

    code = "asm-error"


class DegenerateTriangleError(AsmError):
    code = "degenerate-triangle"


class UvOutOfChartError(AsmError):
    code = "uv-out-of-chart"


class UncoveredVertexError(AsmError):
    code = "uncovered-vertex"

    def __init__(self, vertex: int, total: float):
        self.vertex = vertex
        self.total = total
        super().__init__(
            f"uncovered-vertex: vertex {vertex} has total skinning density {total:.3e}"
        )


class BehindCameraError(AsmError):
    code = "behind-camera"


class NoSilhouetteError(AsmError):
    code = "no-silhouette"


class NoOverlapError(AsmError):
    code = "no-overlap"


class AssetMismatchError(AsmError):
    code = "asset-mismatch"


class SkeletonError(AsmError):
    code = "invalid-skeleton"


class ObjFormatError(AsmError):
    code = "invalid-obj"


class ParamsFormatError(AsmError):
    code = "invalid-params"

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DivergenceError(AsmError):
    code = "divergence"

    def __init__(self, iteration: int, loss: float, term: str = "loss"):
        self.iteration = iteration
        self.loss = loss
        self.term = term
        super().__init__(f"divergence: non-finite {term} at iteration {iteration} (loss {loss})")


class NonFiniteError(AsmError):
    code = "non-finite"

    def __init__(self, term: str, value: float = math.nan):
        self.term = term
        self.value = value
        super().__init__(f"non-finite value {value} in energy term '{term}'")
