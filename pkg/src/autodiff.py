"""
Gradient evaluation on flat parameter vectors, backed by torch reverse mode,
and the central-difference oracle used to check it.

An objective takes a float64 tensor and returns either a scalar tensor or a
dict of named scalar terms; the terms are summed in insertion order so a
non-finite value can be reported by name.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Sequence, Tuple, Union

import numpy as np
import torch

from asm_model import group_sizes, param_count
from errors import AsmError, NonFiniteError

Terms = Union[torch.Tensor, Dict[str, torch.Tensor]]
Objective = Callable[[torch.Tensor], Terms]

ASM_GROUPS = ("zeta", "log_pi", "mu", "chol", "tau")


class Segment(NamedTuple):
    group: str
    bone: int
    start: int
    stop: int


@dataclass
class ParamLayout:
    """Maps slices of a flat vector to (group, bone); bone is -1 for non-bone groups."""

    segments: List[Segment] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    def add(self, group: str, length: int, bone: int = -1) -> "ParamLayout":
        start = self.size
        self.segments.append(Segment(group, bone, start, start + length))
        return self

    @classmethod
    def for_asm(cls, J: int, K: int) -> "ParamLayout":
        layout = cls()
        for j in range(J):
            for group, length in zip(ASM_GROUPS, group_sizes(K)):
                layout.add(group, length, j)
        return layout

    def indices(self, group: str) -> np.ndarray:
        ranges = [np.arange(s.start, s.stop) for s in self.segments if s.group == group]
        return np.concatenate(ranges) if ranges else np.zeros(0, dtype=np.int64)

    def mask(self, groups: Sequence[str]) -> np.ndarray:
        selected = np.zeros(self.size, dtype=bool)
        for group in groups:
            selected[self.indices(group)] = True
        return selected

    def check(self, J: int, K: int, extra: int = 0) -> None:
        position = 0
        for segment in self.segments:
            if segment.start != position:
                raise AsmError(f"layout gap before {segment.group} of bone {segment.bone}")
            position = segment.stop
        if position != param_count(J, K) + extra:
            raise AsmError(f"layout covers {position} values, expected {param_count(J, K) + extra}")


@dataclass
class ParamVector:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise AsmError(f"vector of length {self.values.size} does not match layout size {self.layout.size}")


class Gradient(NamedTuple):
    value: float
    grad: np.ndarray
    terms: Dict[str, float]


def _total(terms: Terms) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    if isinstance(terms, torch.Tensor):
        terms = {"objective": terms}
    total = None
    for name, term in terms.items():
        if not bool(torch.isfinite(term).all()):
            raise NonFiniteError(name, float(term.detach().sum()))
        total = term if total is None else total + term
    return total, terms


def _values(at) -> np.ndarray:
    values = at.values if isinstance(at, ParamVector) else at
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    return np.array(values, dtype=np.float64)


def value_and_grad(objective: Objective, at) -> Gradient:
    """Objective value and exact gradient at `at` (a ParamVector, array or tensor)."""
    x = torch.tensor(_values(at), dtype=torch.float64, requires_grad=True)
    total, terms = _total(objective(x))
    (grad,) = torch.autograd.grad(total, x, allow_unused=True)
    grad = torch.zeros_like(x) if grad is None else grad
    if not bool(torch.isfinite(grad).all()):
        raise NonFiniteError("gradient", float(total))
    return Gradient(float(total), grad.numpy().copy(), {k: float(v) for k, v in terms.items()})


def evaluate(objective: Objective, at) -> float:
    with torch.no_grad():
        total, _ = _total(objective(torch.as_tensor(_values(at))))
    return float(total)


def finite_diff(objective: Objective, at, step: float = 1e-5, coordinates=None) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for each (selected) coordinate."""
    if step <= 0:
        raise AsmError(f"finite_diff step must be positive, got {step}")
    x = _values(at)
    grad = np.zeros_like(x)
    for i in range(x.size) if coordinates is None else coordinates:
        plus, minus = x.copy(), x.copy()
        plus[i] += step
        minus[i] -= step
        grad[i] = (evaluate(objective, plus) - evaluate(objective, minus)) / (2.0 * step)
    return grad
