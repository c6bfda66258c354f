import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from asm_model import AsmParams, asm_forward, random_params
from autodiff import ParamLayout, ParamVector, evaluate, finite_diff, value_and_grad
from errors import AsmError, NonFiniteError


def test_gradient_of_squared_norm():
    x = np.array([1.0, -2.0, 0.5])
    result = value_and_grad(lambda v: (v**2).sum(), x)
    assert result.value == pytest.approx(5.25)
    assert_allclose(result.grad, 2 * x, atol=0)
    assert result.terms == {"objective": pytest.approx(5.25)}


def test_finite_diff_of_linear_function():
    a = np.array([0.3, -1.2, 4.0, 2.5])
    grad = finite_diff(lambda v: (torch.as_tensor(a) * v).sum(), np.ones(4))
    assert_allclose(grad, a, atol=1e-9)


def test_zero_gradient_at_minimum():
    result = value_and_grad(lambda v: ((v - 1.0) ** 2).sum(), np.ones(3))
    assert_allclose(result.grad, 0.0, atol=0)


def test_terms_are_reported_and_summed():
    result = value_and_grad(lambda v: {"a": v.sum(), "b": 2 * v.sum()}, np.array([1.0, 2.0]))
    assert result.value == pytest.approx(9.0)
    assert result.terms == {"a": pytest.approx(3.0), "b": pytest.approx(6.0)}
    assert_allclose(result.grad, [3.0, 3.0])


def test_non_finite_term_is_named():
    def objective(v):
        return {"fine": (v**2).sum(), "broken": torch.sqrt(v[0] - 10.0)}

    with pytest.raises(NonFiniteError, match="broken"):
        value_and_grad(objective, np.array([1.0, 2.0]))
    with pytest.raises(NonFiniteError):
        evaluate(objective, np.array([1.0, 2.0]))


def test_finite_diff_rejects_bad_step():
    with pytest.raises(AsmError):
        finite_diff(lambda v: v.sum(), np.zeros(2), step=0.0)


def test_asm_layout():
    layout = ParamLayout.for_asm(84, 2)
    layout.check(84, 2)
    assert layout.size == 1932
    assert layout.mask(("tau",)).sum() == 84 * 9
    assert layout.indices("zeta")[:2].tolist() == [0, 1]
    assert layout.indices("tau")[:9].tolist() == list(range(14, 23))
    layout.add("pose", 7).check(84, 2, extra=7)
    with pytest.raises(AsmError, match="covers"):
        ParamLayout().add("zeta", 3).check(1, 1)
    with pytest.raises(AsmError):
        ParamVector(np.zeros(5), ParamLayout.for_asm(1, 1))


def test_root_translation_gradient_is_one(demo_mesh, skeleton, neutral):
    layout = ParamLayout.for_asm(84, 2)

    def objective(x):
        params = AsmParams.from_vector(x, 84, 2)
        return asm_forward(demo_mesh, skeleton, params).vertices[:, 0].mean()

    result = value_and_grad(objective, neutral.to_vector())
    assert result.grad[layout.indices("tau")[3]] == pytest.approx(1.0, abs=1e-9)
    assert result.grad[layout.indices("tau")[4]] == pytest.approx(0.0, abs=1e-9)


def test_asm_gradient_matches_finite_differences(demo_mesh, skeleton):
    params = random_params(demo_mesh, skeleton, 2, np.random.default_rng(7), magnitude=0.5)
    target = torch.as_tensor(demo_mesh.vertices + 0.01)
    layout = ParamLayout.for_asm(84, 2)

    def objective(x):
        deformed = asm_forward(demo_mesh, skeleton, AsmParams.from_vector(x, 84, 2))
        return 0.5 * ((deformed.vertices - target) ** 2).sum()

    bones = (0, 4, 30, 60)
    coordinates = [
        int(index)
        for group in ("zeta", "log_pi", "mu", "chol", "tau")
        for segment in layout.segments
        if segment.group == group and segment.bone in bones
        for index in (segment.start, segment.stop - 1)
    ]
    exact = value_and_grad(objective, params.to_vector()).grad
    numeric = finite_diff(objective, params.to_vector(), step=1e-6, coordinates=coordinates)
    assert_allclose(exact[coordinates], numeric[coordinates], rtol=1e-4, atol=1e-6)
