from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from pydantic import ValidationError
from scipy import special

from app.errors import DomainError, IncompatibleEtaError
from app.potential import (
    HamiltonianModel,
    PotentialSpec,
    box_tail_mass,
    eval_hamiltonian,
    eval_potential,
    hessian_weight_bound,
    marginal_weights,
    recommended_eta,
    suggest_box,
    x_tail_mass,
)


@pytest.mark.parametrize(
    "spec, eta",
    [
        (PotentialSpec(family="quadratic"), 0.0),
        (PotentialSpec(family="even-monomial", l=4), 0.25),
        (PotentialSpec(family="even-monomial", l=6), 0.5 - 1.0 / 6.0),
        (PotentialSpec(family="polynomial", coefficients=(1.0, 0.0, 0.0, 0.0, 1.0)), 0.25),
        (PotentialSpec(family="stretched-exp", a=1.0, b=0.5), 0.5),
    ],
)
def test_recommended_eta(spec, eta):
    assert recommended_eta(spec) == pytest.approx(eta)


def test_stretched_exp_with_b_at_least_one_has_no_eta():
    with pytest.raises(IncompatibleEtaError):
        recommended_eta(PotentialSpec(family="stretched-exp", a=1.0, b=1.0))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"family": "even-monomial", "l": 3},
        {"family": "polynomial", "coefficients": (1.0, 0.0, 0.0, 1.0)},
        {"family": "polynomial", "coefficients": (2.0, 0.0, -1.0)},
        {"family": "quadratic", "offset": 0.5},
        {"family": "quadratic", "speed": 2.0},
    ],
)
def test_invalid_specs_are_rejected(kwargs):
    with pytest.raises(ValidationError):
        PotentialSpec(**kwargs)


def test_polynomial_minimum_from_critical_points():
    # 2 − x² + x⁴/4 has minima U(±√2) = 1
    spec = PotentialSpec(family="polynomial", coefficients=(2.0, 0.0, -1.0, 0.0, 0.25))
    assert spec.min_value == pytest.approx(1.0)
    assert spec.degree == 4


def test_quartic_values():
    U, dU, d2U = eval_potential(PotentialSpec(family="even-monomial", l=4), 2.0)
    assert (float(U), float(dU), float(d2U)) == (17.0, 32.0, 48.0)


def test_stretched_exp_overflow_is_a_domain_error():
    spec = PotentialSpec(family="stretched-exp", a=1.0, b=0.5)
    with pytest.raises(DomainError):
        eval_potential(spec, np.array([0.0, 1e12]))


def test_hamiltonian_broadcasts(quartic_model):
    vals = eval_hamiltonian(quartic_model, np.zeros((3, 1)), np.linspace(-1, 1, 4)[None, :])
    assert vals.H.shape == (3, 4)
    assert vals.gradH.shape == (2, 3, 4)
    np.testing.assert_allclose(vals.weight, vals.H ** -0.5)


@given(
    x=st.floats(-30, 30),
    y=st.floats(-30, 30),
    eta=st.floats(0, 1),
)
def test_weight_sandwich(x, y, eta):
    model = HamiltonianModel(spec=PotentialSpec(family="even-monomial", l=4), eta=eta)
    w = float(eval_hamiltonian(model, x, y).weight)
    p1, p2 = (float(v) for v in marginal_weights(model, x, y))
    assert p1 * p2 <= w * (1 + 1e-12)
    assert w <= min(p1, p2) * (1 + 1e-12)


def test_hessian_bound_quadratic_is_one(quadratic_model):
    bound = hessian_weight_bound(quadratic_model)
    assert bound.value == pytest.approx(1.0)
    assert not bound.diverging


def test_hessian_bound_quartic_recommended_eta_is_finite(quartic_model):
    bound = hessian_weight_bound(quartic_model)
    # 12x²/sqrt(1 + x⁴) increases to 12
    assert bound.value == pytest.approx(12.0, rel=1e-3)
    assert not bound.diverging


def test_hessian_bound_quartic_without_weight_diverges():
    model = HamiltonianModel(spec=PotentialSpec(family="even-monomial", l=4), eta=0.0)
    bound = hessian_weight_bound(model)
    assert bound.diverging
    assert bound.edge_value == pytest.approx(bound.value, rel=1e-2)


@pytest.mark.parametrize(
    "spec",
    [PotentialSpec(family="quadratic"), PotentialSpec(family="even-monomial", l=4)],
)
def test_suggested_box_meets_tail_tolerance(spec):
    rx, ry = suggest_box(spec)
    assert box_tail_mass(spec, rx, ry) < 1e-10
    assert box_tail_mass(spec, rx - 0.5, ry) > box_tail_mass(spec, rx, ry)


@pytest.mark.parametrize(
    "spec, x",
    [
        (PotentialSpec(family="stretched-exp", a=1.0, b=0.5), 4.0),
        (PotentialSpec(family="stretched-exp", a=0.7, b=0.3, smoothing=1.0), -2.5),
        (PotentialSpec(family="polynomial", coefficients=(2.0, 0.0, -1.0, 0.0, 0.25)), 1.7),
        (PotentialSpec(family="polynomial", coefficients=(2.0, 0.0, -1.0, 0.0, 0.25)), -2.5),
        (PotentialSpec(family="polynomial", coefficients=(3.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.1)), 0.3),
    ],
)
def test_derivatives_match_central_differences(spec, x):
    h = 1e-5
    U, dU, d2U = (float(v) for v in eval_potential(spec, x))
    up, down = eval_potential(spec, x + h), eval_potential(spec, x - h)
    assert dU == pytest.approx((float(up.U) - float(down.U)) / (2 * h), rel=1e-6)
    assert d2U == pytest.approx((float(up.dU) - float(down.dU)) / (2 * h), rel=1e-6)


def test_x_tail_mass_of_the_gaussian():
    spec = PotentialSpec(family="quadratic")
    assert x_tail_mass(spec, 2.0) == pytest.approx(float(special.erfc(np.sqrt(2.0))), rel=1e-6)
    assert x_tail_mass(spec, 3.0) < x_tail_mass(spec, 2.0)
    # the offset cancels in the relative mass
    shifted = PotentialSpec(family="quadratic", offset=5.0)
    assert x_tail_mass(shifted, 2.0) == pytest.approx(x_tail_mass(spec, 2.0), rel=1e-5)


def test_stretched_exp_bound_is_set_by_the_smoothing_core():
    sharp = hessian_weight_bound(HamiltonianModel(spec=PotentialSpec(family="stretched-exp", a=1.0, b=0.5), eta=0.5))
    assert sharp.core_dominated
    assert sharp.value > 1e6
    assert sharp.tail_value < 1.0

    smooth = PotentialSpec(family="stretched-exp", a=1.0, b=0.5, smoothing=1.0)
    bound = hessian_weight_bound(HamiltonianModel(spec=smooth, eta=0.5))
    assert not bound.core_dominated
    assert bound.value < 1.0
    assert smooth.min_value == pytest.approx(np.e)


def test_core_flag_is_off_for_polynomial_families(quartic_model):
    bound = hessian_weight_bound(quartic_model)
    assert not bound.core_dominated
    assert bound.tail_value == bound.value
