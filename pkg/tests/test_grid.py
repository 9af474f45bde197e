from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import sparse

from app.errors import PositivityError, TruncationError
from app.flow import gaussian_ratio
from app.grid import (
    GridConfig,
    apply_generator,
    build_grid,
    commutator_residual,
    dirichlet_form,
    field_moments,
    functional,
    ls_inverse_power_closed_form,
    ls_inverse_power_residual,
    ls_inverse_power_upper_bound,
    psi_second,
    sqrt_log_psi,
)


ROUNDING = 64 * np.finfo(float).eps


def _weighted(grid, A):
    return sparse.diags(grid.mass_diagonal) @ A


def test_truncation_error_suggests_a_box(quartic_model):
    with pytest.raises(TruncationError) as info:
        build_grid(quartic_model, GridConfig(Rx=3.0, Ry=3.0, nx=17, ny=17))
    assert info.value.suggested_ry > 3.0
    assert info.value.suggested_rx >= 3.0


def test_mu_is_a_probability(quadratic_grid):
    assert quadratic_grid.integrate(np.ones(quadratic_grid.shape)) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("which", ["Ls", "La", "Leta", "L", "Lstar"])
def test_generators_kill_constants(quartic_grid, which):
    out = apply_generator(quartic_grid, np.ones(quartic_grid.shape), which)
    # skew entries reach ~1e7 at the quartic x-edge; the row sums cancel to rounding
    scale = abs(quartic_grid.generator(which)).max()
    assert np.max(np.abs(out)) <= ROUNDING * scale


def test_upwind_transport_kills_constants(quartic_grid):
    out = apply_generator(quartic_grid, np.ones(quartic_grid.shape), "La", scheme="upwind")
    assert np.max(np.abs(out)) < 1e-9


def test_unknown_generator(quartic_grid):
    with pytest.raises(ValueError):
        quartic_grid.generator("Lx")


def test_symmetric_part_is_self_adjoint(quartic_grid):
    M = _weighted(quartic_grid, quartic_grid.Leta)
    assert abs(M - M.T).max() <= 1e-10 * abs(M).max()


def test_transport_is_antisymmetric_and_conservative(quartic_grid):
    M = _weighted(quartic_grid, quartic_grid.La)
    assert abs(M + M.T).max() <= 1e-10 * abs(M).max()
    # column sums of diag(μ)L_a vanish: Σ f μ is conserved
    col = np.asarray(M.sum(axis=0)).ravel()
    assert np.max(np.abs(col)) <= 1e-10 * abs(M).max()


def test_dirichlet_form_matches_operator(quartic_grid):
    g = quartic_grid
    f = 1.0 + 0.3 * np.sin(g.X) * np.cos(g.Y)
    lhs = dirichlet_form(g, f, weighted=True)
    rhs = -g.inner(f, apply_generator(g, f, "Leta"))
    assert lhs == pytest.approx(rhs, rel=1e-9)
    assert dirichlet_form(g, f, weighted=False) >= lhs


def test_ls_inverse_power_closed_form_by_finite_difference():
    U, eta, y, h = 2.0, 0.3, 0.7, 1e-3

    def g(v):
        return (U + 0.5 * v * v) ** -eta

    second = (g(y + h) - 2 * g(y) + g(y - h)) / h**2
    first = (g(y + h) - g(y - h)) / (2 * h)
    exact = ls_inverse_power_closed_form(y, U + 0.5 * y * y, eta)
    assert second - y * first == pytest.approx(float(exact), rel=1e-5)


@given(y=st.floats(-20, 20), U=st.floats(1, 100), eta=st.floats(0, 2))
def test_ls_inverse_power_upper_bound_dominates(y, U, eta):
    H = U + 0.5 * y * y
    assert ls_inverse_power_closed_form(y, H, eta) <= ls_inverse_power_upper_bound(y, H, eta) + 1e-15
    assert ls_inverse_power_upper_bound(y, H, eta) <= eta * (2 * eta + 5) * H**-eta + 1e-15


def test_ls_inverse_power_residual_converges(quartic_model):
    res = [
        ls_inverse_power_residual(build_grid(quartic_model, GridConfig(Rx=3.0, Ry=7.0, nx=n, ny=n)), 0.25)
        for n in (65, 129)
    ]
    assert res[1] < res[0] / 3.0


def test_commutator_residuals_converge(quadratic_model):
    def residual(n):
        g = build_grid(quadratic_model, GridConfig(nx=n, ny=n))
        return commutator_residual(g, np.sin(g.X) * np.cos(0.7 * g.Y))

    coarse, fine = residual(65), residual(129)
    assert fine.r1 < coarse.r1 / 3.0
    assert fine.r2 < coarse.r2 / 3.0


def test_functionals_vanish_at_equilibrium(quadratic_grid):
    ones = np.ones(quadratic_grid.shape)
    for kind in ("variance", "entropy", "sqrt-log"):
        assert functional(quadratic_grid, ones, kind) == pytest.approx(0.0, abs=1e-12)


def test_functionals_scale_with_mass(quadratic_grid):
    f = gaussian_ratio(quadratic_grid, (0.5, 0.0), ((0.5, 0.0), (0.0, 0.5)))
    ent = functional(quadratic_grid, f, "entropy")
    var = functional(quadratic_grid, f, "variance")
    assert ent > 0 and var > 0
    assert functional(quadratic_grid, 3.0 * f, "entropy") == pytest.approx(3.0 * ent, rel=1e-10)
    assert functional(quadratic_grid, 3.0 * f, "variance") == pytest.approx(9.0 * var, rel=1e-10)


def test_entropy_needs_a_positive_field(quadratic_grid):
    f = np.ones(quadratic_grid.shape)
    f[3, 3] = 0.0
    with pytest.raises(PositivityError):
        functional(quadratic_grid, f, "entropy")


def test_sqrt_log_psi_kernel():
    u = np.array([0.1, 1.0, 2.0, 50.0])
    vals = sqrt_log_psi(u)
    assert vals[1] == pytest.approx(0.0, abs=1e-14)
    assert np.all(vals >= -1e-14)
    h, x = 1e-3, 2.0
    second = (sqrt_log_psi(x + h) - 2 * sqrt_log_psi(x) + sqrt_log_psi(x - h)) / h**2
    assert float(second) == pytest.approx(float(psi_second("sqrt-log", x)), rel=1e-5)


def test_field_moments_of_a_gaussian(quadratic_grid):
    f = gaussian_ratio(quadratic_grid, (0.5, -0.25), ((0.3, 0.1), (0.1, 0.4)))
    m = field_moments(quadratic_grid, f)
    assert m.mean_x == pytest.approx(0.5, abs=1e-6)
    assert m.mean_y == pytest.approx(-0.25, abs=1e-6)
    assert m.var_x == pytest.approx(0.3, abs=1e-6)
    assert m.var_y == pytest.approx(0.4, abs=1e-6)
    assert m.cov_xy == pytest.approx(0.1, abs=1e-6)


def test_sublevel_mask(quadratic_grid):
    mask = quadratic_grid.sublevel_mask(1.0)
    # only the origin has H <= 1 for U = 1 + x²/2
    assert mask.sum() == 1


def test_commutator_residuals_converge_for_the_quartic(quartic_model):
    def residual(n):
        g = build_grid(quartic_model, GridConfig(Rx=3.0, Ry=7.0, nx=n, ny=n))
        return commutator_residual(g, np.sin(g.X) * np.cos(0.7 * g.Y))

    coarse, fine = residual(65), residual(129)
    assert coarse.r1 / fine.r1 > 2.0
    assert coarse.r2 / fine.r2 > 2.0
