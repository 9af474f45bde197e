from __future__ import annotations

import numpy as np
import pytest

from app.errors import ConfigError
from app.flow import ou_covariance, ou_mean
from app.grid import FieldMoments, GridConfig, build_grid
from app.particles import (
    GaussianLaw,
    MomentRow,
    SimConfig,
    SimResult,
    compare_to_flow,
    gibbs_moments,
    sample_grid_density,
    simulate,
)
from app.potential import PotentialSpec

START = GaussianLaw(mean=(1.0, 0.0), cov=((0.5, 0.0), (0.0, 0.5)))


def _cfg(model, **kw):
    base = dict(model=model, n_particles=20_000, dt=0.01, T=0.1, seed=7, initial=START)
    base.update(kw)
    return SimConfig(**base)


def _row(t, mx=0.0, se=0.01):
    return MomentRow(
        t=t,
        mean_x=mx,
        mean_y=0.0,
        var_x=1.0,
        var_y=1.0,
        cov_xy=0.0,
        se_mean_x=se,
        se_mean_y=se,
        se_var_x=se,
        se_var_y=se,
        se_cov_xy=se,
        energy=2.0,
        escapes=0,
    )


def test_results_do_not_depend_on_worker_count(quadratic_model):
    cfg = _cfg(quadratic_model)
    one = simulate(cfg, [0.0, 0.1], workers=1)
    three = simulate(cfg, [0.0, 0.1], workers=3)
    assert one.model_dump() == three.model_dump()
    np.testing.assert_array_equal(one.final_x, three.final_x)


def test_seed_changes_the_paths(quadratic_model):
    a = simulate(_cfg(quadratic_model, seed=1), [0.1])
    b = simulate(_cfg(quadratic_model, seed=2), [0.1])
    assert a.rows[0].mean_x != b.rows[0].mean_x


def test_record_times_must_be_multiples_of_dt(quadratic_model):
    with pytest.raises(ConfigError):
        simulate(_cfg(quadratic_model), [0.015])
    with pytest.raises(ConfigError):
        simulate(_cfg(quadratic_model), [0.5])


def test_initial_sample_size_is_checked(quadratic_model):
    with pytest.raises(ConfigError):
        simulate(_cfg(quadratic_model), [0.0], initial_sample=(np.zeros(3), np.zeros(3)))


def test_noiseless_particles_rest_at_the_minimum(quadratic_model):
    n = 100
    cfg = _cfg(quadratic_model, n_particles=n, noise_scale=0.0)
    result = simulate(cfg, [0.0, 0.1], initial_sample=(np.zeros(n), np.zeros(n)))
    last = result.rows[-1]
    assert (last.mean_x, last.mean_y, last.var_x, last.var_y) == (0.0, 0.0, 0.0, 0.0)
    assert last.energy == pytest.approx(1.0)


def test_moments_follow_the_ou_law(quadratic_model):
    cfg = _cfg(quadratic_model, n_particles=40_000, dt=0.002, T=0.5)
    row = simulate(cfg, [0.5]).rows[0]
    mean = ou_mean(START.mean, 0.5)
    cov = ou_covariance(START.cov, 0.5)
    assert abs(row.mean_x - mean[0]) < 4 * row.se_mean_x + 0.01
    assert abs(row.mean_y - mean[1]) < 4 * row.se_mean_y + 0.01
    assert abs(row.var_y - cov[1, 1]) < 4 * row.se_var_y + 0.01
    assert row.escapes == 0


def test_gibbs_moments():
    quad = gibbs_moments(PotentialSpec(family="quadratic"))
    assert quad.mean_x == pytest.approx(0.0, abs=1e-10)
    assert quad.var_x == pytest.approx(1.0)
    assert (quad.var_y, quad.cov_xy) == (1.0, 0.0)
    quartic = gibbs_moments(PotentialSpec(family="even-monomial", l=4))
    assert 0.0 < quartic.var_x < 1.0


def test_compare_to_flow_z_scores():
    sim = SimResult(rows=[_row(0.0), _row(0.5, mx=0.05)])
    ref = FieldMoments(0.0, 0.0, 1.0, 1.0, 0.0)
    result = compare_to_flow(sim, None, [(0.0, ref), (0.5, ref)])
    assert result.rows[1].z["mean_x"] == pytest.approx(5.0)
    assert result.max_abs_z == pytest.approx(5.0)
    assert not result.passed
    assert compare_to_flow(sim, None, [(0.0, ref)]).passed


def test_compare_to_flow_needs_a_common_time():
    sim = SimResult(rows=[_row(0.2)])
    with pytest.raises(ConfigError):
        compare_to_flow(sim, None, [(0.5, FieldMoments(0.0, 0.0, 1.0, 1.0, 0.0))])


def test_sampling_the_equilibrium_density(quadratic_grid):
    x, y = sample_grid_density(quadratic_grid, np.ones(quadratic_grid.shape), 50_000, seed=4)
    assert abs(np.mean(x)) < 0.03
    assert np.var(x) == pytest.approx(1.0, abs=0.05)
    assert np.var(y) == pytest.approx(1.0, abs=0.05)


# ----------------------------
# Weak order and stationarity
# ----------------------------

def test_noiseless_mean_error_is_first_order(quadratic_model):
    def error(dt):
        cfg = _cfg(quadratic_model, n_particles=1, dt=dt, T=1.0, noise_scale=0.0)
        row = simulate(cfg, [1.0], initial_sample=(np.ones(1), np.zeros(1))).rows[0]
        return float(np.hypot(*(np.array([row.mean_x, row.mean_y]) - ou_mean((1.0, 0.0), 1.0))))

    ratio = error(0.01) / error(0.005)
    assert 1.8 < ratio < 2.2


def test_stationary_variance_bias_halves_with_dt(quadratic_model):
    # started from μ the velocity variance drifts to 1 + O(dt) under Euler-Maruyama
    def bias(dt):
        cfg = _cfg(quadratic_model, n_particles=400_000, dt=dt, T=3.0, initial=GaussianLaw())
        return simulate(cfg, [3.0]).rows[0].var_y - 1.0

    coarse, fine = bias(0.1), bias(0.05)
    assert coarse > fine > 0
    assert 1.5 < coarse / fine < 2.7


def test_particles_drawn_from_mu_stay_at_mu(quartic_model):
    grid = build_grid(quartic_model, GridConfig(Rx=3.5, Ry=6.0, nx=201, ny=201))
    n = 50_000
    start = sample_grid_density(grid, np.ones(grid.shape), n, seed=11)
    cfg = _cfg(quartic_model, n_particles=n, dt=0.005, T=1.0, initial=None)
    row = simulate(cfg, [1.0], initial_sample=start).rows[0]
    ref = gibbs_moments(quartic_model.spec)
    assert abs(row.mean_x - ref.mean_x) < 4 * row.se_mean_x + 0.01
    assert abs(row.mean_y) < 4 * row.se_mean_y + 0.01
    assert abs(row.var_x - ref.var_x) < 4 * row.se_var_x + 0.01
    assert abs(row.var_y - ref.var_y) < 4 * row.se_var_y + 0.01
    assert row.escapes == 0
