from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from pydantic import Field as PydField
from scipy.linalg import expm

from app.constants import MultiplierSchedule, Theorem1Constants, decay_envelope, rate_integral
from app.errors import BlowUpError, ConfigError
from app.grid import (
    DENSITY_FLOOR,
    Field,
    PhaseGrid,
    PsiKind,
    dirichlet_form,
    functional,
    psi_second,
)

logger = logging.getLogger(__name__)

TransportKind = Literal["upwind", "upwind2"]

CFL_SAFETY = 0.9
HEUN_LIMIT = 1.8
BLOWUP_FACTOR = 10.0
ENVELOPE_SLACK = 1e-6
G_TOLERANCE = 1e-8
# round-off floor for runs that start at (or reach) equilibrium
ABSOLUTE_FLOOR = 1e-14

OU_DRIFT = np.array([[0.0, 1.0], [-1.0, -1.0]])


# ----------------------------
# State and report models
# ----------------------------

@dataclass(frozen=True)
class FlowState:
    t: float
    f: Field
    step_count: int = 0
    clamp_count: int = 0


class DecayRow(BaseModel):
    t: float
    ent: float
    var: float
    psi: float
    F: float
    G: float
    envelope: float
    mass: float
    fmin: float
    dirichlet: float


class DecayReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    rows: List[DecayRow]
    psi_kind: PsiKind
    transport: TransportKind
    dt: float
    step_count: int
    clamp_count: int
    # fields kept at record times when requested, keyed by t
    fields: Dict[float, np.ndarray] = PydField(default_factory=dict, exclude=True)

    @property
    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.rows])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])


class Theorem1Verdict(BaseModel):
    holds: bool
    worst_margin: float
    g_monotone: bool
    g_violations: int
    production_violations: Optional[int] = None


# ----------------------------
# Time stepping
# ----------------------------

def cfl_limits(grid: PhaseGrid) -> Dict[str, float]:
    max_y = float(np.max(np.abs(grid.y)))
    max_du = float(np.max(np.abs(grid.dU)))
    return {
        "diffusion hy^2/2": 0.5 * grid.hy**2,
        "x-transport hx/max|y|": grid.hx / max_y if max_y > 0 else math.inf,
        "y-transport hy/max|U'|": grid.hy / max_du if max_du > 0 else math.inf,
    }


def stability_limit(grid: PhaseGrid) -> float:
    return CFL_SAFETY * min(cfl_limits(grid).values())


def _advect(g: np.ndarray, courant: np.ndarray, transport: TransportKind) -> np.ndarray:
    """One flux-form step of g_t + a g_s = 0 along the last axis, courant = a dt/h per line."""
    c = courant[..., None]
    p = np.pad(g, [(0, 0)] * (g.ndim - 1) + [(2, 2)], mode="edge")
    left, right = p[..., 1:-2], p[..., 2:-1]
    if transport == "upwind":
        face = np.where(c >= 0, left, right)
    else:
        # Fromm: centered slopes, upwind-biased face reconstruction
        slope = 0.5 * (p[..., 2:] - p[..., :-2])
        face = np.where(
            c >= 0,
            left + 0.5 * (1.0 - c) * slope[..., :-1],
            right - 0.5 * (1.0 + c) * slope[..., 1:],
        )
    flux = c * face
    return g - (flux[..., 1:] - flux[..., :-1])


def _transport_x(grid: PhaseGrid, f: np.ndarray, dt: float, transport: TransportKind) -> np.ndarray:
    # ∂t f = −y ∂x f, lines of constant y
    return _advect(f.T, grid.y * dt / grid.hx, transport).T


def _transport_y(grid: PhaseGrid, f: np.ndarray, dt: float, transport: TransportKind) -> np.ndarray:
    # ∂t f = U' ∂y f, lines of constant x
    return _advect(f, -grid.dU * dt / grid.hy, transport)


def _diffuse(grid: PhaseGrid, f: np.ndarray, dt: float) -> np.ndarray:
    """Heun steps of ∂t f = L_s f, sub-cycled inside the real stability interval."""
    Ls = grid.Ls
    radius = 2.0 * float(np.max(np.abs(Ls.diagonal())))
    n_sub = max(1, math.ceil(dt * radius / HEUN_LIMIT))
    h = dt / n_sub
    v = f.ravel()
    for _ in range(n_sub):
        k1 = Ls @ v
        k2 = Ls @ (v + h * k1)
        v = v + 0.5 * h * (k1 + k2)
    return v.reshape(grid.shape)


def step(grid: PhaseGrid, state: FlowState, dt: float, transport: TransportKind = "upwind2") -> FlowState:
    """Strang step X(dt/2) Y(dt/2) S(dt) Y(dt/2) X(dt/2), then floor and mass renormalization."""
    if not dt > 0:
        raise ConfigError(f"dt must be > 0, got {dt}")
    f = state.f
    half = 0.5 * dt
    g = _transport_x(grid, f, half, transport)
    g = _transport_y(grid, g, half, transport)
    g = _diffuse(grid, g, dt)
    g = _transport_y(grid, g, half, transport)
    g = _transport_x(grid, g, half, transport)

    before = float(np.max(np.abs(f)))
    after = float(np.max(np.abs(g)))
    if not np.isfinite(after) or after > BLOWUP_FACTOR * before:
        limits = cfl_limits(grid)
        violated = [name for name, lim in limits.items() if dt > lim] or [min(limits, key=limits.get)]
        raise BlowUpError(
            f"max|f| grew from {before:.3e} to {after:.3e} in one step at t={state.t:.6g} with dt={dt:.3e}",
            ", ".join(violated),
        )

    low = g < DENSITY_FLOOR
    clamps = int(np.sum(low))
    if clamps:
        g = np.where(low, DENSITY_FLOOR, g)
    g = g / grid.integrate(g)
    return FlowState(
        t=state.t + dt,
        f=g,
        step_count=state.step_count + 1,
        clamp_count=state.clamp_count + clamps,
    )


# ----------------------------
# Twisted functional
# ----------------------------

def _gradients(grid: PhaseGrid, f: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    fx, fy = np.gradient(f, grid.hx, grid.hy, edge_order=2)
    return fx, fy


def twisted_functional(
    grid: PhaseGrid,
    state: FlowState,
    c: Theorem1Constants,
    psi: PsiKind = "entropy",
) -> Tuple[float, float]:
    """F = ∫ψ(f)(∇f)ᵀM_t∇f dμ and G = F/(2λ) + ∫Ψ(f) dμ."""
    f = np.asarray(state.f, dtype=float)
    ent = functional(grid, f, psi)
    alpha = MultiplierSchedule.alpha(state.t)
    if alpha == 0.0:
        return 0.0, ent
    a, b, cc = MultiplierSchedule.from_constants(c).coefficients(state.t, grid.H)
    fx, fy = _gradients(grid, f)
    quad = a * fx * fx + 2.0 * b * fx * fy + cc * fy * fy
    F = max(grid.integrate(psi_second(psi, np.maximum(f, DENSITY_FLOOR)) * quad), 0.0)
    return F, F / (2.0 * c.lam) + ent


def twisted_bound(grid: PhaseGrid, state: FlowState, c: Theorem1Constants, psi: PsiKind = "entropy") -> float:
    """3εα ∫ψ(f)(H^{−2η}|∂x f|² + |∂y f|²) dμ on the same stencils as twisted_functional."""
    f = np.asarray(state.f, dtype=float)
    fx, fy = _gradients(grid, f)
    energy = grid.weight * fx * fx + fy * fy
    alpha = MultiplierSchedule.alpha(state.t)
    return 3.0 * c.epsilon * alpha * grid.integrate(psi_second(psi, np.maximum(f, DENSITY_FLOOR)) * energy)


# ----------------------------
# Runs and verdicts
# ----------------------------

def _row(grid: PhaseGrid, state: FlowState, c: Theorem1Constants, ent0: float, psi_kind: PsiKind) -> DecayRow:
    F, G = twisted_functional(grid, state, c)
    return DecayRow(
        t=state.t,
        ent=functional(grid, state.f, "entropy"),
        var=functional(grid, state.f, "variance"),
        psi=functional(grid, state.f, psi_kind),
        F=F,
        G=G,
        envelope=float(decay_envelope(c, ent0, state.t)),
        mass=grid.integrate(state.f),
        fmin=float(np.min(state.f)),
        dirichlet=dirichlet_form(grid, state.f, weighted=True, psi_weighted="entropy"),
    )


def run(
    grid: PhaseGrid,
    f0: Field,
    c: Theorem1Constants,
    T: float,
    output_every: int,
    dt: Optional[float] = None,
    psi_kind: PsiKind = "sqrt-log",
    transport: TransportKind = "upwind2",
    record_times: Optional[Sequence[float]] = None,
    keep_fields: bool = False,
) -> DecayReport:
    """Integrate ∂t f = L f to time T, recording every output_every steps and at record_times.

    keep_fields stores a copy of f at t = 0 and at every stop in report.fields.
    """
    if output_every < 1:
        raise ConfigError("output_every must be >= 1")
    if T < 0:
        raise ConfigError("T must be >= 0")
    limit = stability_limit(grid)
    dt = limit if dt is None else float(dt)
    if dt > limit:
        logger.warning("dt=%.3e exceeds the stability limit %.3e", dt, limit)

    f = np.asarray(f0, dtype=float)
    f = f / grid.integrate(f)
    state = FlowState(t=0.0, f=f)
    ent0 = functional(grid, f, "entropy")
    stops = sorted({float(t) for t in (record_times or []) if 0.0 < t < T} | {float(T)})
    rows = [_row(grid, state, c, ent0, psi_kind)]
    fields = {0.0: f.copy()} if keep_fields else {}

    for stop in stops:
        while state.t < stop - 1e-12 * max(1.0, stop):
            h = min(dt, stop - state.t)
            state = step(grid, state, h, transport)
            landed = abs(state.t - stop) <= 1e-12 * max(1.0, stop)
            if landed:
                state = replace(state, t=stop)
                if keep_fields:
                    fields[stop] = state.f.copy()
            if landed or state.step_count % output_every == 0:
                if state.t > rows[-1].t:
                    rows.append(_row(grid, state, c, ent0, psi_kind))
        logger.debug("t=%.4f ent=%.6e G=%.6e", state.t, rows[-1].ent, rows[-1].G)

    logger.info(
        "flow run done: T=%g steps=%d clamps=%d final ent=%.6e",
        T,
        state.step_count,
        state.clamp_count,
        rows[-1].ent,
    )
    return DecayReport(
        rows=rows,
        psi_kind=psi_kind,
        transport=transport,
        dt=dt,
        step_count=state.step_count,
        clamp_count=state.clamp_count,
        fields=fields,
    )


def entropy_production_violations(report: DecayReport, rho: float, tol: float = G_TOLERANCE) -> int:
    """Rows where D(f) >= Ent(f)/ρ held but Ent failed to decrease by the next row."""
    scale = max(1.0, max(r.ent for r in report.rows))
    bad = 0
    for prev, nxt in zip(report.rows, report.rows[1:]):
        if prev.dirichlet >= prev.ent / rho and nxt.ent > prev.ent + tol * scale:
            bad += 1
    return bad


def verify_theorem1(report: DecayReport, c: Theorem1Constants) -> Theorem1Verdict:
    if not report.rows:
        raise ConfigError("empty decay report")
    ent = report.column("ent")
    env = report.column("envelope")
    G = report.column("G")
    t = report.times
    holds = bool(np.all(ent <= env * (1.0 + ENVELOPE_SLACK) + ABSOLUTE_FLOOR))
    worst = float(np.min(env - ent))
    tol = max(G_TOLERANCE * float(np.max(np.abs(G))), ABSOLUTE_FLOOR)
    dG = np.diff(G)
    g_monotone = bool(np.all(dG <= tol))
    decay = np.exp(-c.epsilon**2 / (1.0 + 4.0 * c.lam * c.rho) * np.diff(rate_integral(t)))
    g_violations = int(np.sum(G[1:] > G[:-1] * decay + tol))
    return Theorem1Verdict(
        holds=holds,
        worst_margin=worst,
        g_monotone=g_monotone,
        g_violations=g_violations,
        production_violations=entropy_production_violations(report, c.rho),
    )


# ----------------------------
# Initial data
# ----------------------------

def _gaussian_logpdf(grid: PhaseGrid, mean: Sequence[float], cov) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    prec = np.linalg.inv(cov)
    dx = grid.X - mean[0]
    dy = grid.Y - mean[1]
    quad = prec[0, 0] * dx * dx + 2.0 * prec[0, 1] * dx * dy + prec[1, 1] * dy * dy
    return -0.5 * quad - 0.5 * np.log((2.0 * np.pi) ** 2 * np.linalg.det(cov))


def normalize_density(grid: PhaseGrid, f: np.ndarray) -> np.ndarray:
    return f / grid.integrate(f)


def regularize(grid: PhaseGrid, f: np.ndarray, delta: float = DENSITY_FLOOR) -> np.ndarray:
    """g₀ = (1 − δ) f₀ + δ for a normalized f₀."""
    return normalize_density(grid, (1.0 - delta) * normalize_density(grid, f) + delta)


def gaussian_ratio(grid: PhaseGrid, mean: Sequence[float], cov, delta: float = DENSITY_FLOOR) -> Field:
    """Relative density of N(mean, cov) with respect to the discrete μ."""
    with np.errstate(over="ignore"):
        f = np.exp(_gaussian_logpdf(grid, mean, cov) - grid.log_mu)
    if not np.all(np.isfinite(f)):
        raise ConfigError("Gaussian initial datum overflows the relative density; widen cov or shrink the box")
    return regularize(grid, f, delta)


def mixture(grid: PhaseGrid, components: Sequence[Tuple[float, Sequence[float], Sequence[Sequence[float]]]], delta: float = DENSITY_FLOOR) -> Field:
    total = sum(w for w, _, _ in components)
    f = np.zeros(grid.shape)
    for w, mean, cov in components:
        f = f + (w / total) * gaussian_ratio(grid, mean, cov, delta=0.0)
    return regularize(grid, f, delta)


def indicator(grid: PhaseGrid, box: Tuple[float, float, float, float], floor: float = 0.05) -> Field:
    """Floor-bounded rough datum: floor + 1 on [x0, x1] x [y0, y1]."""
    x0, x1, y0, y1 = box
    inside = (grid.X >= x0) & (grid.X <= x1) & (grid.Y >= y0) & (grid.Y <= y1)
    if not np.any(inside):
        raise ConfigError(f"indicator box {box} contains no grid node")
    return normalize_density(grid, floor + inside.astype(float))


# ----------------------------
# Quadratic-potential oracle
# ----------------------------

def ou_mean(mean0: Sequence[float], t: float) -> np.ndarray:
    return expm(OU_DRIFT * t) @ np.asarray(mean0, dtype=float)


def ou_covariance(cov0, t: float) -> np.ndarray:
    """Σ(t) = I + e^{At}(Σ₀ − I)e^{Aᵀt}, solving Σ' = AΣ + ΣAᵀ + 2 diag(0, 1)."""
    E = expm(OU_DRIFT * t)
    return np.eye(2) + E @ (np.asarray(cov0, dtype=float) - np.eye(2)) @ E.T


def gaussian_relative_entropy(mean: Sequence[float], cov) -> float:
    """KL(N(mean, cov) || N(0, I)) in two dimensions."""
    cov = np.asarray(cov, dtype=float)
    m = np.asarray(mean, dtype=float)
    return 0.5 * (float(np.trace(cov)) + float(m @ m) - 2.0 - math.log(float(np.linalg.det(cov))))


def ou_entropy(mean0: Sequence[float], cov0, t: float) -> float:
    return gaussian_relative_entropy(ou_mean(mean0, t), ou_covariance(cov0, t))
