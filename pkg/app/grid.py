from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Literal, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field as PydField
from scipy import sparse
from scipy.special import logsumexp, roots_legendre

from app.errors import PositivityError, TruncationError
from app.potential import (
    TAIL_TOLERANCE,
    HamiltonianModel,
    box_tail_mass,
    eval_potential,
    suggest_box,
)

logger = logging.getLogger(__name__)

Field = np.ndarray
PsiKind = Literal["variance", "entropy", "sqrt-log"]
Generator = Literal["L", "Lstar", "Ls", "La", "Leta"]
TransportScheme = Literal["skew", "upwind"]

DENSITY_FLOOR = 1e-12
MU_FLOOR = 1e-300
INTERIOR_FRACTION = 0.5
_GL_NODES, _GL_WEIGHTS = roots_legendre(32)


class GridConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    Rx: float = PydField(8.0, gt=0)
    Ry: float = PydField(8.0, gt=0)
    nx: int = PydField(129, ge=5)
    ny: int = PydField(129, ge=5)


class FieldMoments(NamedTuple):
    mean_x: float
    mean_y: float
    var_x: float
    var_y: float
    cov_xy: float


class CommutatorResidual(NamedTuple):
    r1: float
    r2: float


# ----------------------------
# Grid
# ----------------------------

@dataclass(frozen=True, eq=False)
class PhaseGrid:
    """Truncated (x, y) box; arrays are indexed [i, j] <-> (x_i, y_j)."""

    model: HamiltonianModel
    config: GridConfig
    x: np.ndarray
    y: np.ndarray
    U: np.ndarray
    dU: np.ndarray
    d2U: np.ndarray
    H: np.ndarray
    weight: np.ndarray
    log_mu: np.ndarray
    mu: np.ndarray

    @property
    def nx(self) -> int:
        return self.x.size

    @property
    def ny(self) -> int:
        return self.y.size

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def hx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def hy(self) -> float:
        return float(self.y[1] - self.y[0])

    @property
    def cell(self) -> float:
        return self.hx * self.hy

    @property
    def X(self) -> np.ndarray:
        return np.broadcast_to(self.x[:, None], self.shape)

    @property
    def Y(self) -> np.ndarray:
        return np.broadcast_to(self.y[None, :], self.shape)

    @property
    def gradH(self) -> np.ndarray:
        return np.stack([np.broadcast_to(self.dU[:, None], self.shape), self.Y])

    # quadrature against μ
    def integrate(self, values) -> float:
        return float(np.sum(np.asarray(values) * self.mu) * self.cell)

    def inner(self, f: Field, g: Field) -> float:
        return self.integrate(f * g)

    def sublevel_mask(self, r: float) -> np.ndarray:
        """Node mask of A_r = {H <= r}."""
        return self.H <= r

    def interior_mask(self, fraction: float = INTERIOR_FRACTION) -> np.ndarray:
        return (np.abs(self.X) <= fraction * self.config.Rx) & (np.abs(self.Y) <= fraction * self.config.Ry)

    def with_eta(self, eta: float) -> "PhaseGrid":
        if eta == self.model.eta:
            return self
        return build_grid(self.model.model_copy(update={"eta": eta}), self.config)

    # ----------------------------
    # Sparse operators (flattened C order)
    # ----------------------------

    @cached_property
    def Ls(self) -> sparse.csr_matrix:
        yf = 0.5 * (self.y[1:] + self.y[:-1])
        fwd = np.exp(-0.5 * (yf**2 - self.y[:-1] ** 2)) / self.hy**2
        bwd = np.exp(-0.5 * (yf**2 - self.y[1:] ** 2)) / self.hy**2
        return _flux_operator(self.shape, 1, np.tile(fwd, (self.nx, 1)), np.tile(bwd, (self.nx, 1)))

    @cached_property
    def Lx_eta(self) -> sparse.csr_matrix:
        xf = 0.5 * (self.x[1:] + self.x[:-1])
        Uf = eval_potential(self.model.spec, xf).U
        Hf = Uf[:, None] + 0.5 * self.y[None, :] ** 2
        wf = np.power(Hf, -2.0 * self.model.eta)
        fwd = wf * np.exp(-(Uf - self.U[:-1])[:, None]) / self.hx**2
        bwd = wf * np.exp(-(Uf - self.U[1:])[:, None]) / self.hx**2
        return _flux_operator(self.shape, 0, fwd, bwd)

    @cached_property
    def Leta(self) -> sparse.csr_matrix:
        return (self.Lx_eta + self.Ls).tocsr()

    @cached_property
    def La(self) -> sparse.csr_matrix:
        return _skew_transport(self)

    @cached_property
    def La_upwind(self) -> sparse.csr_matrix:
        return _upwind_transport(self)

    @cached_property
    def stiffness(self) -> sparse.csr_matrix:
        """S = −diag(μ h²) L_η, symmetric positive semi-definite."""
        S = -(sparse.diags(self.mass_diagonal) @ self.Leta)
        return ((S + S.T) * 0.5).tocsr()

    @cached_property
    def mass_diagonal(self) -> np.ndarray:
        return np.maximum(self.mu, MU_FLOOR).ravel() * self.cell

    def generator(self, which: Generator, scheme: TransportScheme = "skew") -> sparse.csr_matrix:
        transport = self.La if scheme == "skew" else self.La_upwind
        table = {
            "Ls": lambda: self.Ls,
            "La": lambda: transport,
            "Leta": lambda: self.Leta,
            "L": lambda: (self.Ls + transport).tocsr(),
            "Lstar": lambda: (self.Ls - transport).tocsr(),
        }
        if which not in table:
            raise ValueError(f"unknown generator '{which}'")
        return table[which]()


def _flux_operator(shape: Tuple[int, int], axis: int, fwd: np.ndarray, bwd: np.ndarray) -> sparse.csr_matrix:
    """Σ_n c_{k→n}(f_n − f_k) along one axis; fwd/bwd hold face coefficients seen from each side."""
    n = shape[0] * shape[1]
    idx = np.arange(n).reshape(shape)
    if axis == 0:
        lo, hi = idx[:-1, :], idx[1:, :]
    else:
        lo, hi = idx[:, :-1], idx[:, 1:]
    rows = np.concatenate([lo.ravel(), hi.ravel()])
    cols = np.concatenate([hi.ravel(), lo.ravel()])
    vals = np.concatenate([np.ravel(fwd), np.ravel(bwd)])
    off = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    diag = np.asarray(off.sum(axis=1)).ravel()
    return (off - sparse.diags(diag)).tocsr()


def _skew_transport(grid: PhaseGrid) -> sparse.csr_matrix:
    """Centered −y∂x + U'∂y built from face fluxes of the stream function μ.

    Corner values ψ = μ(x_{i+½}, y_{j+½}) (zero outside the box) give
    divergence-free fluxes, so the operator is antisymmetric in L²(μ), kills
    constants and conserves Σ f μ at every node. The corner ratios ψ/μ grow
    like e^{U'h/2} toward the x-edge, so L_a 1 vanishes only to rounding
    relative to the largest entry.
    """
    nx, ny = grid.shape
    xc = 0.5 * (grid.x[1:] + grid.x[:-1])
    yc = 0.5 * (grid.y[1:] + grid.y[:-1])
    Uc = eval_potential(grid.model.spec, xc).U
    log_norm = float(np.mean(grid.log_mu + grid.H))
    # padded (nx+1, ny+1) corner grid; the outer ring stays at −inf
    log_psi = np.full((nx + 1, ny + 1), -np.inf)
    log_psi[1:-1, 1:-1] = -(Uc[:, None] + 0.5 * yc[None, :] ** 2) + log_norm

    def ratio(corner: np.ndarray) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(corner - grid.log_mu)

    pp, pm = ratio(log_psi[1:, 1:]), ratio(log_psi[1:, :-1])
    mp, mm = ratio(log_psi[:-1, 1:]), ratio(log_psi[:-1, :-1])
    hx, hy = grid.hx, grid.hy
    # fluxes through the four faces of node (i, j), divided by 2μ_ij
    east = (pp - pm) / (2.0 * hy * hx)
    west = (mp - mm) / (2.0 * hy * hx)
    north = -(pp - mp) / (2.0 * hx * hy)
    south = -(pm - mm) / (2.0 * hx * hy)

    idx = np.arange(nx * ny).reshape(grid.shape)
    entries = [
        (idx[:-1, :], idx[1:, :], east[:-1, :]),
        (idx[1:, :], idx[:-1, :], -west[1:, :]),
        (idx[:, :-1], idx[:, 1:], north[:, :-1]),
        (idx[:, 1:], idx[:, :-1], -south[:, 1:]),
    ]
    return _assemble(nx * ny, entries)


def _assemble(n: int, entries) -> sparse.csr_matrix:
    rows = np.concatenate([np.ravel(r) for r, _, _ in entries])
    cols = np.concatenate([np.ravel(c) for _, c, _ in entries])
    vals = np.concatenate([np.ravel(v) for _, _, v in entries])
    return sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def _upwind_transport(grid: PhaseGrid) -> sparse.csr_matrix:
    """First-order upwind −y∂x + U'∂y with exact speeds and closed edges."""
    idx = np.arange(grid.nx * grid.ny).reshape(grid.shape)
    speeds = [
        (-np.asarray(grid.Y), 0, grid.hx),
        (np.broadcast_to(grid.dU[:, None], grid.shape), 1, grid.hy),
    ]
    entries = []
    for speed, axis, h in speeds:
        lo = (slice(None, -1), slice(None)) if axis == 0 else (slice(None), slice(None, -1))
        hi = (slice(1, None), slice(None)) if axis == 0 else (slice(None), slice(1, None))
        k_lo, k_hi = idx[lo], idx[hi]
        # speed > 0 reads the forward neighbour, speed <= 0 the backward one
        fwd = speed[lo] > 0
        c = speed[lo][fwd] / h
        entries += [(k_lo[fwd], k_hi[fwd], c), (k_lo[fwd], k_lo[fwd], -c)]
        bwd = speed[hi] <= 0
        c = speed[hi][bwd] / h
        entries += [(k_hi[bwd], k_hi[bwd], c), (k_hi[bwd], k_lo[bwd], -c)]
    return _assemble(grid.nx * grid.ny, entries)


def build_grid(model: HamiltonianModel, config: GridConfig) -> PhaseGrid:
    tail = box_tail_mass(model.spec, config.Rx, config.Ry)
    if tail >= TAIL_TOLERANCE:
        rx, ry = suggest_box(model.spec)
        raise TruncationError(
            f"e^-H tail mass {tail:.3e} outside [-{config.Rx}, {config.Rx}]x[-{config.Ry}, {config.Ry}] "
            f"exceeds {TAIL_TOLERANCE:g}",
            max(rx, config.Rx),
            max(ry, config.Ry),
        )
    x = np.linspace(-config.Rx, config.Rx, config.nx)
    y = np.linspace(-config.Ry, config.Ry, config.ny)
    U, dU, d2U = eval_potential(model.spec, x)
    H = U[:, None] + 0.5 * y[None, :] ** 2
    hx, hy = x[1] - x[0], y[1] - y[0]
    log_mu = -H - (logsumexp(-H) + np.log(hx * hy))
    mu = np.exp(log_mu)
    if np.any(mu < MU_FLOOR):
        logger.warning("mu underflows on %d nodes; floored at %g in weighted forms", int(np.sum(mu < MU_FLOOR)), MU_FLOOR)
    logger.debug("grid %dx%d on [-%g,%g]x[-%g,%g], tail=%.2e", config.nx, config.ny, config.Rx, config.Rx, config.Ry, config.Ry, tail)
    return PhaseGrid(
        model=model,
        config=config,
        x=x,
        y=y,
        U=U,
        dU=dU,
        d2U=d2U,
        H=H,
        weight=np.power(H, -2.0 * model.eta),
        log_mu=log_mu,
        mu=mu,
    )


# ----------------------------
# Operators on fields
# ----------------------------

def apply_generator(
    grid: PhaseGrid,
    field: Field,
    which: Generator,
    scheme: TransportScheme = "skew",
) -> Field:
    f = np.asarray(field, dtype=float)
    return (grid.generator(which, scheme) @ f.ravel()).reshape(grid.shape)


def ls_inverse_power_closed_form(y, H, eta: float, d: int = 1):
    """L_s(H^{−η}) = η(|y|² − d)H^{−η−1} + η(η+1)|y|²H^{−η−2}."""
    y2 = np.asarray(y, dtype=float) ** 2
    H = np.asarray(H, dtype=float)
    return eta * (y2 - d) * H ** (-eta - 1) + eta * (eta + 1) * y2 * H ** (-eta - 2)


def ls_inverse_power_upper_bound(y, H, eta: float, d: int = 1):
    """η(|y|² + d)H^{−η−1} + η(η+1)|y|²H^{−η−2}, which dominates the exact value."""
    y2 = np.asarray(y, dtype=float) ** 2
    H = np.asarray(H, dtype=float)
    return eta * (y2 + d) * H ** (-eta - 1) + eta * (eta + 1) * y2 * H ** (-eta - 2)


def ls_inverse_power_residual(grid: PhaseGrid, eta: float, fraction: float = INTERIOR_FRACTION) -> float:
    g = np.power(grid.H, -eta)
    discrete = apply_generator(grid, g, "Ls")
    exact = ls_inverse_power_closed_form(grid.Y, grid.H, eta)
    mask = grid.interior_mask(fraction)
    return float(np.max(np.abs(discrete - exact)[mask]))


def _centered(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    out = np.zeros_like(f)
    if axis == 0:
        out[1:-1, :] = (f[2:, :] - f[:-2, :]) / (2.0 * h)
    else:
        out[:, 1:-1] = (f[:, 2:] - f[:, :-2]) / (2.0 * h)
    return out


def _centered_second(f: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(f)
    out[:, 1:-1] = (f[:, 2:] - 2.0 * f[:, 1:-1] + f[:, :-2]) / (h * h)
    return out


def centered_generator(grid: PhaseGrid, f: Field) -> Field:
    """Pointwise-coefficient L = −y∂x + (U' − y)∂y + ∂yy with centered stencils."""
    Y = grid.Y
    dU = grid.dU[:, None]
    return -Y * _centered(f, 0, grid.hx) + (dU - Y) * _centered(f, 1, grid.hy) + _centered_second(f, grid.hy)


def commutator_residual(grid: PhaseGrid, test_field: Field, fraction: float = INTERIOR_FRACTION) -> CommutatorResidual:
    """Max-norm residuals of [L,∂y] = ∂x + ∂y and [L,∂x] = −U''∂y on the interior box."""
    f = np.asarray(test_field, dtype=float)
    hx, hy = grid.hx, grid.hy
    fx, fy = _centered(f, 0, hx), _centered(f, 1, hy)
    Lf = centered_generator(grid, f)
    res1 = centered_generator(grid, fy) - _centered(Lf, 1, hy) - fx - fy
    res2 = centered_generator(grid, fx) - _centered(Lf, 0, hx) + grid.d2U[:, None] * fy
    mask = grid.interior_mask(fraction)
    return CommutatorResidual(float(np.max(np.abs(res1[mask]))), float(np.max(np.abs(res2[mask]))))


# ----------------------------
# Functionals and Dirichlet forms
# ----------------------------

def _check_positive(f: np.ndarray, kind: str) -> Tuple[np.ndarray, int]:
    if np.any(f <= 0):
        bad = int(np.sum(f <= 0))
        raise PositivityError(f"{kind} functional needs a positive field; {bad} node(s) are <= 0")
    low = f < DENSITY_FLOOR
    clamps = int(np.sum(low))
    if clamps:
        logger.debug("clamped %d node(s) at %g", clamps, DENSITY_FLOOR)
    return np.maximum(f, DENSITY_FLOOR), clamps


def sqrt_log_psi(u):
    """Ψ with Ψ'' = ln^{1/2}(e+u)/u and Ψ(1) = Ψ'(1) = 0."""
    u = np.asarray(u, dtype=float)
    lu = np.log(u)
    half = 0.5 * lu[..., None]
    t = half * (_GL_NODES + 1.0)
    integrand = (u[..., None] - np.exp(t)) * np.sqrt(np.log(np.e + np.exp(t)))
    return np.sum(integrand * _GL_WEIGHTS, axis=-1) * half[..., 0]


def psi_function(kind: PsiKind, u):
    u = np.asarray(u, dtype=float)
    if kind == "variance":
        return (u - 1.0) ** 2
    if kind == "entropy":
        return u * np.log(u) + 1.0 - u
    return sqrt_log_psi(u)


def psi_second(kind: PsiKind, u):
    """ψ = Ψ''."""
    u = np.asarray(u, dtype=float)
    if kind == "variance":
        return np.full_like(u, 2.0)
    if kind == "entropy":
        return 1.0 / u
    return np.sqrt(np.log(np.e + u)) / u


def _mass_scale(kind: PsiKind, m: float) -> float:
    return m * m if kind == "variance" else m


def functional(grid: PhaseGrid, field: Field, kind: PsiKind) -> float:
    """∫Ψ(f) dμ for the normalized f/m, rescaled by the mass (Var, Ent exactly)."""
    f = np.asarray(field, dtype=float)
    if kind != "variance":
        f, _ = _check_positive(f, kind)
    m = grid.integrate(f)
    if m == 0:
        return grid.integrate(f * f) if kind == "variance" else 0.0
    value = grid.integrate(psi_function(kind, f / m)) * _mass_scale(kind, m)
    return max(value, 0.0)


def _face_terms(grid: PhaseGrid, f: np.ndarray, weighted: bool):
    """Yield (face μ-weight, squared difference, endpoint slices) for both axes."""
    xf = 0.5 * (grid.x[1:] + grid.x[:-1])
    Uf = eval_potential(grid.model.spec, xf).U
    Hx = Uf[:, None] + 0.5 * grid.y[None, :] ** 2
    mu_x = np.exp(-Hx + (grid.log_mu[:-1, :] + grid.H[:-1, :]))
    if weighted:
        mu_x = mu_x * np.power(Hx, -2.0 * grid.model.eta)
    dfx = (f[1:, :] - f[:-1, :]) / grid.hx
    yf = 0.5 * (grid.y[1:] + grid.y[:-1])
    Hy = grid.U[:, None] + 0.5 * yf[None, :] ** 2
    mu_y = np.exp(-Hy + (grid.log_mu[:, :-1] + grid.H[:, :-1]))
    dfy = (f[:, 1:] - f[:, :-1]) / grid.hy
    yield mu_x, dfx * dfx, (slice(None, -1), slice(None)), (slice(1, None), slice(None))
    yield mu_y, dfy * dfy, (slice(None), slice(None, -1)), (slice(None), slice(1, None))


def dirichlet_form(
    grid: PhaseGrid,
    field: Field,
    weighted: bool = True,
    psi_weighted: Optional[PsiKind] = None,
) -> float:
    """E_η(f) = ∫(H^{−2η}|∂x f|² + |∂y f|²) dμ from face differences.

    With weighted=True this equals −⟨f, L_η f⟩_μ to round-off. A ψ weight,
    averaged over each face, gives ∫ψ(f)(...) dμ on the same scale as functional().
    """
    f = np.asarray(field, dtype=float)
    scale = 1.0
    face_psi = None
    if psi_weighted is not None:
        if psi_weighted != "variance":
            f, _ = _check_positive(f, psi_weighted)
        m = grid.integrate(f)
        u = f / m
        face_psi = psi_second(psi_weighted, u)
        f = u
        scale = _mass_scale(psi_weighted, m)
    total = 0.0
    for mu_face, sq, lo, hi in _face_terms(grid, f, weighted):
        term = mu_face * sq
        if face_psi is not None:
            term = term * 0.5 * (face_psi[lo] + face_psi[hi])
        total += float(np.sum(term))
    return total * grid.cell * scale


def field_moments(grid: PhaseGrid, field: Field) -> FieldMoments:
    f = np.asarray(field, dtype=float)
    m = grid.integrate(f)
    X, Y = grid.X, grid.Y
    mx, my = grid.integrate(f * X) / m, grid.integrate(f * Y) / m
    vx = grid.integrate(f * (X - mx) ** 2) / m
    vy = grid.integrate(f * (Y - my) ** 2) / m
    cxy = grid.integrate(f * (X - mx) * (Y - my)) / m
    return FieldMoments(mx, my, vx, vy, cxy)
