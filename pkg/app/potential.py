from __future__ import annotations

import logging
from typing import Literal, NamedTuple, Optional, Tuple

import numpy as np
from numpy.polynomial import Polynomial
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import integrate, optimize, special

from app.errors import DomainError, IncompatibleEtaError

logger = logging.getLogger(__name__)

PotentialFamily = Literal["quadratic", "even-monomial", "stretched-exp", "polynomial"]

# default ς in (x² + ς)^{1/2}, which stands in for |x| in the stretched exponential
SMOOTH_ABS_EPS = 1e-12
# |x| below which the stretched-exp Hessian is set by the smoothing
CORE_RADIUS = 1.0
CORE_DOMINANCE = 10.0
TAIL_TOLERANCE = 1e-10

DEFAULT_OFFSETS = {
    "quadratic": 1.0,
    "even-monomial": 1.0,
    "stretched-exp": 0.0,
    "polynomial": 0.0,
}


# ----------------------------
# Models
# ----------------------------

class PotentialSpec(BaseModel):
    """Confinement potential U on the real line.

    quadratic       U = offset + x²/2
    even-monomial   U = offset + x^l
    stretched-exp   U = offset + exp(a (x² + ς)^{b/2}), ς = smoothing
    polynomial      U = offset + Σ coefficients[k] x^k (ascending powers)
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    family: PotentialFamily = "quadratic"
    l: int = Field(4, ge=2)
    a: float = Field(1.0, gt=0)
    b: float = Field(0.5, gt=0)
    coefficients: Optional[Tuple[float, ...]] = None
    offset: Optional[float] = None
    smoothing: float = Field(SMOOTH_ABS_EPS, gt=0)
    dimension: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_family(self) -> "PotentialSpec":
        if self.family == "even-monomial" and self.l % 2:
            raise ValueError(f"even-monomial needs an even exponent, got l={self.l}")
        if self.family == "polynomial":
            coeffs = self.coefficients or ()
            if len(coeffs) < 3:
                raise ValueError("polynomial needs coefficients up to at least degree 2")
            degree = len(coeffs) - 1
            if degree % 2 or coeffs[-1] <= 0:
                raise ValueError("polynomial must have even degree and a positive leading coefficient")
        if self.min_value < 1.0 - 1e-12:
            raise ValueError(
                f"U must stay >= 1, but min U = {self.min_value:.6g}; "
                f"raise offset by at least {1.0 - self.min_value:.6g}"
            )
        return self

    @property
    def resolved_offset(self) -> float:
        return DEFAULT_OFFSETS[self.family] if self.offset is None else float(self.offset)

    @property
    def polynomial(self) -> Polynomial:
        coeffs = list(self.coefficients or (0.0,))
        coeffs[0] += self.resolved_offset
        return Polynomial(coeffs)

    @property
    def degree(self) -> int:
        if self.family == "quadratic":
            return 2
        if self.family == "even-monomial":
            return self.l
        if self.family == "polynomial":
            return len(self.coefficients or ()) - 1
        raise ValueError("stretched-exp has no polynomial degree")

    @property
    def min_value(self) -> float:
        off = self.resolved_offset
        if self.family in ("quadratic", "even-monomial"):
            return off
        if self.family == "stretched-exp":
            return off + float(np.exp(self.a * self.smoothing ** (self.b / 2)))
        poly = self.polynomial
        crit = poly.deriv().roots()
        real = crit[np.abs(crit.imag) < 1e-9].real
        if real.size == 0:
            return float("inf")
        return float(np.min(poly(real)))


class HamiltonianModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    spec: PotentialSpec
    eta: float = Field(0.0, ge=0)


class PotentialValues(NamedTuple):
    U: np.ndarray
    dU: np.ndarray
    d2U: np.ndarray


class HamiltonianValues(NamedTuple):
    H: np.ndarray
    gradH: np.ndarray
    weight: np.ndarray


class HessianBound(BaseModel):
    value: float
    diverging: bool
    edge_value: float
    half_domain_value: float
    domain: Tuple[float, float]
    # sup over |x| >= CORE_RADIUS; differs from value only for stretched-exp
    tail_value: Optional[float] = None
    core_dominated: bool = False


# ----------------------------
# Evaluation
# ----------------------------

def _evaluate(spec: PotentialSpec, x) -> PotentialValues:
    x = np.asarray(x, dtype=float)
    off = spec.resolved_offset
    with np.errstate(over="ignore", invalid="ignore"):
        if spec.family == "quadratic":
            return PotentialValues(off + 0.5 * x * x, x.copy(), np.ones_like(x))
        if spec.family == "even-monomial":
            l = spec.l
            return PotentialValues(off + x**l, l * x ** (l - 1), l * (l - 1) * x ** (l - 2))
        if spec.family == "stretched-exp":
            a, b = spec.a, spec.b
            s = np.sqrt(x * x + spec.smoothing)
            g = a * s**b
            g1 = a * b * s ** (b - 2) * x
            g2 = a * b * (s ** (b - 2) + (b - 2) * x * x * s ** (b - 4))
            eg = np.exp(g)
            return PotentialValues(off + eg, eg * g1, eg * (g2 + g1 * g1))
        poly = spec.polynomial
        return PotentialValues(poly(x), poly.deriv()(x), poly.deriv(2)(x))


def eval_potential(spec: PotentialSpec, x) -> PotentialValues:
    """U, U', U'' at x (scalar or array); raises DomainError on overflow."""
    vals = _evaluate(spec, x)
    if not all(np.all(np.isfinite(v)) for v in vals):
        bad = np.asarray(x, dtype=float)[~np.isfinite(vals.U + vals.dU + vals.d2U)]
        raise DomainError(f"{spec.family} potential is not finite at x={bad.ravel()[:3]}")
    return vals


def eval_hamiltonian(model: HamiltonianModel, x, y) -> HamiltonianValues:
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    U, dU, _ = eval_potential(model.spec, x)
    H = U + 0.5 * y * y
    weight = np.power(H, -2.0 * model.eta)
    return HamiltonianValues(H, np.stack([dU, y]), weight)


def marginal_weights(model: HamiltonianModel, x, y) -> Tuple[np.ndarray, np.ndarray]:
    """φ₁ = U^{-2η} and φ₂ = (1 + y²/2)^{-2η}; φ₁φ₂ <= H^{-2η} <= min(φ₁, φ₂)."""
    U = eval_potential(model.spec, x).U
    y = np.asarray(y, dtype=float)
    return np.power(U, -2.0 * model.eta), np.power(1.0 + 0.5 * y * y, -2.0 * model.eta)


# ----------------------------
# Weighted Hessian and tail analysis
# ----------------------------

def _weighted_hessian(model: HamiltonianModel, x, y):
    vals = _evaluate(model.spec, x)
    H = vals.U + 0.5 * np.asarray(y, dtype=float) ** 2
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        # log space keeps stretched-exp tails finite
        out = np.exp(np.log(np.abs(vals.d2U) + 1e-300) - 2.0 * model.eta * np.log(H))
    return np.where(np.isfinite(out), out, np.inf)


def _scan_sup(model: HamiltonianModel, lo: float, hi: float, n_scan: int) -> Tuple[float, float]:
    xs = np.linspace(lo, hi, n_scan)
    half = 0.5 * max(abs(lo), abs(hi))
    ys = np.union1d(np.linspace(-half, half, n_scan), [0.0])
    grid = _weighted_hessian(model, xs[:, None], ys[None, :])
    sup = float(np.max(grid))
    # the weight is largest at y = 0; polish the best bracket there
    row = _weighted_hessian(model, xs, 0.0)
    k = int(np.argmax(row))
    left, right = xs[max(k - 1, 0)], xs[min(k + 1, n_scan - 1)]
    if right > left and np.isfinite(sup):
        res = optimize.minimize_scalar(
            lambda t: -float(_weighted_hessian(model, t, 0.0)),
            bounds=(left, right),
            method="bounded",
            options={"xatol": 1e-10},
        )
        sup = max(sup, -float(res.fun))
    edge = float(max(row[0], row[-1]))
    return sup, edge


def hessian_weight_bound(
    model: HamiltonianModel,
    domain: Tuple[float, float] = (-20.0, 20.0),
    n_scan: int = 801,
) -> HessianBound:
    """Scan estimate of sup H^{-2η}|U''| with a divergence flag.

    Flags divergence when the edge value is within 1% of the sup and the sup
    still grows by more than 1% from the half-size domain.
    """
    if n_scan < 2:
        raise ValueError("n_scan must be >= 2")
    lo, hi = float(domain[0]), float(domain[1])
    if not hi > lo:
        raise ValueError(f"empty scan domain {domain}")
    sup, edge = _scan_sup(model, lo, hi, n_scan)
    mid = 0.5 * (lo + hi)
    half_sup, _ = _scan_sup(model, mid + 0.5 * (lo - mid), mid + 0.5 * (hi - mid), n_scan)
    diverging = (not np.isfinite(sup)) or (edge >= 0.99 * sup and sup > 1.01 * half_sup)
    if diverging:
        logger.warning(
            "H^{-2eta}|U''| still growing at the scan edge (eta=%.4g, sup=%.6g, half-domain sup=%.6g)",
            model.eta,
            sup,
            half_sup,
        )
    tail, core_dominated = sup, False
    outer = max(abs(lo), abs(hi))
    if model.spec.family == "stretched-exp" and outer > CORE_RADIUS:
        tail, _ = _scan_sup(model, CORE_RADIUS, outer, n_scan)
        core_dominated = bool(sup > CORE_DOMINANCE * tail)
        if core_dominated:
            logger.warning(
                "H^{-2eta}|U''| sup %.6g comes from the smoothing core |x| < %g (smoothing=%g); "
                "the sup over |x| >= %g is %.6g",
                sup,
                CORE_RADIUS,
                model.spec.smoothing,
                CORE_RADIUS,
                tail,
            )
    return HessianBound(
        value=sup,
        diverging=bool(diverging),
        edge_value=edge,
        half_domain_value=half_sup,
        domain=(lo, hi),
        tail_value=tail,
        core_dominated=core_dominated,
    )


def recommended_eta(spec: PotentialSpec) -> float:
    if spec.family == "quadratic":
        return 0.0
    if spec.family in ("even-monomial", "polynomial"):
        return 0.5 - 1.0 / spec.degree
    if spec.b >= 1.0:
        raise IncompatibleEtaError(
            f"stretched-exp with b={spec.b} >= 1: the Hessian bound needs 2*eta > 1 "
            "while the growth condition needs 2*eta <= 1"
        )
    return 0.5


# ----------------------------
# Truncation helpers
# ----------------------------

def _boltzmann(spec: PotentialSpec, x: float) -> float:
    with np.errstate(over="ignore"):
        return float(np.exp(-_evaluate(spec, x).U))


def x_tail_mass(spec: PotentialSpec, rx: float) -> float:
    """Relative mass of e^{-U} outside [-rx, rx]."""
    inner, _ = integrate.quad(lambda t: _boltzmann(spec, t), -rx, rx, limit=200)
    right, _ = integrate.quad(lambda t: _boltzmann(spec, t), rx, np.inf, limit=200)
    left, _ = integrate.quad(lambda t: _boltzmann(spec, t), -np.inf, -rx, limit=200)
    total = inner + left + right
    return (left + right) / total


def y_tail_mass(ry: float) -> float:
    return float(special.erfc(ry / np.sqrt(2.0)))


def box_tail_mass(spec: PotentialSpec, rx: float, ry: float) -> float:
    tx, ty = x_tail_mass(spec, rx), y_tail_mass(ry)
    return 1.0 - (1.0 - tx) * (1.0 - ty)


def suggest_box(spec: PotentialSpec, tol: float = TAIL_TOLERANCE) -> Tuple[float, float]:
    """Smallest (Rx, Ry), on a 0.25 lattice, whose box tail mass is below tol."""
    ry = float(np.ceil(4.0 * np.sqrt(2.0) * special.erfcinv(0.5 * tol))) / 4.0
    rx = 0.5
    while rx < 200.0 and x_tail_mass(spec, rx) >= 0.5 * tol:
        rx += 0.25
    return rx, ry
