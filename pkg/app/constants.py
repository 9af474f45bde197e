from __future__ import annotations

import logging
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import integrate, special

from app.errors import ConfigError, InvalidConstantError, QuadratureError

logger = logging.getLogger(__name__)

M2_NODES = 128
M2_AGREEMENT = 1e-8
SERIES_CUTOFF = 1e-3


# ----------------------------
# Decay-rate constant bundle
# ----------------------------

class Theorem1Constants(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    eta: float
    d: int
    hess_bound: float
    lam: float = Field(..., alias="lambda")
    kappa: float
    epsilon: float
    rho: float

    @property
    def rate(self) -> float:
        """Entropy rate prefactor κ/(1+4λρ)."""
        return self.kappa / (1.0 + 4.0 * self.lam * self.rho)

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump(by_alias=True)


def theorem1_constants(eta: float, d: int, hess_bound: float, rho: float) -> Theorem1Constants:
    if eta < 0:
        raise ConfigError(f"eta must be >= 0, got {eta}")
    if d < 1:
        raise ConfigError(f"dimension must be >= 1, got {d}")
    if hess_bound < 0 or not np.isfinite(hess_bound):
        raise ConfigError(f"hess_bound must be finite and >= 0, got {hess_bound}")
    if not rho > 0:
        raise InvalidConstantError(f"weighted log-Sobolev constant rho must be > 0, got {rho}")
    s = eta + d
    return Theorem1Constants(
        eta=eta,
        d=d,
        hess_bound=hess_bound,
        lam=(hess_bound + 2.0) ** 2,
        kappa=1.0 / (1300.0 * s**4),
        epsilon=1.0 / (36.0 * s**2),
        rho=rho,
    )


def rate_integral(t):
    """I(t) = ∫₀ᵗ (1 − e^{−s})² ds, vectorized; series branch near 0."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("rate_integral needs t >= 0")
    closed = t + 2.0 * np.expm1(-t) - 0.5 * np.expm1(-2.0 * t)
    series = t**3 / 3.0 - t**4 / 4.0 + 7.0 * t**5 / 60.0
    out = np.where(t < SERIES_CUTOFF, series, closed)
    return float(out) if out.ndim == 0 else out


def decay_envelope(c: Theorem1Constants, ent0: float, t):
    if ent0 < 0:
        raise ValueError("ent0 must be >= 0")
    return ent0 * np.exp(-c.rate * rate_integral(t))


def psi_decay_envelope(c: Theorem1Constants, psi0: float, t):
    """Envelope for a general admissible Ψ under the ψ-weighted inequality."""
    if psi0 < 0:
        raise ValueError("psi0 must be >= 0")
    return psi0 * np.exp(-c.kappa / (3.0 + c.lam * c.rho) * rate_integral(t))


def envelope_samples(c: Theorem1Constants, ent0: float, times: Sequence[float]) -> List[Dict[str, float]]:
    return [{"t": float(t), "envelope": float(decay_envelope(c, ent0, t))} for t in times]


# ----------------------------
# Multipliers
# ----------------------------

class MultiplierSchedule(BaseModel):
    """a = ε³α³H^{−3η}, b = ε²α²H^{−2η}, c = 2εαH^{−η} with α(t) = 1 − e^{−t}."""

    model_config = ConfigDict(frozen=True)

    eta: float
    epsilon: float

    @classmethod
    def from_constants(cls, c: Theorem1Constants) -> "MultiplierSchedule":
        return cls(eta=c.eta, epsilon=c.epsilon)

    @staticmethod
    def alpha(t: float) -> float:
        return float(-np.expm1(-t))

    def coefficients(self, t: float, H) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        s = self.epsilon * self.alpha(t) * np.power(np.asarray(H, dtype=float), -self.eta)
        return s**3, s**2, 2.0 * s


def multiplier_matrix(s: MultiplierSchedule, t: float, H: float) -> np.ndarray:
    if t < 0 or H < 1:
        raise ValueError(f"multiplier matrix needs t >= 0 and H >= 1, got t={t}, H={H}")
    a, b, c = s.coefficients(t, H)
    return np.array([[float(a), float(b)], [float(b), float(c)]])


# ----------------------------
# Constants of the tensorized marginal argument
# ----------------------------

def _m2_weight(r, eta: float):
    return np.power(1.0 + r, -2.0 * eta)


def m2_quadrature(eta: float, d: int = 1) -> float:
    """M₂ = ∫ (1 + |y|²/2)^{−2η} dγ_d(y) for the standard Gaussian γ_d."""
    if eta < 0:
        raise ConfigError(f"eta must be >= 0, got {eta}")
    if d < 1:
        raise ConfigError(f"dimension must be >= 1, got {d}")
    if eta == 0:
        return 1.0
    if d == 1:
        nodes, weights = special.roots_hermitenorm(M2_NODES)
        value = float(np.sum(weights * _m2_weight(0.5 * nodes**2, eta)) / np.sqrt(2.0 * np.pi))
        ys = np.linspace(-40.0, 40.0, 40001)
        dens = np.exp(-0.5 * ys**2) / np.sqrt(2.0 * np.pi)
        check = float(integrate.trapezoid(_m2_weight(0.5 * ys**2, eta) * dens, ys))
    else:
        # |y|²/2 ~ Gamma(d/2, 1)
        shape = 0.5 * d
        nodes, weights = special.roots_genlaguerre(M2_NODES, shape - 1.0)
        value = float(np.sum(weights * _m2_weight(nodes, eta)) / special.gamma(shape))
        check, _ = integrate.quad(
            lambda r: _m2_weight(r, eta) * np.exp((shape - 1.0) * np.log(r) - r - special.gammaln(shape)),
            0.0,
            np.inf,
            epsabs=1e-13,
            epsrel=1e-12,
            limit=200,
        )
    if abs(value - check) > M2_AGREEMENT:
        raise QuadratureError(f"M2 rules disagree for eta={eta}, d={d}: {value!r} vs {check!r}")
    logger.debug("M2(eta=%s, d=%s) = %.12f", eta, d, value)
    return value


def propagate_poincare_constant(c1: float, m2: float) -> float:
    if not c1 > 0:
        raise InvalidConstantError(f"C1 must be > 0, got {c1}")
    if not 0 < m2 <= 1:
        raise InvalidConstantError(f"M2 must lie in (0, 1], got {m2}")
    return max(2.0 + 4.0 / m2, 4.0 * c1 / m2)


def log_sobolev_from_gap(gap: float) -> float:
    """2/gap: the smallest ρ compatible with a Poincaré gap; a lower-bound proxy only."""
    if not gap > 0:
        raise InvalidConstantError(f"spectral gap must be > 0, got {gap}")
    return 2.0 / gap


def mu2_phi_hessian_lower_bound(eta: float, y_norm) -> np.ndarray:
    """Smallest Hessian eigenvalue of |y|²/2 + 2η ln(1 + |y|²/2), a function of |y| only."""
    y2 = np.asarray(y_norm, dtype=float) ** 2
    r = 1.0 + 0.5 * y2
    return 1.0 + 2.0 * eta / r - 2.0 * eta * y2 / r**2
