from __future__ import annotations

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from scipy import integrate, sparse

from app.constants import (
    MultiplierSchedule,
    m2_quadrature,
    multiplier_matrix,
    propagate_poincare_constant,
    rate_integral,
    theorem1_constants,
)
from app.errors import HypoflowError
from app.flow import gaussian_ratio, ou_entropy, run, verify_theorem1
from app.grid import GridConfig, PhaseGrid, build_grid, commutator_residual
from app.lyapunov import LyapunovCandidate, Region, fit_candidate, lemma_ipp_check, spectral_gap
from app.potential import HamiltonianModel, PotentialSpec, eval_hamiltonian, marginal_weights

logger = logging.getLogger(__name__)

CheckFn = Callable[[], Tuple[bool, str]]


class CheckResult(BaseModel):
    name: str
    statement: str
    ok: bool
    detail: str


QUADRATIC = HamiltonianModel(spec=PotentialSpec(family="quadratic"), eta=0.0)
QUARTIC = HamiltonianModel(spec=PotentialSpec(family="even-monomial", l=4), eta=0.25)


def _grid(model: HamiltonianModel, n: int, rx: float = 8.0, ry: float = 8.0) -> PhaseGrid:
    return build_grid(model, GridConfig(Rx=rx, Ry=ry, nx=n, ny=n))


# ----------------------------
# Checks
# ----------------------------

def check_constants() -> Tuple[bool, str]:
    c = theorem1_constants(0.0, 1, 1.0, 1.0)
    ok = np.isclose(c.lam, 9.0) and np.isclose(c.kappa, 1.0 / 1300.0) and np.isclose(c.epsilon, 1.0 / 36.0)
    return bool(ok), f"lambda={c.lam:g} kappa={c.kappa:.6g} epsilon={c.epsilon:.6g}"


def check_rate_integral() -> Tuple[bool, str]:
    worst = 0.0
    for t in (1e-4, 0.5, 2.0, 10.0):
        ref, _ = integrate.quad(lambda s: (1.0 - np.exp(-s)) ** 2, 0.0, t, epsabs=1e-14, epsrel=1e-12)
        worst = max(worst, abs(rate_integral(t) - ref) / max(ref, 1e-300))
    return worst < 1e-9, f"max relative error {worst:.2e}"


def check_multiplier() -> Tuple[bool, str]:
    s = MultiplierSchedule(eta=0.25, epsilon=1.0 / 36.0)
    worst = np.inf
    for t in (0.1, 1.0, 5.0):
        for H in (1.0, 10.0, 1e3):
            M = multiplier_matrix(s, t, H)
            a, b, c = M[0, 0], M[0, 1], M[1, 1]
            worst = min(worst, a * c - b * b)
    return worst >= 0.0, f"min det {worst:.3e}"


def check_tensorized_constants() -> Tuple[bool, str]:
    m2 = m2_quadrature(0.0)
    cp = propagate_poincare_constant(2.0, 1.0)
    return m2 == 1.0 and cp == 8.0, f"M2(0)={m2:g} C'(2,1)={cp:g}"


def check_weight_sandwich() -> Tuple[bool, str]:
    x = np.linspace(-10.0, 10.0, 201)[:, None]
    y = np.linspace(-10.0, 10.0, 201)[None, :]
    w = eval_hamiltonian(QUARTIC, x, y).weight
    p1, p2 = marginal_weights(QUARTIC, x, y)
    lower = bool(np.all(p1 * p2 <= w * (1.0 + 1e-12)))
    upper = bool(np.all(w <= np.minimum(p1, p2) * (1.0 + 1e-12)))
    return lower and upper, f"lower={lower} upper={upper}"


def check_transport_antisymmetry() -> Tuple[bool, str]:
    g = _grid(QUARTIC, 33, rx=3.5)
    M = sparse.diags(g.mass_diagonal) @ g.La
    skew = float(abs(M + M.T).max()) / float(abs(M).max())
    # La 1 = 0 up to rounding on entries that grow like e^{U'h/2} toward the x-edge
    drift = float(np.max(np.abs(g.La @ np.ones(g.nx * g.ny)))) / float(abs(g.La).max())
    return skew < 1e-10 and drift < 64 * np.finfo(float).eps, f"skew={skew:.2e} La1/max|La|={drift:.2e}"


def check_leta_symmetry() -> Tuple[bool, str]:
    g = _grid(QUARTIC, 33, rx=3.5)
    M = sparse.diags(g.mass_diagonal) @ g.Leta
    asym = float(abs(M - M.T).max()) / float(abs(M).max())
    return asym < 1e-10, f"relative asymmetry {asym:.2e}"


def check_commutator() -> Tuple[bool, str]:
    def residual(n: int):
        g = _grid(QUADRATIC, n)
        f = np.sin(g.X) * np.cos(0.7 * g.Y)
        return commutator_residual(g, f)

    coarse, fine = residual(65), residual(129)
    r1, r2 = coarse.r1 / fine.r1, coarse.r2 / fine.r2
    return r1 > 3.0 and r2 > 3.0, f"refinement ratios {r1:.2f}, {r2:.2f}"


def check_lemma() -> Tuple[bool, str]:
    g = _grid(QUARTIC, 33, rx=3.5)
    cand = LyapunovCandidate(alpha=0.5, beta=0.5)
    res = lemma_ipp_check(g, 1.0 + 0.3 * np.sin(g.X) * g.Y, cand.log_w(g.U[:, None], g.Y))
    return res.ok, f"lhs={res.lhs:.4e} rhs={res.rhs:.4e}"


def check_quadratic_certificate() -> Tuple[bool, str]:
    cert = fit_candidate(QUADRATIC, LyapunovCandidate(alpha=0.5, beta=0.5), Region(rx=3.0, ry=3.0), 41)
    return cert.holds, f"lambda={cert.lambda_drift:.4g} b={cert.b_drift:.4g} margin={cert.margin:.3g}"


def check_quadratic_gap() -> Tuple[bool, str]:
    res = spectral_gap(_grid(QUADRATIC, 65))
    return abs(res.gap - 1.0) < 0.02, f"gap={res.gap:.6f} residual={res.residual:.1e}"


def check_stationary_flow() -> Tuple[bool, str]:
    g = _grid(QUADRATIC, 33)
    c = theorem1_constants(0.0, 1, 1.0, 1.0)
    report = run(g, np.ones(g.shape), c, T=0.2, output_every=2)
    verdict = verify_theorem1(report, c)
    worst = float(np.max(report.column("ent")))
    return verdict.holds and worst < 1e-12, f"max ent={worst:.2e}"


def check_ou_oracle() -> Tuple[bool, str]:
    g = _grid(QUADRATIC, 65)
    c = theorem1_constants(0.0, 1, 1.0, 1.0)
    mean, cov = (1.0, 0.0), ((0.5, 0.0), (0.0, 0.5))
    report = run(g, gaussian_ratio(g, mean, cov), c, T=0.5, output_every=100)
    got = report.rows[-1].ent
    want = ou_entropy(mean, cov, 0.5)
    rel = abs(got - want) / want
    return rel < 0.1, f"ent={got:.5f} oracle={want:.5f} rel={rel:.2e}"


CHECKS: Dict[str, Tuple[str, CheckFn]] = {
    "constants": ("lambda=(B+2)^2, kappa=1/(1300(eta+d)^4), eps=1/(36(eta+d)^2)", check_constants),
    "rate-integral": ("I(t) = int_0^t (1-e^-s)^2 ds", check_rate_integral),
    "multiplier": ("multiplier matrix is positive semi-definite", check_multiplier),
    "tensorized": ("M2(0) = 1 and C'(C1=2, M2=1) = 8", check_tensorized_constants),
    "weight-sandwich": ("phi1 phi2 <= H^-2eta <= min(phi1, phi2)", check_weight_sandwich),
    "transport-skew": ("L_a antisymmetric in L2(mu) with L_a 1 = 0", check_transport_antisymmetry),
    "leta-symmetric": ("L_eta symmetric in L2(mu)", check_leta_symmetry),
    "commutator": ("[L, d_y] = d_x + d_y and [L, d_x] = -U'' d_y", check_commutator),
    "lyapunov-lemma": ("int -(L_eta W / W) g^2 dmu <= E_eta(g)", check_lemma),
    "lyapunov-quadratic": ("quadratic potential admits a drift certificate", check_quadratic_certificate),
    "gap-quadratic": ("spectral gap of the Ornstein-Uhlenbeck generator is 1", check_quadratic_gap),
    "stationary": ("f = 1 is stationary and the envelope holds", check_stationary_flow),
    "ou-oracle": ("entropy matches the Gaussian closed form", check_ou_oracle),
}


def run_selftest(names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    names = list(CHECKS) if names is None else list(names)
    results = []
    for name in names:
        if name not in CHECKS:
            results.append(CheckResult(name=name, statement="-", ok=False, detail=f"unknown check '{name}'"))
            continue
        statement, fn = CHECKS[name]
        try:
            ok, detail = fn()
        except HypoflowError as e:
            ok, detail = False, f"{type(e).__name__}: {e}"
        logger.info("selftest %s: %s (%s)", name, "PASS" if ok else "FAIL", detail)
        results.append(CheckResult(name=name, statement=statement, ok=bool(ok), detail=detail))
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    width_n = max([len(r.name) for r in results] + [5])
    width_s = max([len(r.statement) for r in results] + [9])
    lines = [f"{'check':<{width_n}}  {'statement':<{width_s}}  status  detail"]
    for r in results:
        lines.append(f"{r.name:<{width_n}}  {r.statement:<{width_s}}  {'PASS' if r.ok else 'FAIL':<6}  {r.detail}")
    passed = sum(r.ok for r in results)
    lines.append(f"{passed}/{len(results)} passed")
    return "\n".join(lines)
