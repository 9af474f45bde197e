from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from itertools import product
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg, sparse
from scipy.sparse.linalg import LinearOperator, lobpcg, splu

from app.errors import ConfigError, ConvergenceError
from app.grid import Field as GridField
from app.grid import PhaseGrid
from app.potential import HamiltonianModel, PotentialSpec, eval_potential
from app.settings import worker_count

logger = logging.getLogger(__name__)

B_DRIFT_SLACK = 0.05
EDGE_SHRINK = 0.9
EDGE_TOLERANCE = 1e-9
EXTRAPOLATION = 2.0
GAP_RESIDUAL = 1e-6
LEMMA_TOLERANCE = 1e-6
# fitted drift rates below this are treated as no drift at all
MIN_LAMBDA_DRIFT = 1e-3


# ----------------------------
# Models
# ----------------------------

class LyapunovCandidate(BaseModel):
    """W = exp(αU + β|y|²/2), handled through log W only."""

    model_config = ConfigDict(frozen=True)

    alpha: float = Field(..., gt=0, lt=1)
    beta: float = Field(..., gt=0, lt=1)

    def log_w(self, U, y):
        return self.alpha * np.asarray(U) + 0.5 * self.beta * np.asarray(y) ** 2


class Region(BaseModel):
    model_config = ConfigDict(frozen=True)

    rx: float = Field(..., gt=0)
    ry: float = Field(..., gt=0)

    def scaled(self, factor: float) -> "Region":
        return Region(rx=self.rx * factor, ry=self.ry * factor)


class LyapunovCertificate(BaseModel):
    alpha: float
    beta: float
    lambda_drift: float
    b_drift: float
    margin: float
    holds: bool
    region: Region
    edge_trend_ok: bool
    argmin: Tuple[float, float]
    reason: Optional[str] = None


class SearchOutcome(BaseModel):
    feasible: bool
    best: Optional[LyapunovCertificate] = None
    closest: Optional[LyapunovCertificate] = None
    tried: int
    reason: Optional[str] = None


class Corollary3Result(BaseModel):
    kappa_found: float
    c_found: float
    holds: bool
    kappa_trend_ok: bool
    c_trend_ok: bool
    reason: Optional[str] = None


class LemmaCheck(NamedTuple):
    lhs: float
    rhs: float
    ok: bool


class GapResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    eta: float
    gap: float
    iterations: int
    residual: float
    eigenfield: Optional[np.ndarray] = Field(default=None, exclude=True)


class GrowthScan(BaseModel):
    radii: List[float]
    theta: List[float]
    C0: float
    c: float
    fit_ok: bool
    grad_min: List[float]


# ----------------------------
# Drift ratio
# ----------------------------

def lyapunov_ratio(model: HamiltonianModel, cand: LyapunovCandidate, x, y):
    """L_ηW/W = αH^{−2η}[U'' + (α − 2η/H − 1)U'²] + β(d − (1 − β)|y|²)."""
    U, dU, d2U = eval_potential(model.spec, x)
    y = np.asarray(y, dtype=float)
    H = U + 0.5 * y * y
    eta, a, b = model.eta, cand.alpha, cand.beta
    d = model.spec.dimension
    x_part = a * np.power(H, -2.0 * eta) * (d2U + (a - 2.0 * eta / H - 1.0) * dU * dU)
    return x_part + b * (d - (1.0 - b) * y * y)


def discrete_ratio(grid: PhaseGrid, log_w: GridField) -> GridField:
    """(L_η W)/W from the grid operator: Σ_n c_kn expm1(φ_n − φ_k)."""
    A = grid.Leta.tocoo()
    off = A.row != A.col
    rows, cols, vals = A.row[off], A.col[off], A.data[off]
    phi = np.asarray(log_w, dtype=float).ravel()
    contrib = vals * np.expm1(phi[cols] - phi[rows])
    return np.bincount(rows, weights=contrib, minlength=phi.size).reshape(grid.shape)


def marginal_lyapunov_ratio(spec: PotentialSpec, eta: float, gamma: float, x):
    """G₁^φ W/W for W = e^{γU}, with G₁^φ = Δ_x − (1 + 2η/U)∇U·∇."""
    U, dU, d2U = eval_potential(spec, x)
    return gamma * (d2U + (gamma - 1.0 - 2.0 * eta / U) * dU * dU)


def ou_lyapunov_ratio(y, d: int = 1):
    """GW/W = ¼(2d − |y|²) for W = e^{|y|²/4} under G = Δ_y − y·∇_y."""
    y = np.asarray(y, dtype=float)
    return 0.25 * (2.0 * d - y * y)


# ----------------------------
# Certificates
# ----------------------------

def _scan(region: Region, n_scan: int) -> Tuple[np.ndarray, np.ndarray]:
    xs = np.linspace(-region.rx, region.rx, n_scan)
    ys = np.linspace(-region.ry, region.ry, n_scan)
    return np.meshgrid(xs, ys, indexing="ij")


def _boundary(shape: Tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
    return mask


def _edge_trend_ok(model: HamiltonianModel, cand: LyapunovCandidate, lambda_drift: float, region: Region, n_scan: int) -> bool:
    """ratio + λH must not be larger on the box edge than on the edge of the shrunken box."""
    def edge_max(r: Region) -> float:
        X, Y = _scan(r, n_scan)
        s = lyapunov_ratio(model, cand, X, Y) + lambda_drift * (eval_potential(model.spec, X).U + 0.5 * Y * Y)
        return float(np.max(s[_boundary(s.shape)]))

    outer, inner = edge_max(region), edge_max(region.scaled(EDGE_SHRINK))
    return outer <= inner + EDGE_TOLERANCE * max(1.0, abs(inner))


def verify_certificate(
    model: HamiltonianModel,
    cand: LyapunovCandidate,
    lambda_drift: float,
    b_drift: float,
    region: Region,
    n_scan: int = 201,
) -> LyapunovCertificate:
    if not lambda_drift > 0:
        raise ConfigError(f"lambda_drift must be > 0, got {lambda_drift}")
    if n_scan < 3:
        raise ConfigError("n_scan must be >= 3")
    X, Y = _scan(region, n_scan)
    H = eval_potential(model.spec, X).U + 0.5 * Y * Y
    slack = (-lambda_drift * H + b_drift) - lyapunov_ratio(model, cand, X, Y)
    k = np.unravel_index(int(np.argmin(slack)), slack.shape)
    margin = float(slack[k])
    trend = _edge_trend_ok(model, cand, lambda_drift, region, n_scan)
    reason = None
    if margin < 0:
        reason = f"drift inequality fails by {-margin:.3g} at (x, y) = ({float(X[k]):.3g}, {float(Y[k]):.3g})"
    elif not trend:
        # a margin that only holds inside the box certifies nothing
        reason = "ratio + lambda*H still grows toward the box edge"
        logger.warning(
            "ratio + lambda*H still grows toward the edge for (alpha=%.3g, beta=%.3g); "
            "the certificate is inconclusive outside the scanned box",
            cand.alpha,
            cand.beta,
        )
    return LyapunovCertificate(
        alpha=cand.alpha,
        beta=cand.beta,
        lambda_drift=lambda_drift,
        b_drift=b_drift,
        margin=margin,
        holds=margin >= 0 and trend,
        region=region,
        edge_trend_ok=trend,
        argmin=(float(X[k]), float(Y[k])),
        reason=reason,
    )


def fit_candidate(
    model: HamiltonianModel,
    cand: LyapunovCandidate,
    region: Region,
    n_scan: int,
    min_lambda: float = MIN_LAMBDA_DRIFT,
) -> LyapunovCertificate:
    """Fit (λ, b) on region, then verify on the box enlarged by EXTRAPOLATION.

    λ is half the smallest −ratio/H on the box edge; b is max(ratio + λH, 0)
    over the box plus a relative slack. A fitted λ below min_lambda means
    −ratio/H does not stay away from zero on the edge, and the candidate is
    rejected even if the margin comes out positive.
    """
    if not min_lambda > 0:
        raise ConfigError(f"min_lambda must be > 0, got {min_lambda}")
    X, Y = _scan(region, n_scan)
    H = eval_potential(model.spec, X).U + 0.5 * Y * Y
    ratio = lyapunov_ratio(model, cand, X, Y)
    edge_slope = float(np.min((-ratio / H)[_boundary(H.shape)]))
    lam = max(0.5 * edge_slope, min_lambda)
    b = (1.0 + B_DRIFT_SLACK) * max(float(np.max(ratio + lam * H)), 0.0) + 1e-9
    wide_n = int(round(EXTRAPOLATION * (n_scan - 1))) + 1
    cert = verify_certificate(model, cand, lam, b, region.scaled(EXTRAPOLATION), wide_n)
    if 0.5 * edge_slope < min_lambda:
        reason = f"-ratio/H on the box edge drops to {edge_slope:.3g}; no drift rate above {min_lambda:g}"
        return cert.model_copy(update={"holds": False, "reason": reason})
    return cert


def search_candidate(
    model: HamiltonianModel,
    alphas: Sequence[float],
    betas: Sequence[float],
    region: Region,
    n_scan: int = 101,
    workers: Optional[int] = None,
    min_lambda: float = MIN_LAMBDA_DRIFT,
) -> SearchOutcome:
    """Best certificate over the (α, β) grid, ranked by λ_drift and then margin."""
    cands = [LyapunovCandidate(alpha=a, beta=b) for a, b in product(alphas, betas)]
    if not cands:
        raise ConfigError("empty (alpha, beta) grid")
    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        certs = list(pool.map(lambda c: fit_candidate(model, c, region, n_scan, min_lambda), cands))
    for cert in certs:
        logger.debug("candidate alpha=%.3g beta=%.3g lambda=%.4g margin=%.4g", cert.alpha, cert.beta, cert.lambda_drift, cert.margin)
    ok = [c for c in certs if c.holds]
    if ok:
        best = max(ok, key=lambda c: (c.lambda_drift, c.margin))
        logger.info("lyapunov search: %d/%d candidates hold; best alpha=%.3g beta=%.3g", len(ok), len(certs), best.alpha, best.beta)
        return SearchOutcome(feasible=True, best=best, tried=len(certs))
    closest = max(certs, key=lambda c: c.margin)
    logger.info("lyapunov search infeasible: best margin %.4g", closest.margin)
    return SearchOutcome(
        feasible=False,
        closest=closest,
        tried=len(certs),
        reason=f"no candidate certifies a drift on the enlarged box; closest: {closest.reason}",
    )


def default_outside_radius(spec: PotentialSpec) -> float:
    """Smallest x >= 1 with U'(x) >= 10 U'(1)."""
    target = 10.0 * abs(float(eval_potential(spec, 1.0).dU))
    xs = np.linspace(1.0, 50.0, 19601)
    hit = np.nonzero(np.abs(eval_potential(spec, xs).dU) >= target)[0]
    return float(xs[hit[0]]) if hit.size else float(xs[-1])


def corollary3_check(model: HamiltonianModel, eta: float, R: float, x_max: Optional[float] = None, n: int = 4001) -> Corollary3Result:
    """Scan |x| in [R, x_max] for U''/U'² < 1 and U'²/U^{2η+1} bounded below."""
    if not R > 0:
        raise ConfigError("R must be > 0")
    x_max = max(8.0 * R, R + 8.0) if x_max is None else float(x_max)
    right = np.linspace(R, x_max, n)
    xs = np.concatenate([-right[::-1], right])
    U, dU, d2U = eval_potential(model.spec, xs)
    grad2 = dU * dU
    if np.any(grad2 <= 1e-24):
        return Corollary3Result(
            kappa_found=float("inf"),
            c_found=0.0,
            holds=False,
            kappa_trend_ok=False,
            c_trend_ok=False,
            reason="grad U vanishes outside R (condition 1 fails)",
        )
    kappa = d2U / grad2
    growth = np.exp(np.log(grad2) - (2.0 * eta + 1.0) * np.log(U))
    kappa_found = float(np.max(kappa))
    c_found = float(np.min(growth))

    mid = n // 2
    # sides: index 0/-1 are ±x_max, n-1-mid / n+mid are ±x_mid
    edge_c = min(growth[0], growth[-1])
    mid_c = min(growth[n - 1 - mid], growth[n + mid])
    edge_k = max(kappa[0], kappa[-1])
    mid_k = max(kappa[n - 1 - mid], kappa[n + mid])
    c_trend = bool(edge_c >= 0.5 * mid_c)
    k_trend = bool(edge_k <= mid_k * (1.0 + 1e-9) + 1e-15)
    holds = kappa_found < 1.0 and c_found > 0 and c_trend and k_trend
    reason = None
    if not holds:
        reason = "kappa >= 1" if kappa_found >= 1.0 else "growth |U'|^2 >= c U^(2eta+1) degrades toward the edge"
    return Corollary3Result(
        kappa_found=kappa_found,
        c_found=c_found,
        holds=bool(holds),
        kappa_trend_ok=k_trend,
        c_trend_ok=c_trend,
        reason=reason,
    )


def lemma_ipp_check(grid: PhaseGrid, g: GridField, log_w: GridField) -> LemmaCheck:
    """∫ −(L_ηW/W) g² dμ <= E_η(g), both sides from the same face coefficients."""
    A = grid.Leta.tocoo()
    off = A.row != A.col
    rows, cols, vals = A.row[off], A.col[off], A.data[off]
    mass = grid.mass_diagonal
    gv = np.asarray(g, dtype=float).ravel()
    phi = np.asarray(log_w, dtype=float).ravel()
    weights = mass[rows] * vals
    lhs = -float(np.sum(weights * gv[rows] ** 2 * np.expm1(phi[cols] - phi[rows])))
    rhs = 0.5 * float(np.sum(weights * (gv[cols] - gv[rows]) ** 2))
    return LemmaCheck(lhs, rhs, lhs <= rhs + LEMMA_TOLERANCE * (1.0 + abs(rhs)))


# ----------------------------
# Spectral gaps
# ----------------------------

def spectral_gap(grid: PhaseGrid, eta: Optional[float] = None, tol: float = 1e-10, maxiter: int = 500) -> GapResult:
    """Smallest nonzero eigenvalue of −L_η in L²(μ) by LOBPCG on S v = λ B v."""
    if eta is not None:
        grid = grid.with_eta(eta)
    B_diag = grid.mass_diagonal
    scale = 1.0 / float(np.max(B_diag))
    S = (grid.stiffness * scale).tocsc()
    B = sparse.diags(B_diag * scale).tocsc()
    lu = splu((S + B).tocsc())
    n = B_diag.size
    M = LinearOperator((n, n), matvec=lu.solve, dtype=float)

    rng = np.random.default_rng(0)
    X0 = np.column_stack([grid.X.ravel(), grid.Y.ravel(), rng.standard_normal(n)])
    Y = np.ones((n, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        vals, vecs, history = lobpcg(
            S, X0, B=B, M=M, Y=Y, tol=tol, maxiter=maxiter, largest=False, retResidualNormsHistory=True
        )
    order = np.argsort(vals)
    lam = float(vals[order[0]])
    v = vecs[:, order[0]]
    Sv, Bv = S @ v, B @ v
    residual = float(np.linalg.norm(Sv - lam * Bv) / max(np.linalg.norm(Sv) + abs(lam) * np.linalg.norm(Bv), 1e-300))
    iterations = len(history)
    if not residual < GAP_RESIDUAL:
        raise ConvergenceError("LOBPCG did not converge for the spectral gap", residual, iterations)
    logger.info("spectral gap eta=%.4g: %.8f (%d iterations, residual %.2e)", grid.model.eta, lam, iterations, residual)
    return GapResult(eta=grid.model.eta, gap=lam, iterations=iterations, residual=residual, eigenfield=v.reshape(grid.shape))


def dense_gap(grid: PhaseGrid) -> float:
    """Same gap by a dense generalized eigensolve; for small grids."""
    S = grid.stiffness.toarray()
    B = np.diag(grid.mass_diagonal)
    vals = linalg.eigh(S, B, eigvals_only=True)
    return float(np.sort(vals)[1])


def marginal_gap(spec: PotentialSpec, eta: float, rx: float = 6.0, n: int = 401) -> float:
    """Gap of f ↦ e^{U}(e^{−U}U^{−2η}f')' on [−rx, rx]; C₁ = 1/gap."""
    x = np.linspace(-rx, rx, n)
    h = x[1] - x[0]
    U = eval_potential(spec, x).U
    Uf = eval_potential(spec, 0.5 * (x[1:] + x[:-1])).U
    shift = float(np.min(U))
    face = np.power(Uf, -2.0 * eta) * np.exp(-(Uf - shift)) / h
    S = np.zeros((n, n))
    idx = np.arange(n - 1)
    S[idx, idx] += face
    S[idx + 1, idx + 1] += face
    S[idx, idx + 1] -= face
    S[idx + 1, idx] -= face
    B = np.diag(np.maximum(np.exp(-(U - shift)), 1e-300) * h)
    vals = linalg.eigh(S, B, eigvals_only=True)
    return float(np.sort(vals)[1])


def theta_scan(model: HamiltonianModel, radii: Sequence[float], n_shell: int = 2001) -> GrowthScan:
    """θ(r) = max(1, max |U''|) over the energy shell {H = r}, with an exponential envelope fit."""
    radii = [float(r) for r in radii]
    if len(radii) < 2 or any(b <= a for a, b in zip(radii, radii[1:])):
        raise ConfigError("radii must be increasing with at least two entries")
    spec = model.spec
    if radii[0] <= spec.min_value:
        raise ConfigError(f"radius {radii[0]} does not exceed min H = {spec.min_value}")
    theta, grad_min = [], []
    for r in radii:
        reach = 1.0
        while float(eval_potential(spec, reach).U) <= r or float(eval_potential(spec, -reach).U) <= r:
            reach *= 2.0
        xs = np.linspace(-reach, reach, n_shell)
        U, dU, d2U = eval_potential(spec, xs)
        inside = U <= r
        if not np.any(inside):
            raise ConfigError(f"energy shell H = {r} is not resolved by the scan")
        theta.append(max(1.0, float(np.max(np.abs(d2U[inside])))))
        y2 = 2.0 * (r - U[inside])
        grad_min.append(float(np.min(np.sqrt(dU[inside] ** 2 + y2))))

    r = np.asarray(radii)
    log_t = np.log(np.asarray(theta))
    slope = float(np.polyfit(r, log_t, 1)[0])
    C0 = max(slope, 0.0)
    log_c = float(np.max(log_t - C0 * r))
    tail = float((log_t[-1] - log_t[-2]) / (r[-1] - r[-2]))
    fit_ok = bool(np.all(log_t <= log_c + C0 * r + 1e-12) and tail <= C0 + 1e-3 * max(1.0, C0))
    return GrowthScan(
        radii=radii,
        theta=[float(t) for t in theta],
        C0=C0,
        c=float(np.exp(log_c)),
        fit_ok=fit_ok,
        grad_min=grad_min,
    )
