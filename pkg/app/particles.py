from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import integrate

from app.errors import ConfigError
from app.flow import DecayReport
from app.grid import FieldMoments, PhaseGrid
from app.potential import HamiltonianModel, PotentialSpec, eval_potential
from app.settings import worker_count

logger = logging.getLogger(__name__)

BLOCK_SIZE = 8192
# stream key for initial draws from a grid density; block keys stay below it
SAMPLER_STREAM = 2**32 - 1
ESCAPE_FACTOR = 10.0
Z_THRESHOLD = 3.0


class GaussianLaw(BaseModel):
    model_config = ConfigDict(frozen=True)

    mean: Tuple[float, float] = (0.0, 0.0)
    cov: Tuple[Tuple[float, float], Tuple[float, float]] = ((1.0, 0.0), (0.0, 1.0))


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    model: HamiltonianModel
    n_particles: int = Field(..., ge=1)
    dt: float = Field(..., gt=0)
    T: float = Field(..., ge=0)
    seed: int = Field(0, ge=0, lt=2**64)
    # None: the initial sample is drawn elsewhere (a grid density) and passed to simulate
    initial: Optional[GaussianLaw] = GaussianLaw()
    box: Tuple[float, float] = (8.0, 8.0)
    noise_scale: float = Field(1.0, ge=0)


class MomentRow(BaseModel):
    t: float
    mean_x: float
    mean_y: float
    var_x: float
    var_y: float
    cov_xy: float
    se_mean_x: float
    se_mean_y: float
    se_var_x: float
    se_var_y: float
    se_cov_xy: float
    energy: float
    escapes: int


class SimResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    rows: List[MomentRow]
    final_x: Optional[np.ndarray] = Field(default=None, exclude=True)
    final_y: Optional[np.ndarray] = Field(default=None, exclude=True)


class MomentComparison(BaseModel):
    t: float
    z: Dict[str, float]


class ComparisonResult(BaseModel):
    rows: List[MomentComparison]
    max_abs_z: float
    passed: bool


# ----------------------------
# Sampling
# ----------------------------

def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, block])))


def _gaussian_sample(rng: np.random.Generator, law: GaussianLaw, n: int) -> Tuple[np.ndarray, np.ndarray]:
    chol = np.linalg.cholesky(np.asarray(law.cov, dtype=float))
    z = rng.standard_normal((n, 2)) @ chol.T + np.asarray(law.mean)
    return z[:, 0].copy(), z[:, 1].copy()


def sample_grid_density(grid: PhaseGrid, f: np.ndarray, n: int, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Draw n points from the density f·μ, uniform inside the chosen cell."""
    p = np.maximum(np.asarray(f, dtype=float) * grid.mu, 0.0).ravel()
    p = p / p.sum()
    rng = _block_rng(seed, SAMPLER_STREAM)
    k = rng.choice(p.size, size=n, p=p)
    i, j = np.unravel_index(k, grid.shape)
    x = grid.x[i] + (rng.random(n) - 0.5) * grid.hx
    y = grid.y[j] + (rng.random(n) - 0.5) * grid.hy
    return x, y


# ----------------------------
# Simulation
# ----------------------------

def _record_steps(cfg: SimConfig, record_times: Sequence[float]) -> List[int]:
    steps = []
    for t in record_times:
        if t < 0 or t > cfg.T + 1e-12:
            raise ConfigError(f"record time {t} outside [0, {cfg.T}]")
        k = int(round(t / cfg.dt))
        if abs(k * cfg.dt - t) > 1e-9 * max(1.0, t):
            raise ConfigError(f"record time {t} is not a multiple of dt={cfg.dt}")
        steps.append(k)
    return sorted(set(steps))


def _run_block(
    cfg: SimConfig,
    block: int,
    size: int,
    record_steps: List[int],
    start: Optional[Tuple[np.ndarray, np.ndarray]],
):
    rng = _block_rng(cfg.seed, block)
    if start is None:
        x, y = _gaussian_sample(rng, cfg.initial, size)
    else:
        x, y = start[0].copy(), start[1].copy()
    spec = cfg.model.spec
    dt = cfg.dt
    amp = cfg.noise_scale * np.sqrt(2.0 * dt)
    bx, by = ESCAPE_FACTOR * cfg.box[0], ESCAPE_FACTOR * cfg.box[1]
    escaped = np.zeros(size, dtype=bool)
    snapshots = {}
    wanted = set(record_steps)
    last = record_steps[-1] if record_steps else 0
    n_steps = max(last, int(round(cfg.T / dt)))
    for k in range(n_steps + 1):
        if k in wanted:
            snapshots[k] = (x.copy(), y.copy(), int(np.sum(escaped)))
        if k == n_steps:
            break
        with np.errstate(over="ignore", invalid="ignore"):
            force = eval_potential(spec, np.clip(x, -bx, bx)).dU
        noise = rng.standard_normal(size)
        x, y = x + y * dt, y + (-y - force) * dt + amp * noise
        escaped |= (np.abs(x) > bx) | (np.abs(y) > by)
    return snapshots, (x, y)


def _moments(t: float, spec: PotentialSpec, x: np.ndarray, y: np.ndarray, escapes: int) -> MomentRow:
    n = x.size
    mx, my = float(np.mean(x)), float(np.mean(y))
    dx, dy = x - mx, y - my
    vx, vy = float(np.mean(dx * dx)), float(np.mean(dy * dy))
    cxy = float(np.mean(dx * dy))
    energy = float(np.mean(eval_potential(spec, x).U + 0.5 * y * y))
    return MomentRow(
        t=t,
        mean_x=mx,
        mean_y=my,
        var_x=vx,
        var_y=vy,
        cov_xy=cxy,
        se_mean_x=float(np.sqrt(vx / n)),
        se_mean_y=float(np.sqrt(vy / n)),
        se_var_x=float(np.sqrt(max(np.mean(dx**4) - vx * vx, 0.0) / n)),
        se_var_y=float(np.sqrt(max(np.mean(dy**4) - vy * vy, 0.0) / n)),
        se_cov_xy=float(np.sqrt(max(np.mean(dx * dx * dy * dy) - cxy * cxy, 0.0) / n)),
        energy=energy,
        escapes=escapes,
    )


def simulate(
    cfg: SimConfig,
    record_times: Sequence[float],
    initial_sample: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    workers: Optional[int] = None,
) -> SimResult:
    """Euler–Maruyama for dx = y dt, dy = −(y + U'(x)) dt + √2 dW.

    Particles are split into fixed blocks, each with its own Philox stream
    keyed by (seed, block), so results do not depend on the worker count.
    """
    steps = _record_steps(cfg, record_times)
    n = cfg.n_particles
    if initial_sample is not None and initial_sample[0].size != n:
        raise ConfigError("initial sample size does not match n_particles")
    if initial_sample is None and cfg.initial is None:
        raise ConfigError("no initial law: pass an initial sample drawn from the grid density")
    bounds = [(b, s, min(s + BLOCK_SIZE, n)) for b, s in enumerate(range(0, n, BLOCK_SIZE))]

    def work(item):
        b, lo, hi = item
        start = None if initial_sample is None else (initial_sample[0][lo:hi], initial_sample[1][lo:hi])
        return _run_block(cfg, b, hi - lo, steps, start)

    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        results = list(pool.map(work, bounds))

    rows = []
    for k in steps:
        x = np.concatenate([snap[k][0] for snap, _ in results])
        y = np.concatenate([snap[k][1] for snap, _ in results])
        escapes = sum(snap[k][2] for snap, _ in results)
        rows.append(_moments(k * cfg.dt, cfg.model.spec, x, y, escapes))
    final_x = np.concatenate([fin[0] for _, fin in results])
    final_y = np.concatenate([fin[1] for _, fin in results])
    if rows and rows[-1].escapes:
        logger.warning("%d particle(s) left the %gx box", rows[-1].escapes, ESCAPE_FACTOR)
    logger.info("simulated %d particles to T=%g with dt=%g", n, cfg.T, cfg.dt)
    return SimResult(rows=rows, final_x=final_x, final_y=final_y)


# ----------------------------
# Reference moments and comparison
# ----------------------------

def gibbs_moments(spec: PotentialSpec) -> FieldMoments:
    """Moments of μ: x-marginal ∝ e^{−U} by quadrature, y-marginal standard normal."""
    def weight(x: float) -> float:
        with np.errstate(over="ignore"):
            return float(np.exp(-(eval_potential(spec, x).U - spec.min_value)))

    z, _ = integrate.quad(weight, -np.inf, np.inf, limit=200)
    m1, _ = integrate.quad(lambda x: x * weight(x), -np.inf, np.inf, limit=200)
    mean_x = m1 / z
    m2, _ = integrate.quad(lambda x: (x - mean_x) ** 2 * weight(x), -np.inf, np.inf, limit=200)
    return FieldMoments(mean_x, 0.0, m2 / z, 1.0, 0.0)


def compare_to_flow(
    sim: SimResult,
    report: Optional[DecayReport],
    grid_moments: Sequence[Tuple[float, FieldMoments]],
    threshold: float = Z_THRESHOLD,
) -> ComparisonResult:
    """Per-time z-scores of simulated against grid-flow moments; pass iff all |z| <= threshold."""
    reference = {round(t, 9): m for t, m in grid_moments}
    if report is not None:
        flow_times = {round(t, 9) for t in report.times}
        missing = [t for t in reference if t not in flow_times]
        if missing:
            raise ConfigError(f"grid moments at t={missing} have no matching flow row")
    rows = []
    worst = 0.0
    for row in sim.rows:
        ref = reference.get(round(row.t, 9))
        if ref is None:
            continue
        z = {}
        for name, se in (
            ("mean_x", row.se_mean_x),
            ("mean_y", row.se_mean_y),
            ("var_x", row.se_var_x),
            ("var_y", row.se_var_y),
            ("cov_xy", row.se_cov_xy),
        ):
            diff = getattr(row, name) - getattr(ref, name)
            z[name] = 0.0 if diff == 0 else diff / max(se, 1e-300)
        worst = max(worst, max(abs(v) for v in z.values()))
        rows.append(MomentComparison(t=row.t, z=z))
    if not rows:
        raise ConfigError("no simulated record time matches the grid moments")
    return ComparisonResult(rows=rows, max_abs_z=worst, passed=worst <= threshold)
