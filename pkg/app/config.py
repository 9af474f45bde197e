from __future__ import annotations

import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.constants import Theorem1Constants, log_sobolev_from_gap, theorem1_constants
from app.errors import ConfigError
from app.flow import TransportKind, gaussian_ratio, indicator, mixture, stability_limit
from app.grid import Field as GridField
from app.grid import GridConfig, PhaseGrid, PsiKind, build_grid
from app.lyapunov import MIN_LAMBDA_DRIFT, Region, default_outside_radius, spectral_gap
from app.particles import GaussianLaw, SimConfig, sample_grid_density
from app.potential import (
    SMOOTH_ABS_EPS,
    HamiltonianModel,
    PotentialFamily,
    PotentialSpec,
    hessian_weight_bound,
    recommended_eta,
)

logger = logging.getLogger(__name__)

FIXTURES_DIR = Path(__file__).resolve().parent / "fixtures"

Auto = Literal["auto"]


class _Table(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ----------------------------
# Tables
# ----------------------------

class PotentialTable(_Table):
    family: PotentialFamily = "quadratic"
    l: int = 4
    a: float = 1.0
    b: float = 0.5
    coefficients: Optional[Tuple[float, ...]] = None
    offset: Optional[float] = None
    smoothing: float = Field(SMOOTH_ABS_EPS, gt=0)
    dimension: int = 1
    eta: Union[float, Auto] = "auto"

    def to_spec(self) -> PotentialSpec:
        return PotentialSpec(**self.model_dump(exclude={"eta"}))


class InitialTable(_Table):
    kind: Literal["gaussian", "mixture", "indicator"] = "gaussian"
    mean: Tuple[float, float] = (0.0, 0.0)
    cov: Tuple[Tuple[float, float], Tuple[float, float]] = ((0.25, 0.0), (0.0, 0.25))
    components: List[Tuple[float, Tuple[float, float], Tuple[Tuple[float, float], Tuple[float, float]]]] = []
    box: Tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)
    floor: float = Field(0.05, gt=0)


class FlowTable(_Table):
    T: float = Field(5.0, ge=0)
    dt: Union[float, Auto] = "auto"
    output_every: int = Field(10, ge=1)
    transport: TransportKind = "upwind2"
    psi: PsiKind = "sqrt-log"
    record_times: List[float] = []
    initial: InitialTable = InitialTable()


class ConstantsTable(_Table):
    rho: Union[float, Literal["gap-estimate"]] = 2.0
    # "gap-estimate" marks rho as a 2/gap proxy; kept when the config is echoed
    rho_source: Literal["config", "gap-estimate"] = "config"
    hess_bound: Union[float, Auto] = "auto"
    hessian_radius: float = Field(20.0, gt=0)
    n_scan: int = Field(801, ge=2)
    envelope_times: List[float] = [0.0, 1.0, 5.0, 10.0, 50.0]


class LyapunovTable(_Table):
    # (start, stop, count) ranges for the candidate grid
    alpha: Tuple[float, float, int] = (0.1, 0.9, 9)
    beta: Tuple[float, float, int] = (0.1, 0.9, 9)
    R: Union[float, Auto] = "auto"
    radii: List[float] = [2.0, 4.0, 8.0, 16.0, 32.0]
    region: Tuple[float, float] = (3.0, 6.0)
    n_scan: int = Field(101, ge=3)
    min_lambda: float = Field(MIN_LAMBDA_DRIFT, gt=0)

    def alphas(self) -> np.ndarray:
        return np.linspace(*self.alpha[:2], self.alpha[2])

    def betas(self) -> np.ndarray:
        return np.linspace(*self.beta[:2], self.beta[2])


class ParticlesTable(_Table):
    n: int = Field(100_000, ge=1)
    dt: float = Field(0.002, gt=0)
    T: float = Field(2.0, ge=0)
    seed: int = Field(12345, ge=0)
    record_times: List[float] = [0.0, 0.5, 1.0, 2.0]


class RunConfig(_Table):
    potential: PotentialTable
    grid: GridConfig = GridConfig()
    flow: FlowTable = FlowTable()
    constants: ConstantsTable = ConstantsTable()
    lyapunov: LyapunovTable = LyapunovTable()
    particles: ParticlesTable = ParticlesTable()


@dataclass(frozen=True)
class ResolvedRun:
    """Config with every "auto" value replaced, plus the objects built from it."""

    config: RunConfig
    model: HamiltonianModel
    constants: Theorem1Constants
    rho_source: str
    hess_diverging: bool
    grid: Optional[PhaseGrid] = None
    hess_core_dominated: bool = False

    def echo(self) -> Dict[str, Any]:
        return self.config.model_dump(mode="json")


# ----------------------------
# Loading and resolution
# ----------------------------

def _format_validation(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        where = ".".join(str(p) for p in e["loc"])
        if e["type"] == "extra_forbidden":
            parts.append(f"unknown key '{where}'")
        else:
            parts.append(f"{where}: {e['msg']}")
    return "; ".join(parts)


def parse_run_config(data: Dict[str, Any], source: str = "<config>") -> RunConfig:
    try:
        cfg = RunConfig.model_validate(data)
        cfg.potential.to_spec()
    except ValidationError as e:
        raise ConfigError(f"{source}: {_format_validation(e)}") from None
    return cfg


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """TOML run config, or a JSON output whose embedded "config" is reused."""
    path = Path(path)
    if not path.exists():
        fixture = FIXTURES_DIR / path.name
        if not fixture.exists():
            raise ConfigError(f"Missing config: {path}")
        path = fixture
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(data.get("config"), dict):
            raise ConfigError(f"{path}: no embedded config")
        return parse_run_config(data["config"], str(path))
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return parse_run_config(data, str(path))


def resolve_config(cfg: RunConfig, build: bool = True) -> ResolvedRun:
    """Replace every "auto"/"gap-estimate" value by a number and echo it back."""
    spec = cfg.potential.to_spec()
    eta = recommended_eta(spec) if cfg.potential.eta == "auto" else float(cfg.potential.eta)
    model = HamiltonianModel(spec=spec, eta=eta)

    # the scan runs either way so the divergence flag survives an echoed config
    r = cfg.constants.hessian_radius
    bound = hessian_weight_bound(model, (-r, r), cfg.constants.n_scan)
    hess_diverging = bound.diverging
    hess = bound.value if cfg.constants.hess_bound == "auto" else float(cfg.constants.hess_bound)

    grid = build_grid(model, cfg.grid) if build or cfg.constants.rho == "gap-estimate" else None
    # without a grid an "auto" step stays unresolved
    dt = cfg.flow.dt
    if dt == "auto" and grid is not None:
        dt = stability_limit(grid)

    rho = cfg.constants.rho
    rho_source = cfg.constants.rho_source
    if rho == "gap-estimate":
        rho = log_sobolev_from_gap(spectral_gap(grid).gap)
        rho_source = "gap-estimate"
        logger.warning("rho estimated from the spectral gap: %.6g; envelope checks are diagnostics only", rho)

    R = cfg.lyapunov.R
    if R == "auto":
        R = default_outside_radius(spec)

    resolved = cfg.model_copy(
        update={
            "potential": cfg.potential.model_copy(update={"eta": eta}),
            "flow": cfg.flow.model_copy(update={"dt": dt if dt == "auto" else float(dt)}),
            "constants": cfg.constants.model_copy(
                update={"rho": float(rho), "rho_source": rho_source, "hess_bound": float(hess)}
            ),
            "lyapunov": cfg.lyapunov.model_copy(update={"R": float(R)}),
        }
    )
    constants = theorem1_constants(eta, spec.dimension, hess, float(rho))
    return ResolvedRun(
        config=resolved,
        model=model,
        constants=constants,
        rho_source=rho_source,
        hess_diverging=hess_diverging,
        grid=grid,
        hess_core_dominated=bound.core_dominated,
    )


# ----------------------------
# Derived objects
# ----------------------------

def initial_field(grid: PhaseGrid, table: InitialTable) -> GridField:
    if table.kind == "gaussian":
        return gaussian_ratio(grid, table.mean, table.cov)
    if table.kind == "mixture":
        if not table.components:
            raise ConfigError("flow.initial.components is empty for a mixture")
        return mixture(grid, table.components)
    return indicator(grid, table.box, table.floor)


def lyapunov_region(table: LyapunovTable) -> Region:
    return Region(rx=table.region[0], ry=table.region[1])


def sim_config(run: ResolvedRun) -> SimConfig:
    """Particle settings; a non-Gaussian initial law leaves the start to particle_start."""
    p = run.config.particles
    init = run.config.flow.initial
    return SimConfig(
        model=run.model,
        n_particles=p.n,
        dt=p.dt,
        T=p.T,
        seed=p.seed,
        initial=GaussianLaw(mean=init.mean, cov=init.cov) if init.kind == "gaussian" else None,
        box=(run.config.grid.Rx, run.config.grid.Ry),
    )


def particle_start(run: ResolvedRun) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Initial particles drawn from f₀·μ on the grid, or None for a Gaussian start."""
    init = run.config.flow.initial
    if init.kind == "gaussian":
        return None
    if run.grid is None:
        raise ConfigError(f"particles from a '{init.kind}' initial law need the grid")
    p = run.config.particles
    return sample_grid_density(run.grid, initial_field(run.grid, init), p.n, p.seed)
