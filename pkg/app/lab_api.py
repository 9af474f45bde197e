from __future__ import annotations

import math
from typing import Any, Dict, List, Optional, Tuple

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field

from app.constants import envelope_samples, theorem1_constants
from app.errors import ConfigError, DomainError, HypoflowError, NumericalError
from app.grid import GridConfig
from app.lyapunov import (
    MIN_LAMBDA_DRIFT,
    LyapunovCandidate,
    Region,
    corollary3_check,
    search_candidate,
    verify_certificate,
)
from app.potential import HamiltonianModel, PotentialSpec, box_tail_mass, hessian_weight_bound, recommended_eta

router = APIRouter()


# ----------------------------
# Request Models
# ----------------------------

class ConstantsBody(BaseModel):
    rho: float = Field(..., gt=0, description="Weighted log-Sobolev constant")
    hess_bound: Optional[float] = Field(None, ge=0, description="Omit to scan the weighted Hessian")
    hessian_radius: float = Field(20.0, gt=0)
    envelope_times: List[float] = [0.0, 1.0, 5.0, 10.0, 50.0]


class ConstantsRequest(BaseModel):
    potential: PotentialSpec
    eta: Optional[float] = Field(None, ge=0, description="Omit for the recommended eta")
    constants: ConstantsBody
    grid: Optional[GridConfig] = None


class VerifyRequest(BaseModel):
    potential: PotentialSpec
    eta: Optional[float] = Field(None, ge=0)
    alpha: float = Field(..., gt=0, lt=1)
    beta: float = Field(..., gt=0, lt=1)
    lambda_drift: float = Field(..., gt=0)
    b_drift: float = Field(..., ge=0)
    region: Region
    n_scan: int = Field(201, ge=3, le=2001)


class SearchRequest(BaseModel):
    potential: PotentialSpec
    eta: Optional[float] = Field(None, ge=0)
    alpha: Tuple[float, float, int] = (0.1, 0.9, 9)
    beta: Tuple[float, float, int] = (0.1, 0.9, 9)
    region: Region = Region(rx=3.0, ry=6.0)
    n_scan: int = Field(101, ge=3, le=1001)
    min_lambda: float = Field(MIN_LAMBDA_DRIFT, gt=0, description="Smallest drift rate a certificate may claim")


class Corollary3Request(BaseModel):
    potential: PotentialSpec
    eta: float = Field(..., ge=0)
    R: float = Field(..., gt=0)


# ----------------------------
# Helpers
# ----------------------------

def _model(spec: PotentialSpec, eta: Optional[float]) -> HamiltonianModel:
    return HamiltonianModel(spec=spec, eta=recommended_eta(spec) if eta is None else eta)


def _http_error(e: Exception) -> HTTPException:
    # ValueError covers pydantic validation of derived candidates
    if isinstance(e, (ConfigError, DomainError, ValueError)):
        return HTTPException(status_code=422, detail=str(e))
    if isinstance(e, NumericalError):
        return HTTPException(status_code=500, detail=str(e))
    return HTTPException(status_code=400, detail=str(e))


def _finite(obj: Any) -> Any:
    """JSON has no inf/nan; report them as null."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _linspace(r: Tuple[float, float, int]) -> List[float]:
    start, stop, count = r
    if count < 1:
        raise ConfigError("range count must be >= 1")
    if count == 1:
        return [start]
    return [start + (stop - start) * k / (count - 1) for k in range(count)]


# ----------------------------
# Endpoints
# ----------------------------

@router.post("/constants")
def constants(req: ConstantsRequest) -> Dict[str, Any]:
    try:
        model = _model(req.potential, req.eta)
        body = req.constants
        diverging = core_dominated = False
        if body.hess_bound is None:
            bound = hessian_weight_bound(model, (-body.hessian_radius, body.hessian_radius))
            hess, diverging, core_dominated = bound.value, bound.diverging, bound.core_dominated
        else:
            hess = body.hess_bound
        c = theorem1_constants(model.eta, req.potential.dimension, hess, body.rho)
    except (HypoflowError, ValueError) as e:
        raise _http_error(e) from None
    out = {
        **c.to_dict(),
        "rate": c.rate,
        "hess_diverging": diverging,
        "hess_core_dominated": core_dominated,
        "envelope": envelope_samples(c, 1.0, body.envelope_times),
    }
    if req.grid is not None:
        out["tail_mass"] = box_tail_mass(req.potential, req.grid.Rx, req.grid.Ry)
    return _finite(out)


@router.post("/lyapunov/verify")
def lyapunov_verify(req: VerifyRequest) -> Dict[str, Any]:
    try:
        model = _model(req.potential, req.eta)
        cand = LyapunovCandidate(alpha=req.alpha, beta=req.beta)
        cert = verify_certificate(model, cand, req.lambda_drift, req.b_drift, req.region, req.n_scan)
    except (HypoflowError, ValueError) as e:
        raise _http_error(e) from None
    return _finite(cert.model_dump())


@router.post("/lyapunov/search")
def lyapunov_search(req: SearchRequest) -> Dict[str, Any]:
    try:
        model = _model(req.potential, req.eta)
        outcome = search_candidate(
            model, _linspace(req.alpha), _linspace(req.beta), req.region, req.n_scan, min_lambda=req.min_lambda
        )
    except (HypoflowError, ValueError) as e:
        raise _http_error(e) from None
    return _finite(outcome.model_dump())


@router.post("/corollary3")
def corollary3(req: Corollary3Request) -> Dict[str, Any]:
    try:
        res = corollary3_check(_model(req.potential, req.eta), req.eta, req.R)
    except (HypoflowError, ValueError) as e:
        raise _http_error(e) from None
    return _finite(res.model_dump())
