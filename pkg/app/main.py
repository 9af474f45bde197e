from __future__ import annotations
from dotenv import load_dotenv
load_dotenv(dotenv_path=".env")


from fastapi import FastAPI

from app.lab_api import router as lab_router
from app.settings import configure_logging

# ----------------------------
# App
# ----------------------------

app = FastAPI(
    title="Hypoflow Lab Service",
    version="0.3.0",
    description="Constant bundles, Lyapunov certificates and growth checks for kinetic Langevin dynamics.",
)

app.include_router(lab_router)


@app.on_event("startup")
def on_startup() -> None:
    configure_logging()


@app.get("/health")
def health() -> dict:
    return {"ok": True}
