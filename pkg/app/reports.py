from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

from app.errors import ConfigError
from app.flow import DecayReport
from app.particles import SimResult

logger = logging.getLogger(__name__)

CONFIG_PREFIX = "# config: "

DECAY_COLUMNS = ["t", "ent", "var", "psi", "F", "G", "envelope", "mass", "fmin"]
MOMENT_COLUMNS = ["t", "mean_x", "mean_y", "var_x", "var_y", "cov_xy", "escapes"]


def _cell(v: Any) -> str:
    # repr round-trips floats exactly
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_json(path: Path, payload: Dict[str, Any], config: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"config": config, **payload}
    path.write_text(json.dumps(doc, indent=2, allow_nan=True) + "\n", encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]], config: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(CONFIG_PREFIX + json.dumps(config, separators=(",", ":")) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    logger.info("wrote %s", path)
    return path


def read_embedded_config(path: Path) -> Dict[str, Any]:
    """The resolved config stored in a JSON or CSV output."""
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text(encoding="utf-8"))
        if "config" not in doc:
            raise ConfigError(f"{path}: no embedded config")
        return doc["config"]
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline()
    if not first.startswith(CONFIG_PREFIX):
        raise ConfigError(f"{path}: no embedded config")
    return json.loads(first[len(CONFIG_PREFIX):])


def read_csv_rows(path: Path) -> List[Dict[str, str]]:
    with Path(path).open("r", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# ----------------------------
# Report shapes
# ----------------------------

def decay_rows(report: DecayReport) -> List[List[float]]:
    return [[getattr(r, c) for c in DECAY_COLUMNS] for r in report.rows]


def moment_rows(sim: SimResult) -> List[List[Any]]:
    return [[getattr(r, c) for c in MOMENT_COLUMNS] for r in sim.rows]


def summarize_dir(run_dir: Path) -> Dict[str, Any]:
    """Collect every JSON output in run_dir (without their configs) under its file stem."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"Missing run directory: {run_dir}")
    summary: Dict[str, Any] = {}
    config = None
    for path in sorted(run_dir.glob("*.json")):
        if path.name == "report.json":
            continue
        doc = json.loads(path.read_text(encoding="utf-8"))
        cfg = doc.pop("config", None)
        if config is None:
            config = cfg
        elif cfg is not None and cfg != config:
            logger.warning("%s was produced by a different config", path.name)
        summary[path.stem] = doc
    if not summary:
        raise ConfigError(f"No JSON outputs in {run_dir}")
    return {"config": config, "outputs": summary}
