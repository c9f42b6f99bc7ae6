"""
Artifact persistence: sorted-key JSON with a metadata sidecar, CSV
tables and gnuplot scripts.

Artifact bodies are deterministic; wall-clock data lives only in the
``<name>.meta.json`` sidecar.
"""

import csv
import datetime
import io
import json
import logging
import math
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from tracking_funnels.errors import ArtifactError

logger = logging.getLogger(__name__)

FUNNEL_FILE = "funnel.json"
TEB_FILE = "teb.json"
SAFETY_FILE = "safety.json"
CERTIFICATES_FILE = "certificates.json"
ITERATIONS_FILE = "iterations.csv"
PLAN_FILE = "plan.csv"
TRACE_FILE = "trace.csv"
JUMPS_FILE = "jumps.csv"
AUDIT_FILE = "audit.json"


def to_plain(value: Any) -> Any:
    """numpy-free, JSON-safe copy; non-finite floats become ``None``."""
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_plain(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, Path):
        return str(value)
    return value


def dumps(data: Any) -> str:
    return json.dumps(to_plain(data), sort_keys=True, indent=2) + "\n"


def write_json(
    path: str | Path, data: Any, *, meta: dict[str, Any] | None = None
) -> Path:
    """Write ``data`` and its ``.meta.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(data))
    sidecar = path.with_suffix(".meta.json")
    body = {
        "artifact": path.name,
        "written_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    body.update(meta or {})
    sidecar.write_text(dumps(body))
    logger.debug("Wrote %s", path)
    return path


def read_json(path: str | Path) -> Any:
    """
    Read an artifact.

    Raises:
        ArtifactError: If the file is missing or not valid JSON
    """
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"Artifact not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ArtifactError(f"Artifact {path} is not valid JSON: {e}") from e


def _cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(
    path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    path.write_text(buffer.getvalue())
    logger.debug("Wrote %s", path)
    return path


def _gnuplot_header(title: str) -> list[str]:
    return [
        f"# {title}",
        "set datafile separator ','",
        "set key autotitle columnhead",
        "set grid",
    ]


def trace_plot_script(
    trace_csv: str,
    gamma: float,
    *,
    tracker_xy: tuple[str, str] | None = None,
    planner_xy: tuple[str, str] | None = None,
    obstacles: Sequence[tuple[Sequence[float], float]] = (),
) -> str:
    """Storage level against its certified bound, plus paths when planar."""
    lines = _gnuplot_header("closed-loop trace")
    lines += [
        "set xlabel 't [s]'",
        "set ylabel 'V'",
        f"plot '{trace_csv}' using 't':'V' with lines title 'V(t mod Ts, e)', \\",
        f"     {float(gamma)!r} with lines dashtype 2 title 'gamma'",
    ]
    if tracker_xy and planner_xy:
        lines += ["pause -1", "set size ratio -1", "set xlabel 'x'", "set ylabel 'y'"]
        for k, (center, radius) in enumerate(obstacles, start=1):
            lines.append(
                f"set object {k} circle at {center[0]!r},{center[1]!r} "
                f"size {float(radius)!r} fc rgb 'orange' fs transparent solid 0.4"
            )
        lines += [
            f"plot '{trace_csv}' using '{planner_xy[0]}':'{planner_xy[1]}' "
            "with lines title 'planner', \\",
            f"     '{trace_csv}' using '{tracker_xy[0]}':'{tracker_xy[1]}' "
            "with lines title 'tracker'",
        ]
    return "\n".join(lines) + "\n"


def iterations_plot_script(iterations_csv: str) -> str:
    lines = _gnuplot_header("alternation history")
    lines += [
        "set xlabel 'solve'",
        "set ylabel 'gamma'",
        f"plot '{iterations_csv}' using 0:'gamma' with linespoints title 'gamma'",
    ]
    return "\n".join(lines) + "\n"
