"""
CSV and YAML exports of run metrics and evaluation reports.
"""

import logging
import subprocess
from pathlib import Path
from typing import Sequence, Union

import pandas as pd
import yaml

from . import __version__
from .ensemble import UncertaintyCurve
from .inference import SweepReport, anytime_frame
from .records import RunMetrics, RunSummary

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _write_csv(frame: pd.DataFrame, path: PathLike, what: str) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {what} ({len(frame)} rows) to {path}")
    return path


def write_run_metrics(metrics: RunMetrics, path: PathLike) -> Path:
    return _write_csv(metrics.to_frame(), path, "run metrics")


def write_anytime_curve(curve: Sequence[float], path: PathLike) -> Path:
    return _write_csv(anytime_frame(curve), path, "anytime accuracy curve")


def write_sweep(report: SweepReport, path: PathLike) -> Path:
    return _write_csv(report.to_frame(), path, "threshold sweep")


def write_uncertainty(curve: UncertaintyCurve, path: PathLike) -> Path:
    return _write_csv(curve.to_frame(), path, "uncertainty curve")


def write_frame(frame: pd.DataFrame, path: PathLike, what: str = "table") -> Path:
    return _write_csv(frame, path, what)


def version_string() -> str:
    """``git describe`` of the working tree, or the package version outside a checkout."""
    try:
        result = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], capture_output=True,
                                text=True, timeout=5, cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return __version__
    described = result.stdout.strip()
    return described if result.returncode == 0 and described else __version__


def write_run_summary(summary: RunSummary, path: PathLike) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        yaml.safe_dump(summary.model_dump(mode="json"), f, sort_keys=False)
    logger.info(f"Wrote run summary to {path}")
    return path
