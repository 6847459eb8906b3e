"""Comparison tables over finished run directories."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml

from .errors import ContainerIOError, FormatError, IncomparableRunsError
from .manifest import RunManifest, load_manifest
from .metrics import EvalReport, relative_improvement

logger = logging.getLogger(__name__)

SUMMARY_FILENAME = "summary.yaml"
EVAL_FILENAME = "eval.yaml"


@dataclass
class RunRecord:
    """Metrics of one run directory.

    ``baseline`` is absent for plain evaluation runs.
    """

    name: str
    path: Path
    manifest: RunManifest
    dataset_sha256: str
    mode: str
    adapted: EvalReport
    baseline: Optional[EvalReport] = None


def _read_yaml(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ContainerIOError(f"cannot read {path}: {e}") from e
    if not isinstance(data, dict):
        raise FormatError(f"{path} is not a mapping")
    return data


def load_run(run_dir: Path) -> RunRecord:
    """Load and verify a run directory written by ``adapt`` or ``eval``."""
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    if (run_dir / SUMMARY_FILENAME).exists():
        data = _read_yaml(run_dir / SUMMARY_FILENAME)
        return RunRecord(
            name=run_dir.name,
            path=run_dir,
            manifest=manifest,
            dataset_sha256=data["dataset_sha256"],
            mode=data.get("mode", "full"),
            adapted=EvalReport.from_dict(data["adapted"]),
            baseline=EvalReport.from_dict(data["baseline"]),
        )
    if (run_dir / EVAL_FILENAME).exists():
        data = _read_yaml(run_dir / EVAL_FILENAME)
        return RunRecord(
            name=run_dir.name,
            path=run_dir,
            manifest=manifest,
            dataset_sha256=data["dataset_sha256"],
            mode="eval",
            adapted=EvalReport.from_dict(data["report"]),
        )
    raise FormatError(f"{run_dir} holds neither {SUMMARY_FILENAME} nor {EVAL_FILENAME}")


def comparison_rows(runs: Sequence[RunRecord]) -> List[Dict[str, Any]]:
    """Baseline vs adapted Mono-M and Dual-M per run, with percent gains.

    Raises:
        IncomparableRunsError: if the runs were evaluated on different datasets.
    """
    datasets = {r.dataset_sha256 for r in runs}
    if len(datasets) > 1:
        names = ", ".join(f"{r.name} ({r.dataset_sha256[:12]})" for r in runs)
        raise IncomparableRunsError(f"runs use different datasets: {names}")
    rows = []
    for run in runs:
        row: Dict[str, Any] = {
            "run": run.name,
            "mode": run.mode,
            "count": run.adapted.count,
            "mono_m": run.adapted.mono_m,
            "dual_m": run.adapted.dual_m,
        }
        if run.baseline is not None:
            row.update(
                baseline_mono_m=run.baseline.mono_m,
                baseline_dual_m=run.baseline.dual_m,
                mono_m_gain_pct=relative_improvement(run.baseline.mono_m, run.adapted.mono_m),
                dual_m_gain_pct=relative_improvement(run.baseline.dual_m, run.adapted.dual_m),
            )
        rows.append(row)
    return rows


def _mm(value: Optional[float]) -> str:
    return "-" if value is None or math.isnan(value) else f"{value:.2f}"


def _gain(value: Optional[float]) -> str:
    return "" if value is None or math.isnan(value) else f" ({value:+.1f}%)"


def render_markdown(rows: Sequence[Dict[str, Any]]) -> str:
    """Markdown table; gains are shown next to the adapted value."""
    lines = [
        "| Run | Mode | Mono-M base | Mono-M | Dual-M base | Dual-M |",
        "|---|---|---|---|---|---|",
    ]
    for row in rows:
        lines.append(
            "| {run} | {mode} | {mb} | {m}{mg} | {db} | {d}{dg} |".format(
                run=row["run"],
                mode=row["mode"],
                mb=_mm(row.get("baseline_mono_m")),
                m=_mm(row["mono_m"]),
                mg=_gain(row.get("mono_m_gain_pct")),
                db=_mm(row.get("baseline_dual_m")),
                d=_mm(row["dual_m"]),
                dg=_gain(row.get("dual_m_gain_pct")),
            )
        )
    return "\n".join(lines) + "\n"
