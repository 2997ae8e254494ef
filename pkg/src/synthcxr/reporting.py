"""Run directories, run records, CAM overlays and the consolidated summary table."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from synthcxr import __version__
from synthcxr.config import RunConfig
from synthcxr.imaging import to_gray, write_png

logger = logging.getLogger(__name__)


def make_run_dir(output_dir: str | Path, config: RunConfig, command: str, run_id: Optional[str] = None) -> Path:
    """``{output_dir}/{timestamp}-{config hash}-{command}``, unless ``run_id`` is given."""
    output_dir = Path(output_dir)
    if run_id is None:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
        run_id = f"{stamp}-{config.digest()}-{command}"
    run_dir = output_dir / run_id
    suffix = 1
    while run_dir.exists():
        run_dir = output_dir / f"{run_id}.{suffix}"
        suffix += 1
    run_dir.mkdir(parents=True)
    return run_dir


@dataclass
class RunRecord:
    command: str
    run_dir: Path
    config: dict
    code_version: str = __version__
    timings: Dict[str, float] = field(default_factory=dict)
    artifacts: List[str] = field(default_factory=list)
    metrics: List[dict] = field(default_factory=list)
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def stage(self, name: str):
        record = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                record.timings[name] = time.perf_counter() - self.t0

        return _Timer()

    def artifact(self, path: Path) -> Path:
        self.artifacts.append(str(Path(path)))
        return path

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "run_dir": str(self.run_dir),
            "code_version": self.code_version,
            "started_at": self.started_at,
            "config": self.config,
            "timings_s": self.timings,
            "artifacts": self.artifacts,
            "metrics": self.metrics,
        }

    def write(self) -> Path:
        path = self.run_dir / "run_record.json"
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        # one line per invocation, never rewritten
        with (self.run_dir.parent / "runs.jsonl").open("a") as fh:
            fh.write(json.dumps({"run_dir": str(self.run_dir), "command": self.command,
                                 "started_at": self.started_at}) + "\n")
        return path


def write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


OVERLAY_ALPHA = 0.4


def render_overlay(image: np.ndarray, cam: np.ndarray, alpha: float = OVERLAY_ALPHA,
                   cmap: str = "jet") -> np.ndarray:
    """CAM through a fixed colormap, alpha-blended over the grayscale image; uint8 RGB."""
    from matplotlib import colormaps

    gray = to_gray(image).astype(np.float64) / 255.0
    heat = colormaps[cmap](np.clip(cam, 0, 1))[..., :3]
    blend = (1 - alpha) * np.repeat(gray[..., None], 3, axis=2) + alpha * heat
    return np.clip(np.rint(blend * 255), 0, 255).astype(np.uint8)


def save_cam(out_dir: Path, stem: str, image: np.ndarray, cam: np.ndarray) -> tuple[Path, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    npy = out_dir / f"{stem}.npy"
    np.save(npy, cam)
    png = write_png(render_overlay(image, cam), out_dir / f"{stem}_overlay.png")
    return npy, png


REPORT_FILES = ("metrics.json", "test_metrics.json")


def _fmt(point: float, lo: float, hi: float) -> str:
    return f"{point:.3f} [{lo:.3f}, {hi:.3f}]"


def consolidate(directory: str | Path) -> dict:
    """Collect every metric and cluster report below ``directory`` into one table.

    Rows are keyed by (dataset, model_tag); malformed files are skipped with a warning.
    """
    directory = Path(directory)
    rows: Dict[tuple, dict] = {}
    clusters: List[dict] = []
    skipped: List[str] = []
    for path in sorted(directory.rglob("*.json")):
        if path.name not in REPORT_FILES + ("clusters.json",):
            continue
        try:
            payload = json.loads(path.read_text())
            if path.name == "clusters.json":
                for rep in payload["reports"]:
                    clusters.append({"dataset": payload["dataset"], **{k: rep[k] for k in ("model_tag", "accuracy", "ari")}})
                continue
            for rep in payload["reports"]:
                key = (rep["dataset"], rep["model_tag"])
                row = rows.setdefault(key, {"dataset": key[0], "model_tag": key[1]})
                row[rep["metric"]] = {k: rep[k] for k in ("point", "ci_low", "ci_high", "n_boot", "alpha", "seed")}
                if "prevalence" in payload:
                    row["prevalence"] = payload["prevalence"]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            logger.warning("skipping malformed report %s: %s", path, exc)
            skipped.append(str(path))
    return {"rows": [rows[k] for k in sorted(rows)], "clusters": clusters, "skipped": skipped}


def summary_markdown(summary: dict) -> str:
    lines = ["| dataset | model | AUROC [95% CI] | AUPR [95% CI] | prevalence |", "|---|---|---|---|---|"]
    for row in summary["rows"]:
        cells = []
        for metric in ("auroc", "aupr"):
            m = row.get(metric)
            cells.append(_fmt(m["point"], m["ci_low"], m["ci_high"]) if m else "-")
        prev = row.get("prevalence")
        lines.append(f"| {row['dataset']} | {row['model_tag']} | {cells[0]} | {cells[1]} | "
                     f"{'-' if prev is None else f'{prev:.4f}'} |")
    if summary["clusters"]:
        lines += ["", "| dataset | model | k-means Acc | ARI |", "|---|---|---|---|"]
        for c in summary["clusters"]:
            lines.append(f"| {c['dataset']} | {c['model_tag']} | {c['accuracy']:.3f} | {c['ari']:.3f} |")
    return "\n".join(lines) + "\n"
