#!/usr/bin/env python3
"""
Evaluation Reporting - Error maps, protocol tables and cross-stage summaries
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from PIL import Image

from .exceptions import AggregationError, ShapeError

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("psnr", "ssim", "macro_f1")
REPORT_COLUMNS = (
    "kind", "sr_family", "loss", "classifier", "stage",
    "psnr", "ssim", "macro_f1", "error_score",
    "status", "error", "checkpoint_digest",
)
STAGE_ORDER = ("SR-I", "SR-PT", "SR-FT")
BASELINE_STAGES = ("LR", "HR", "SRHR")

SR_I_DEVIATION = (
    "SR-I rows use freshly initialized lite SR weights (or a user-supplied "
    "checkpoint), not ImageNet-pretrained full-size networks."
)
SRHR_NOTE = "SRHR applies the untrained SR-I model to the LR member of each pair."


def _as_grid(image: Union[torch.Tensor, np.ndarray]) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    grid = np.asarray(image, dtype=np.float64)
    while grid.ndim > 2 and grid.shape[0] == 1:
        grid = grid[0]
    if grid.ndim != 2:
        raise ShapeError(f"Error maps take single images, got shape {np.asarray(image).shape}")
    return grid


@dataclass
class ErrorMap:
    """Absolute per-pixel difference and its mean"""
    diff: np.ndarray
    score: float

    def render(self) -> np.ndarray:
        """8-bit visualization, max difference -> 255"""
        peak = float(self.diff.max())
        if peak <= 0.0:
            return np.zeros(self.diff.shape, dtype=np.uint8)
        return np.round(self.diff / peak * 255.0).astype(np.uint8)

    def save(self, stem: Union[str, Path]) -> Tuple[Path, Path]:
        """Write <stem>.png and the raw grid as <stem>.npy"""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        png_path = stem.with_suffix(".png")
        npy_path = stem.with_suffix(".npy")
        Image.fromarray(self.render(), mode="L").save(png_path)
        np.save(npy_path, self.diff)
        return png_path, npy_path


def error_map(hr: Union[torch.Tensor, np.ndarray], sr: Union[torch.Tensor, np.ndarray]) -> ErrorMap:
    """|hr - sr| per pixel; score is its mean"""
    hr_grid, sr_grid = _as_grid(hr), _as_grid(sr)
    if hr_grid.shape != sr_grid.shape:
        raise ShapeError(f"Image shapes differ: {hr_grid.shape} vs {sr_grid.shape}")
    diff = np.abs(hr_grid - sr_grid)
    return ErrorMap(diff=diff, score=float(diff.mean()))


@dataclass
class ProtocolReport:
    """Table-shaped protocol results plus provenance metadata"""
    rows: List[Dict] = field(default_factory=list)
    metadata: Dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        if not self.rows:
            return pd.DataFrame(columns=list(REPORT_COLUMNS))
        frame = pd.DataFrame.from_records(self.rows)
        extra = [c for c in frame.columns if c not in REPORT_COLUMNS]
        return frame.reindex(columns=list(REPORT_COLUMNS) + extra)

    def stage_rows(self) -> List[Dict]:
        return [r for r in self.rows if r.get("kind") == "cell" and r.get("status") == "ok"]

    def baseline_rows(self) -> List[Dict]:
        return [r for r in self.rows if r.get("kind") == "baseline" and r.get("status") == "ok"]

    def failures(self) -> List[Dict]:
        return [r for r in self.rows if r.get("status") == "failed"]

    @property
    def ok(self) -> bool:
        return not self.failures()

    def row(self, stage: str, sr_family: Optional[str] = None, loss: Optional[str] = None,
            classifier: Optional[str] = None) -> Dict:
        """The single row matching the given keys"""
        matches = [
            r for r in self.rows
            if r.get("stage") == stage
            and (sr_family is None or r.get("sr_family") == sr_family)
            and (loss is None or r.get("loss") == loss)
            and (classifier is None or r.get("classifier") == classifier)
        ]
        if len(matches) != 1:
            raise AggregationError(
                f"Expected one row for stage={stage} family={sr_family} loss={loss} "
                f"classifier={classifier}, found {len(matches)}"
            )
        return matches[0]

    def write(self, out_dir: Union[str, Path]) -> Dict[str, Path]:
        """CSV and JSON mirrors of the report, plus derived tables"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out_dir / "report.csv", "json": out_dir / "report.json"}

        self.to_frame().to_csv(paths["csv"], index=False)
        with open(paths["json"], 'w') as f:
            json.dump({"metadata": self.metadata, "rows": self.rows}, f, indent=2, sort_keys=True, default=str)

        if self.stage_rows():
            paths["family_summary"] = out_dir / "family_summary.csv"
            summarize(self.stage_rows(), ("sr_family", "stage")).to_frame().to_csv(paths["family_summary"], index=False)
            paths["stage_loss_table"] = out_dir / "stage_loss_table.csv"
            stage_loss_table(self).to_csv(paths["stage_loss_table"])
            paths["classifier_ranking"] = out_dir / "classifier_ranking.csv"
            classifier_ranking(self).to_csv(paths["classifier_ranking"], index=False)
            try:
                paths["improvement"] = out_dir / "improvement.csv"
                improvement_table(
                    stage_f1(self, "SR-PT"), stage_f1(self, "SR-FT"),
                    lr=baseline_f1(self, "LR"), hr=baseline_f1(self, "HR")
                ).to_csv(paths["improvement"], index=False)
            except AggregationError as e:
                logger.warning(f"Skipping improvement table: {e}")
                paths.pop("improvement")

        logger.info(f"Wrote report with {len(self.rows)} rows to {out_dir}")
        return paths

    @classmethod
    def read(cls, path: Union[str, Path]) -> "ProtocolReport":
        with open(path, 'r') as f:
            document = json.load(f)
        return cls(rows=document["rows"], metadata=document.get("metadata", {}))


def summarize(rows: Sequence[Mapping], group_by: Sequence[str] = ("sr_family",),
              columns: Sequence[str] = METRIC_COLUMNS) -> ProtocolReport:
    """Grouped means with best_<column> flags on the highest group values"""
    if not rows:
        raise AggregationError("Nothing to summarize")
    keys = set(rows[0])
    for row in rows:
        if set(row) != keys:
            raise AggregationError(f"Inconsistent row keys: {sorted(set(row) ^ keys)}")
    missing = [k for k in (*group_by, *columns) if k not in keys]
    if missing:
        raise AggregationError(f"Rows lack keys: {missing}")

    frame = pd.DataFrame.from_records(rows)
    for column in columns:
        frame[column] = pd.to_numeric(frame[column], errors="coerce")
    grouped = frame.groupby(list(group_by), sort=True, dropna=False)[list(columns)].mean().reset_index()
    grouped["count"] = frame.groupby(list(group_by), sort=True, dropna=False).size().values

    for column in columns:
        best = grouped[column].max()
        grouped[f"best_{column}"] = grouped[column].eq(best) & grouped[column].notna()

    records = [
        {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in record.items()}
        for record in grouped.to_dict(orient="records")
    ]
    return ProtocolReport(rows=records, metadata={"group_by": list(group_by), "n_rows": len(rows)})


def configuration_name(row: Mapping) -> str:
    """'<classifier> (<family>-<loss>)', the best-combination table label"""
    return f"{row.get('classifier')} ({row.get('sr_family')}-{row.get('loss')})"


def stage_f1(report: ProtocolReport, stage: str) -> Dict[str, float]:
    return {configuration_name(r): r["macro_f1"] for r in report.stage_rows() if r["stage"] == stage}


def baseline_f1(report: ProtocolReport, stage: str) -> Dict[str, float]:
    """Baseline F1 per configuration, looked up by classifier"""
    by_classifier = {r["classifier"]: r["macro_f1"] for r in report.baseline_rows() if r["stage"] == stage}
    return {
        configuration_name(r): by_classifier[r["classifier"]]
        for r in report.stage_rows()
        if r["stage"] == "SR-PT" and r["classifier"] in by_classifier
    }


def improvement_table(
    pt_report: Mapping[str, float],
    ft_report: Mapping[str, float],
    lr: Optional[Mapping[str, float]] = None,
    hr: Optional[Mapping[str, float]] = None
) -> pd.DataFrame:
    """configuration, [f1_lr, f1_hr,] f1_pt, f1_ft, delta = f1_ft - f1_pt"""
    if set(pt_report) != set(ft_report):
        raise AggregationError(
            f"Configuration keys differ: {sorted(set(pt_report) ^ set(ft_report))}"
        )
    if not pt_report:
        raise AggregationError("No configurations to compare")
    for name, extra in (("lr", lr), ("hr", hr)):
        if extra is not None and set(extra) != set(pt_report):
            raise AggregationError(f"{name} keys do not match the configurations")

    records = []
    for key in sorted(pt_report):
        record = {"configuration": key}
        if lr is not None:
            record["f1_lr"] = lr[key]
        if hr is not None:
            record["f1_hr"] = hr[key]
        record.update(f1_pt=pt_report[key], f1_ft=ft_report[key], delta=ft_report[key] - pt_report[key])
        records.append(record)
    return pd.DataFrame.from_records(records).sort_values("delta", ascending=False, kind="stable").reset_index(drop=True)


def stage_loss_table(report: ProtocolReport) -> pd.DataFrame:
    """Macro-F1 per classifier: LR/HR/SRHR baselines, then stage/loss columns"""
    cells = pd.DataFrame.from_records(report.stage_rows())
    if cells.empty:
        raise AggregationError("Report holds no successful stage rows")
    cells = cells[cells["stage"].isin(("SR-PT", "SR-FT"))]
    table = cells.pivot_table(index="classifier", columns=["stage", "loss"], values="macro_f1", aggfunc="mean")
    table.columns = [f"{stage}/{loss}" for stage, loss in table.columns]
    ordered = sorted(table.columns, key=lambda c: (STAGE_ORDER.index(c.split("/")[0]), c))
    table = table[ordered]

    baselines = pd.DataFrame.from_records(report.baseline_rows())
    if not baselines.empty:
        wide = baselines.pivot_table(index="classifier", columns="stage", values="macro_f1", aggfunc="mean")
        wide = wide[[s for s in BASELINE_STAGES if s in wide.columns]]
        table = wide.join(table, how="outer")

    table.loc["Average"] = table.mean(numeric_only=True)
    return table


def classifier_ranking(report: ProtocolReport) -> pd.DataFrame:
    """Mean SR-stage macro-F1 per classifier backbone, best first"""
    cells = pd.DataFrame.from_records(report.stage_rows())
    if cells.empty:
        raise AggregationError("Report holds no successful stage rows")
    ranking = cells.groupby("classifier")["macro_f1"].mean().reset_index()
    return ranking.sort_values("macro_f1", ascending=False, kind="stable").reset_index(drop=True)
