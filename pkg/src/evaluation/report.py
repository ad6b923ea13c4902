"""Evaluation reports: JSON with per-sample records, ASR and recall CSVs."""
import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .metrics import EvalConfig, EvalRecord, summarize

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
ASR_COLUMNS = ["label", "FN ASR", "FP ASR", "ASR"]
UNDEFINED = "undefined"


def _cell(value: Optional[float]) -> str:
    return UNDEFINED if value is None else f"{value:.2f}"


def build_report(records: Sequence[EvalRecord], cfg: EvalConfig, label: str = "attack",
                 extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    report = {
        "label": label,
        "summary": summarize(records, cfg),
        "records": [r.to_dict() for r in records],
        "thresholds": {"detect_iou": cfg.detect_iou, "fp_max_iou": cfg.fp_max_iou,
                       "inclusive": cfg.inclusive_threshold},
    }
    if extra:
        report.update(extra)
    return report


def write_json(data: Dict[str, Any], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True))
    return path


def load_report(path: PathLike) -> Tuple[Dict[str, Any], List[EvalRecord]]:
    data = json.loads(Path(path).read_text())
    return data, [EvalRecord.from_dict(r) for r in data.get("records", [])]


def write_asr_csv(rows: Sequence[Tuple[str, Optional[float], Optional[float], Optional[float]]], path: PathLike,
                  columns: Sequence[str] = ASR_COLUMNS) -> Path:
    """One row per evaluated attack; undefined rates are written as ``undefined``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for label, *values in rows:
            writer.writerow([label] + [_cell(v) if not isinstance(v, str) else v for v in values])
    return path


def write_recall_csv(curve: Sequence[Tuple[float, float]], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "recall"])
        for threshold, recall in curve:
            writer.writerow([f"{threshold:.2f}", f"{recall:.4f}"])
    return path


def write_evaluation(records: Sequence[EvalRecord], cfg: EvalConfig, out_dir: PathLike, label: str = "attack",
                     extra: Optional[Dict[str, Any]] = None) -> List[Path]:
    """``report.json``, ``asr.csv`` and ``recall.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    report = build_report(records, cfg, label, extra)
    summary = report["summary"]
    written = [write_json(report, out_dir / "report.json")]
    written.append(write_asr_csv([(label, summary["fn_asr"], summary["fp_asr"], summary["asr"])],
                                 out_dir / "asr.csv"))
    written.append(write_recall_csv(summary["recall"], out_dir / "recall.csv"))
    logger.info(f"Wrote evaluation report for {label!r} to {out_dir}")
    return written
