"""Mean radial error and success detection rate."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataError
from .types import EvalReport, LandmarkSet

DEFAULT_THRESHOLDS = (3.0, 6.0, 9.0)


def radial_errors(pred: Sequence[LandmarkSet], gt: Sequence[LandmarkSet]) -> np.ndarray:
    """(S, L) Euclidean distances between matched predictions and ground truth"""
    if len(pred) != len(gt):
        raise DataError(f"count mismatch: {len(pred)} predicted scans vs {len(gt)} ground-truth scans")
    if not pred:
        raise DataError("no scans to evaluate")
    rows = []
    for i, (p, g) in enumerate(zip(pred, gt)):
        if p.count != g.count:
            raise DataError(f"count mismatch in scan {i}: {p.count} predicted vs {g.count} ground-truth landmarks")
        rows.append(np.linalg.norm(p.points - g.points, axis=1))
    if len({r.size for r in rows}) != 1:
        raise DataError("scans disagree on the number of landmarks")
    return np.vstack(rows)


def mre(pred: Sequence[LandmarkSet], gt: Sequence[LandmarkSet]) -> Tuple[float, float]:
    """Mean and population std over every radial error"""
    errors = radial_errors(pred, gt)
    return float(errors.mean()), float(errors.std())


def sdr_from_errors(errors: np.ndarray, tau: float) -> float:
    if tau <= 0:
        raise ValueError(f"SDR threshold must be positive, got {tau}")
    return 100.0 * float(np.count_nonzero(errors < tau)) / errors.size


def sdr(pred: Sequence[LandmarkSet], gt: Sequence[LandmarkSet], tau: float) -> float:
    """Percent of landmarks with error strictly below ``tau`` (mm)"""
    return sdr_from_errors(radial_errors(pred, gt), tau)


def report_from_errors(
    errors: np.ndarray,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    scan_ids: Optional[List[str]] = None,
) -> EvalReport:
    errors = np.asarray(errors, dtype=np.float64)
    return EvalReport(
        scan_ids=list(scan_ids or []),
        errors=errors.tolist(),
        mre_mean=float(errors.mean()),
        mre_std=float(errors.std()),
        thresholds=[float(t) for t in thresholds],
        sdr=[sdr_from_errors(errors, t) for t in thresholds],
        per_landmark_mre=errors.mean(axis=0).tolist(),
    )


def report(
    pred: Sequence[LandmarkSet],
    gt: Sequence[LandmarkSet],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    scan_ids: Optional[List[str]] = None,
) -> EvalReport:
    return report_from_errors(radial_errors(pred, gt), thresholds, scan_ids)


def write_report(rep: EvalReport, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """report.json with every field, report.csv with one row per scan"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out / "report.json", out / "report.csv"
    json_path.write_text(rep.model_dump_json(indent=2))
    landmarks = len(rep.errors[0]) if rep.errors else 0
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scan"] + [f"lm{j}" for j in range(landmarks)] + ["mean"])
        for i, row in enumerate(rep.errors):
            scan = rep.scan_ids[i] if i < len(rep.scan_ids) else str(i)
            writer.writerow([scan] + [repr(e) for e in row] + [repr(float(np.mean(row)))])
        writer.writerow(["MRE", repr(rep.mre_mean), "std", repr(rep.mre_std)])
        for tau, rate in zip(rep.thresholds, rep.sdr):
            writer.writerow([f"SDR<{tau:g}", repr(rate)])
    return json_path, csv_path


def summary_line(rep: EvalReport) -> str:
    parts = [f"MRE={rep.mre_mean:.3f}±{rep.mre_std:.3f}mm"]
    parts += [f"SDR<{t:g}={r:.1f}%" for t, r in zip(rep.thresholds, rep.sdr)]
    return " ".join(parts)


def load_report(path: Union[str, Path]) -> EvalReport:
    return EvalReport.model_validate(json.loads(Path(path).read_text()))
