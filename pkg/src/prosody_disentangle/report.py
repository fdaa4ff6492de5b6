"""Collect a run directory's artifacts into plain CSV files for plotting.

Written under ``<run_dir>/report`` (or ``out_dir``); the run's own artifacts are
only read. Columns:

- ``pretrain_curve.csv`` / ``evc_curve.csv``: step, train_mse, val_mse, lr, grad_norm
- ``ser_confusion.csv``: first column true class, one column per predicted class
- ``ser_metrics.csv``: metric, value (wa, ua, fold_mean_wa, fold_mean_ua, n_utterances)
- ``evc_scores.csv``: utt_id, mcd_db, f0_rmse_hz (last row ``__mean__``)
- ``alignments/<name>.csv``: one row per decoder step, one column per unit
- ``pca_trace.csv``: utt_id, frame, pc1
- ``probe.csv``: metric, value
"""
from __future__ import annotations

import csv
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional


class MissingArtifacts(FileNotFoundError):
    pass


@dataclass
class ReportSummary:
    out_dir: Path
    written: List[Path] = field(default_factory=list)
    missing: List[str] = field(default_factory=list)


_COPIES = (
    ("pretrain/curve.csv", "pretrain_curve.csv"),
    ("evc/curve.csv", "evc_curve.csv"),
    ("ser/report_confusion.csv", "ser_confusion.csv"),
    ("evc_scores.csv", "evc_scores.csv"),
    ("embeddings/pca_trace.csv", "pca_trace.csv"),
)


def _key_values(path: Path) -> List[tuple]:
    rows = []
    for line in path.read_text().splitlines():
        if ":" in line and not line.startswith("fold "):
            k, v = (t.strip() for t in line.split(":", 1))
            try:
                rows.append((k, float(v)))
            except ValueError:
                pass
    return rows


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def emit_report(run_dir, out_dir: Optional[Path] = None) -> ReportSummary:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise MissingArtifacts(f"{run_dir}: no such run directory")
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    summary = ReportSummary(out)
    sources = [s for s, _ in _COPIES] + ["ser/report.txt", "probe.txt", "conversions/align"]
    if not any((run_dir / s).exists() for s in sources):
        raise MissingArtifacts(f"{run_dir}: no artifacts found; missing {', '.join(sources)}")
    out.mkdir(parents=True, exist_ok=True)

    for src, dst in _COPIES:
        if (run_dir / src).exists():
            shutil.copyfile(run_dir / src, out / dst)
            summary.written.append(out / dst)
        else:
            summary.missing.append(src)

    for src, dst in (("ser/report.txt", "ser_metrics.csv"), ("probe.txt", "probe.csv")):
        if (run_dir / src).exists():
            _write_rows(out / dst, ["metric", "value"], _key_values(run_dir / src))
            summary.written.append(out / dst)
        else:
            summary.missing.append(src)

    align_src = run_dir / "conversions" / "align"
    if align_src.is_dir():
        (out / "alignments").mkdir(exist_ok=True)
        for f in sorted(align_src.glob("*.csv")):
            shutil.copyfile(f, out / "alignments" / f.name)
            summary.written.append(out / "alignments" / f.name)
    else:
        summary.missing.append("conversions/align")

    lines = [f"written: {p.relative_to(out)}" for p in summary.written]
    lines += [f"missing: {m}" for m in summary.missing]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return summary
