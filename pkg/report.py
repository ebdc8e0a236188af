"""
Rendering of evaluation reports, ablation tables, dataset descriptions and
gradient-check results as text, JSON and CSV.
"""

import json
import logging
from pathlib import Path

import pandas as pd

from metrics import trapezoid_area

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "accuracy", "auc",
    "fake_precision", "fake_recall", "fake_f1",
    "real_precision", "real_recall", "real_f1",
    "micro_f1",
]


def _banner(title, width=60):
    return f"{'=' * width}\n  {title}\n{'=' * width}"


def metric_row(report):
    return {
        "accuracy": report.accuracy,
        "auc": report.auc,
        "fake_precision": report.fake.precision,
        "fake_recall": report.fake.recall,
        "fake_f1": report.fake.f1,
        "real_precision": report.real.precision,
        "real_recall": report.real.recall,
        "real_f1": report.real.f1,
        "micro_f1": report.micro_f1,
    }


def report_text(report, title="Evaluation"):
    per_class = pd.DataFrame(
        {
            "Precision": [report.fake.precision, report.real.precision],
            "Recall": [report.fake.recall, report.real.recall],
            "F1-score": [report.fake.f1, report.real.f1],
        },
        index=["Fake News", "Real News"],
    )
    cm = report.confusion
    lines = [
        _banner(title),
        f"  Records:        {report.n}",
        f"  Accuracy:       {report.accuracy:.4f}",
        f"  AUC:            {report.auc:.4f}",
        f"  F1-score Micro: {report.micro_f1:.4f}",
        "",
        per_class.to_string(float_format=lambda x: f"{x:.4f}"),
        "",
        f"  Confusion (fake positive): TP={cm.tp} FP={cm.fp} TN={cm.tn} FN={cm.fn}",
    ]
    if report.flags:
        lines.append(f"  Undefined (reported as 0): {', '.join(report.flags)}")
    return "\n".join(lines) + "\n"


def report_json(report):
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def roc_frame(points):
    return pd.DataFrame(points, columns=["fpr", "tpr"])


def write_roc_csv(points, path):
    roc_frame(points).to_csv(path, index=False)
    return Path(path)


def read_roc_csv(path):
    """ROC points back from a CSV written by write_roc_csv."""
    frame = pd.read_csv(path, float_precision="round_trip")
    return list(zip(frame["fpr"].tolist(), frame["tpr"].tolist()))


def roc_csv_area(path):
    return trapezoid_area(read_roc_csv(path))


def write_run_reports(report, run_dir, title="Evaluation"):
    run_dir = Path(run_dir)
    (run_dir / "report.txt").write_text(report_text(report, title), encoding="utf-8")
    (run_dir / "report.json").write_text(report_json(report), encoding="utf-8")
    write_roc_csv(report.roc, run_dir / "roc.csv")
    logger.info(f"Reports written to {run_dir}")


# ---------------------------------------------------------------------- #
# ablation
# ---------------------------------------------------------------------- #
def ablation_frame(reports):
    """One row per mode (in the given order), EvalReport metric columns."""
    rows = [{"mode": mode, **metric_row(report)} for mode, report in reports.items()]
    return pd.DataFrame(rows, columns=["mode"] + METRIC_COLUMNS).set_index("mode")


def ablation_text(frame, title="Ablation"):
    return _banner(title) + "\n" + frame.to_string(float_format=lambda x: f"{x:.4f}") + "\n"


def write_ablation(frame, out_dir, title="Ablation"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.txt").write_text(ablation_text(frame, title), encoding="utf-8")
    frame.to_csv(out_dir / "ablation.csv")
    rows = [{"mode": mode, **row} for mode, row in frame.to_dict(orient="index").items()]
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    return out_dir


# ---------------------------------------------------------------------- #
# datasets and gradient checks
# ---------------------------------------------------------------------- #
def distribution_frame(meta):
    frame = pd.DataFrame(meta.counts).T.reindex(columns=["fake", "real"]).fillna(0).astype(int)
    frame.columns = ["Fake News", "Real News"]
    frame.index = [str(i).capitalize() for i in frame.index]
    frame["Total"] = frame.sum(axis=1)
    return frame


def describe_text(meta, balance=None, preset=None):
    lines = [_banner(f"Dataset: {meta.name}"), f"  Embedding size: {meta.d_in}"]
    if meta.text_length:
        lines.append(f"  Max text length: {meta.text_length}")
    if meta.image_shape:
        lines.append(f"  Image shape: {' x '.join(str(s) for s in meta.image_shape)}")
    lines += ["", distribution_frame(meta).to_string(), "", f"  Total records: {meta.total}"]
    if balance is not None:
        names = {0: "real", 1: "fake"}
        lines.append(f"  Balancing factor alpha: {balance.alpha:.4f} (minority: {names[balance.minority]})")
    if preset is not None:
        same = preset.counts == meta.counts
        lines.append(f"  Matches the {preset.name} distribution: {'yes' if same else 'no'}")
    return "\n".join(lines) + "\n"


def gradcheck_text(gradcheck_report, group_errors):
    lines = [_banner("Gradient check (central differences, fused_s loss)")]
    for group, err in group_errors.items():
        mark = "✓" if err < gradcheck_report.tol else "✗"
        lines.append(f"  {mark} {group:<16} worst rel err {err:.3e}")
    if gradcheck_report.passed:
        lines.append(f"  PASS (tol {gradcheck_report.tol:g})")
    else:
        lines.append(f"  FAIL (tol {gradcheck_report.tol:g}): {', '.join(gradcheck_report.offending)}")
    return "\n".join(lines) + "\n"
