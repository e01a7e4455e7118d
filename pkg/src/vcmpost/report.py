"""Metrics CSV serialization, gap tables, and rate-accuracy figures.

The CSV layout is one row per (sequence, label, qp):

    sequence,label,qp,kbps,map,ap_<class>...,f1_<class>...

Class columns cover every class seen anywhere in the report; a class
absent from a sequence's ground truth leaves its ap cell empty.

Figures are SVG with a fixed hash salt and no timestamp, so identical
inputs produce byte-identical files, and each figure embeds its own
data table in the SVG Description metadata for plot-free testing.
"""
from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import IngestionError, ParseError, UsageError, ValidationError
from .metrics import RatePoint, build_rate_curve

SVG_HASHSALT = "vcmpost"


@dataclass(frozen=True)
class EvalRecord:
    """One metrics row: a rate point tagged with its sequence and QP."""

    sequence: str
    qp: int
    point: RatePoint


def _collect_classes(records) -> list:
    classes = set()
    for rec in records:
        classes.update(rec.point.per_class_ap)
        classes.update(rec.point.f1)
    return sorted(classes)


def _row_key(rec: EvalRecord):
    return (rec.sequence, rec.point.label, rec.qp)


def write_metrics_csv(path, records) -> Path:
    """Write records sorted by (sequence, label, qp); deterministic bytes."""
    records = list(records)
    if not records:
        raise UsageError("no evaluation records to write")
    classes = _collect_classes(records)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["sequence", "label", "qp", "kbps", "map"]
        header += [f"ap_{c}" for c in classes]
        header += [f"f1_{c}" for c in classes]
        writer.writerow(header)
        for rec in sorted(records, key=_row_key):
            p = rec.point
            row = [rec.sequence, p.label, rec.qp,
                   f"{p.bitrate_kbps:.3f}", f"{p.map_value:.4f}"]
            for c in classes:
                ap = p.per_class_ap.get(c)
                row.append("" if ap is None else f"{ap:.6f}")
            for c in classes:
                f1 = p.f1.get(c)
                row.append("" if f1 is None else f"{f1:.6f}")
            writer.writerow(row)
    return path


def read_metrics_csv(path) -> list:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"metrics file does not exist: {path}")
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty metrics file") from None
        if header[:5] != ["sequence", "label", "qp", "kbps", "map"]:
            raise ParseError(f"{path}: unexpected header {header[:5]}")
        ap_cols = []
        f1_cols = []
        for i, name in enumerate(header[5:], start=5):
            if name.startswith("ap_"):
                ap_cols.append((i, int(name[3:])))
            elif name.startswith("f1_"):
                f1_cols.append((i, int(name[3:])))
            else:
                raise ParseError(f"{path}: unexpected column {name!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                per_class_ap = {c: (float(row[i]) if row[i] != "" else None)
                                for i, c in ap_cols}
                f1 = {c: float(row[i]) for i, c in f1_cols if row[i] != ""}
                point = RatePoint(
                    bitrate_kbps=float(row[3]),
                    map_value=float(row[4]),
                    per_class_ap=per_class_ap,
                    f1=f1,
                    label=row[1],
                )
                records.append(EvalRecord(sequence=row[0], qp=int(row[2]), point=point))
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_gap_table(path, records) -> Path:
    """Per (sequence, qp): postprocessed minus encoded mAP.

    Rows lacking either label are skipped; the table is sorted by
    sequence then qp.
    """
    by_key = {}
    for rec in records:
        by_key.setdefault((rec.sequence, rec.qp), {})[rec.point.label] = rec.point
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sequence", "qp", "kbps", "map_encoded",
                         "map_postprocessed", "gap"])
        for (sequence, qp), labels in sorted(by_key.items()):
            if "encoded" not in labels or "postprocessed" not in labels:
                continue
            enc = labels["encoded"]
            post = labels["postprocessed"]
            writer.writerow([
                sequence, qp, f"{enc.bitrate_kbps:.3f}",
                f"{enc.map_value:.4f}", f"{post.map_value:.4f}",
                f"{post.map_value - enc.map_value:+.4f}",
            ])
    return path


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", text) or "unnamed"


def _save_deterministic(fig, path: Path, table: str) -> None:
    plt.rcParams["svg.hashsalt"] = SVG_HASHSALT
    fig.savefig(
        path,
        format="svg",
        metadata={"Date": None, "Description": table},
    )
    plt.close(fig)


def _curve_table(series) -> str:
    """Render plotted series as CSV text for the SVG metadata."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label", "kbps", "value"])
    for label, xs, ys in series:
        for x, y in zip(xs, ys):
            writer.writerow([label, f"{x:.3f}", f"{y:.6f}"])
    return buf.getvalue()


def read_svg_description(path) -> str:
    """Pull the embedded data table back out of a figure file."""
    text = Path(path).read_text()
    m = re.search(r"<dc:description>(.*?)</dc:description>", text, re.S)
    if not m:
        raise ParseError(f"{path}: no description metadata found")
    return m.group(1)


def _plot_metric(records, sequence: str, metric, ylabel: str, out_path: Path) -> Path:
    points = [rec.point for rec in records if rec.sequence == sequence]
    curves = build_rate_curve(points)
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    series = []
    for label, group in sorted(curves.items()):
        xs = [p.bitrate_kbps for p in group]
        ys = [metric(p) for p in group]
        keep = [(x, y) for x, y in zip(xs, ys) if y is not None]
        if not keep:
            continue
        xs = [x for x, _ in keep]
        ys = [y for _, y in keep]
        ax.plot(xs, ys, marker="o", label=label)
        series.append((label, xs, ys))
    ax.set_xlabel("bitrate [kbps]")
    ax.set_ylabel(ylabel)
    ax.set_title(sequence)
    ax.grid(True, alpha=0.3)
    if series:
        ax.legend()
    fig.tight_layout()
    _save_deterministic(fig, out_path, _curve_table(series))
    return out_path


def render_reports(records, out_dir) -> list:
    """Write the gap table and all per-sequence figures; returns paths."""
    records = list(records)
    if not records:
        raise UsageError("no evaluation records to report on")
    for rec in records:
        if rec.qp < 0:
            raise ValidationError(f"negative qp in record for {rec.sequence!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_gap_table(out_dir / "gap_table.csv", records)]
    sequences = sorted({rec.sequence for rec in records})
    classes = _collect_classes(records)
    for sequence in sequences:
        slug = _slug(sequence)
        written.append(_plot_metric(
            records, sequence, lambda p: p.map_value, "mAP",
            out_dir / f"{slug}_rate_map.svg"))
        for c in classes:
            written.append(_plot_metric(
                records, sequence,
                lambda p, c=c: (None if p.per_class_ap.get(c) is None
                                else 100.0 * p.per_class_ap[c]),
                f"AP class {c}",
                out_dir / f"{slug}_rate_ap_class{c}.svg"))
            written.append(_plot_metric(
                records, sequence,
                lambda p, c=c: p.f1.get(c),
                f"F1 class {c}",
                out_dir / f"{slug}_rate_f1_class{c}.svg"))
    return written
