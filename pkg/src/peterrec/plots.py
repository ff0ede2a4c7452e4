"""Metric-vs-epoch curves rendered to SVG from report files.

matplotlib is imported lazily so nothing else in the package pays for
it; the Agg backend keeps rendering headless.
"""

from __future__ import annotations

import json

from .errors import DataError


def read_report(path: str) -> tuple:
    """Split a report file into (epoch records, summary or None)."""
    records, summary = [], None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if row.get("record") == "summary":
                summary = row
            else:
                records.append(row)
    if not records:
        raise DataError(f"no epoch records in {path}")
    return records, summary


def render_curves(report_paths, metric: str, out_path: str, title: str | None = None) -> None:
    """One line per report file; x = epoch, y = the chosen metric."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for path in report_paths:
        records, summary = read_report(path)
        points = [(r["epoch"], r[metric]) for r in records if metric in r]
        if not points:
            raise DataError(f"metric {metric!r} not present in {path}")
        label = (summary or {}).get("mode") or records[0].get("plan", path)
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", markersize=3, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(metric)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
