"""Test-batch reports: JSON, CSV, and a rendered summary figure."""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .harness import BatchResult, verdicts_to_json

VERDICT_COLORS = {"pass": "#2a9d4e", "fail": "#d33939", "discard": "#c9a227"}


def verdicts_to_csv(result: BatchResult) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["seed", "test", "backend", "variant", "kind", "events",
                     "reason"])
    for v in result.verdicts:
        writer.writerow([v.seed, v.test, v.backend, v.variant, v.kind,
                         v.events, v.reason])
    return out.getvalue()


def render_summary_figure(result: BatchResult, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    counts = {"pass": result.passed, "fail": result.failed,
              "discard": result.discarded}
    lengths = [v.events for v in result.verdicts
               if v.kind != "discard" and v.events >= 0]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    kinds = list(counts)
    ax1.bar(kinds, [counts[k] for k in kinds],
            color=[VERDICT_COLORS[k] for k in kinds])
    ax1.set_title(f"{result.test}: verdicts over {len(result.verdicts)} cases")
    ax1.set_ylabel("cases")
    for i, k in enumerate(kinds):
        ax1.text(i, counts[k], str(counts[k]), ha="center", va="bottom")

    if lengths:
        ax2.hist(lengths, bins=min(30, max(5, len(set(lengths)))),
                 color="#33658a")
    ax2.set_title("trace length (events)")
    ax2.set_xlabel("events in the low-level trace")
    ax2.set_ylabel("cases")

    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_report(result: BatchResult, report_dir: str | Path) -> list[Path]:
    """Write verdicts.json, verdicts.csv, and summary.png; returns the paths."""
    directory = Path(report_dir)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / f"{result.test}-verdicts.json"
    csv_path = directory / f"{result.test}-verdicts.csv"
    png_path = directory / f"{result.test}-summary.png"
    json_path.write_text(verdicts_to_json(result))
    csv_path.write_text(verdicts_to_csv(result))
    render_summary_figure(result, png_path)
    return [json_path, csv_path, png_path]
