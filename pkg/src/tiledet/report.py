"""Writes evaluation reports as text, CSV, JSON and figures."""

from __future__ import annotations

import csv
from pathlib import Path

from .dataset import DatasetReport, write_json
from .errors import DataIOError
from .evaluator import EvalReport

HEADLINE = [
    ("map_50_95", "@0.5:0.95"),
    ("map_50", "@0.5"),
    ("map_50_small", "Small"),
    ("map_50_medium", "Medium"),
    ("map_50_large", "Large"),
]
SET_TITLES = {"all": "all classes", "subset": "evaluation subset"}


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.3f}"


def format_table(reports: dict[str, EvalReport]) -> str:
    """Plain-text mAP table, one row per class set."""
    head = ["classes", "n"] + [t for _, t in HEADLINE]
    rows = []
    for key, rep in reports.items():
        rows.append([SET_TITLES.get(key, key), str(len(rep.per_class))] + [_fmt(getattr(rep, f)) for f, _ in HEADLINE])
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    line = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    out = [line(head), "-" * len(line(head))]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}") from e


def write_eval_report(out_dir: str | Path, reports: dict[str, EvalReport], figures: bool = True) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    p = out_dir / "report.json"
    write_json(p, {k: r.to_dict() for k, r in reports.items()})
    written.append(p)

    p = out_dir / "report.txt"
    p.write_text(format_table(reports), encoding="utf-8")
    written.append(p)

    for key, rep in reports.items():
        p = out_dir / f"per_class_{key}.csv"
        fields = ["category_id", "name", "n_gt", "ap_50_95", "ap_50", "ap_50_small",
                  "ap_50_medium", "ap_50_large", "tp", "fp", "fn"]
        _write_csv(p, fields, [[("" if getattr(r, f) is None else getattr(r, f)) for f in fields]
                               for r in rep.per_class])
        written.append(p)

        p = out_dir / f"confusion_{key}.csv"
        _write_csv(p, ["true\\pred"] + rep.confusion_labels,
                   [[lab] + row for lab, row in zip(rep.confusion_labels, rep.confusion.astype(int).tolist())])
        written.append(p)

    if figures:
        from .plotting import plot_confusion, plot_headline, plot_per_class_ap

        for key, rep in reports.items():
            p = out_dir / f"confusion_{key}.png"
            plot_confusion(rep, p, top_k=10 if key == "all" else None)
            written.append(p)
            p = out_dir / f"per_class_ap_{key}.png"
            plot_per_class_ap(rep, p)
            written.append(p)
        p = out_dir / "map_summary.png"
        plot_headline(reports, p)
        written.append(p)
    return written


def write_dataset_report(path: str | Path, rep: DatasetReport) -> None:
    fields = ["category_id", "name", "count", "min_area", "max_area", "mean_area"]
    rows = [[("" if getattr(r, f) is None else getattr(r, f)) for f in fields] for r in (*rep.rows, rep.total)]
    _write_csv(Path(path), fields, rows)
