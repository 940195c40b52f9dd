"""Render experiment reports as aligned text or stable JSON.

Reports are reproducible artifacts: the same (scenario, seed) pair must
serialize byte-for-byte identically, so nothing in this module reads the
clock or any other ambient state. Formatting is pinned (sorted keys, fixed
float precision) for the same reason.
"""

from __future__ import annotations

import json
from pathlib import Path


def render_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _table(headers: list[str], rows: list[list[str]]) -> list[str]:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))

    def line(cells: list[str]) -> str:
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    out = [line(headers), line(["-" * w for w in widths])]
    out.extend(line(r) for r in rows)
    return out


def _pct(fraction: float) -> str:
    return f"{fraction * 100.0:.2f}%"


def _retention_text(report: dict) -> list[str]:
    shape = report["shape"]
    lines = [
        f"retention  scenario={report['scenario']}  seed={report['seed']}",
        f"objects={report['objects']}  dispersal n={shape['n']} k={shape['k']}"
        f"  target_loss={shape['target_loss']}",
        "",
    ]
    rows = []
    for level in report["levels"]:
        rows.append([
            str(level["containers_down"]),
            str(level["kill_sets"]),
            "all" if level["exhaustive"] else "sampled",
            _pct(level["worst_retained"]),
            _pct(level["mean_retained"]),
        ])
    lines.extend(_table(
        ["down", "kill-sets", "coverage", "worst retained", "mean retained"],
        rows,
    ))
    return lines


def _fairness_text(report: dict) -> list[str]:
    lines = [
        f"fairness  scenario={report['scenario']}  seed={report['seed']}",
        f"objects={report['objects']}",
        "",
    ]
    chunks = report["chunks_per_container"]
    stored = report["bytes_per_container"]
    rows = [[cid, str(chunks[cid]), str(stored[cid])] for cid in sorted(chunks)]
    lines.extend(_table(["container", "chunks", "bytes"], rows))
    lines.append("")
    lines.append(
        f"min={report['min_chunks']}  max={report['max_chunks']}"
        f"  spread={report['spread']}"
    )
    return lines


def _overhead_text(report: dict) -> list[str]:
    lines = [
        f"overhead  scenario={report['scenario']}  seed={report['seed']}",
        f"objects per shape={report['objects_per_shape']}",
        "",
    ]
    rows = []
    for row in report["shapes"]:
        rows.append([
            f"({row['n']},{row['k']})",
            str(row["object_bytes"]),
            str(row["stored_bytes"]),
            f"{row['measured_overhead']:.4f}",
            f"{row['ideal_overhead']:.4f}",
            f"{row['excess_percent']:+.3f}%",
        ])
    lines.extend(_table(
        ["shape", "object bytes", "stored bytes", "measured", "ideal", "excess"],
        rows,
    ))
    return lines


def _consensus_text(report: dict) -> list[str]:
    lines = [f"consensus  seed={report['seed']}", ""]
    rows = []
    for run in report["exhaustive"]:
        rows.append([
            run["name"],
            str(run["states"]),
            str(run["schedules_completed"]),
            str(run["schedules_truncated"]),
            "yes" if run["truncated_by_state_cap"] else "no",
            str(len(run["violations"])),
        ])
    lines.extend(_table(
        ["exploration", "states", "complete", "truncated", "capped", "violations"],
        rows,
    ))
    rnd = report["random"]
    lines.append("")
    lines.append(
        f"random schedules={rnd['schedules']}  events={rnd['events']}"
        f"  commits={rnd['commits']}  aborts={rnd['aborts']}"
        f"  crashes={rnd['crashes']}  violations={len(rnd['violations'])}"
    )
    violations = report["violations"]
    lines.append("")
    if violations:
        lines.append(f"VIOLATIONS ({len(violations)}):")
        lines.extend(f"  {v}" for v in violations)
    else:
        lines.append("no invariant violations")
    return lines


_RENDERERS = {
    "retention": _retention_text,
    "fairness": _fairness_text,
    "overhead": _overhead_text,
    "consensus": _consensus_text,
}


def render_text(report: dict) -> str:
    kind = report.get("experiment")
    renderer = _RENDERERS.get(kind)
    if renderer is None:
        raise ValueError(f"no text renderer for experiment {kind!r}")
    return "\n".join(renderer(report)) + "\n"


def write_report(report: dict, out: Path | None, fmt: str = "text") -> str:
    """Render and optionally write; returns the rendered string either way."""
    rendered = render_json(report) if fmt == "json" else render_text(report)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(rendered, encoding="utf-8")
    return rendered
