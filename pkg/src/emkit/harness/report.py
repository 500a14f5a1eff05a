"""Lead-time tables as CSV and markdown. Output depends only on the inputs."""
from __future__ import annotations

from pathlib import Path

COLUMNS = ("strategy", "lead", "rmse", "acc")


def _cell(v) -> str:
    if v is None or (isinstance(v, float) and v != v):
        return "-"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def rows_from_runs(runs: dict) -> list[dict]:
    """``runs`` maps strategy -> {"rmse": [...], "acc": [...]} per lead (lead 1 first)."""
    rows = []
    for strategy in sorted(runs):
        r = runs[strategy]
        n = max(len(r.get("rmse", [])), len(r.get("acc", [])))
        for k in range(n):
            get = lambda key: r[key][k] if k < len(r.get(key, [])) else None
            rows.append({"strategy": strategy, "lead": k + 1, "rmse": get("rmse"), "acc": get("acc")})
    return rows


def to_csv(rows: list[dict], columns=COLUMNS) -> str:
    lines = [",".join(columns)]
    lines += [",".join(_cell(r.get(c)) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"


def to_markdown(rows: list[dict], columns=COLUMNS) -> str:
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    lines += ["| " + " | ".join(_cell(r.get(c)) for c in columns) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def write_report(runs: dict, directory, stem: str = "report") -> tuple[Path, Path]:
    if not runs:
        raise ValueError("report needs at least one completed run")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rows = rows_from_runs(runs)
    csv_path, md_path = d / f"{stem}.csv", d / f"{stem}.md"
    csv_path.write_text(to_csv(rows))
    md_path.write_text(to_markdown(rows))
    return csv_path, md_path
