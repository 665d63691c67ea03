"""File formats: JSON-lines histories, numeric CSV matrices and PGM heatmaps."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable

import numpy as np


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_matrix_csv(table, path) -> None:
    """One row per state, one column per action, full float precision."""
    table = np.atleast_2d(np.asarray(table, dtype=float))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in table:
            writer.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh)
                if row and not row[0].startswith("#")]
    if not rows:
        raise ValueError(f"{path} holds no rows")
    if len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path} is not a rectangular table")
    return np.array(rows)


def to_gray_levels(table) -> tuple[np.ndarray, float, float]:
    """Min-max scale to 0..255; a constant table maps to level 0."""
    table = np.asarray(table, dtype=float)
    if not np.all(np.isfinite(table)):
        raise ValueError("heatmap values must be finite")
    lo, hi = float(table.min()), float(table.max())
    if hi == lo:
        return np.zeros(table.shape, dtype=int), lo, hi
    return np.rint((table - lo) / (hi - lo) * 255).astype(int), lo, hi


def write_pgm(table, path) -> None:
    """Plain (ASCII) 8-bit PGM; rows of the table become image rows."""
    levels, lo, hi = to_gray_levels(np.atleast_2d(table))
    h, w = levels.shape
    lines = ["P2", f"# min-max scaled to 0..255: min={lo!r} max={hi!r}", f"{w} {h}", "255"]
    lines += [" ".join(str(v) for v in row) for row in levels]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0]
        tokens += line.split()
    if tokens[0] != "P2":
        raise ValueError("only plain PGM (P2) is supported")
    w, h, _ = (int(t) for t in tokens[1:4])
    return np.array([int(t) for t in tokens[4:]]).reshape(h, w)


def emit_heatmap(table, path, fmt: str = "pgm") -> Path:
    path = Path(path)
    if fmt == "csv":
        write_matrix_csv(table, path)
    elif fmt == "pgm":
        write_pgm(table, path)
    else:
        raise ValueError(f"unknown heatmap format {fmt!r}")
    return path
