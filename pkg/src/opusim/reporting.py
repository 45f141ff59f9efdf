"""CSV tables and static plots for run outputs.

Every writer is deterministic: floats are formatted with repr-stable
``%.12g``, rows are emitted in a fixed order, and files are written
atomically. Plots are regenerated from the CSVs alone, so the same CSV
always yields the same PNG bytes.
"""

from __future__ import annotations

import csv
import io
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import InputError  # noqa: E402


def _fmt(value):
    if isinstance(value, float):
        return "%.12g" % value
    if value is None:
        return ""
    return str(value)


def write_csv(path, fieldnames, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fieldnames)
    for row in rows:
        writer.writerow([_fmt(row[k]) if isinstance(row, dict) else _fmt(v)
                         for k, v in (row.items() if isinstance(row, dict)
                                      else zip(fieldnames, row))])
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def csr_rows(tag: str, queries, fractions) -> list[dict]:
    return [{"variant": tag, "queries": int(q), "csr": float(f)}
            for q, f in zip(queries, fractions)]


def _savefig(fig, path) -> None:
    tmp = Path(str(path) + ".tmp")
    fig.savefig(tmp, format="png", metadata={"Software": "opusim"})
    plt.close(fig)
    os.replace(tmp, path)


def plot_csr(csv_path, out_path) -> None:
    """Cumulative success rate vs queries, one line per variant."""
    rows = read_csv(csv_path)
    if not rows:
        raise InputError(f"{csv_path} is empty")
    series: dict[str, tuple[list, list]] = {}
    for row in rows:
        tag = row.get("variant", "run")
        series.setdefault(tag, ([], []))
        series[tag][0].append(int(row["queries"]))
        series[tag][1].append(float(row["csr"]))
    fig, ax = plt.subplots(figsize=(5.0, 3.5), dpi=120)
    for tag in sorted(series):
        q, f = series[tag]
        ax.step(q, f, where="post", label=tag)
    ax.set_xlabel("queries")
    ax.set_ylabel("cumulative success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _savefig(fig, out_path)


def plot_accuracy_vs_eps(csv_path, out_path) -> None:
    """Accuracy under attack vs perturbation strength, one line per model."""
    rows = read_csv(csv_path)
    if not rows:
        raise InputError(f"{csv_path} is empty")
    keys = [k for k in rows[0] if k != "epsilon"]
    fig, ax = plt.subplots(figsize=(5.0, 3.5), dpi=120)
    eps = [float(r["epsilon"]) for r in rows]
    for key in keys:
        ax.plot(eps, [float(r[key]) for r in rows], marker="o", label=key)
    ax.set_xlabel("epsilon")
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _savefig(fig, out_path)
