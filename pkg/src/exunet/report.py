"""Aggregate per-system evaluation reports into a condition-grid table with
an average row, write it as text + CSV, and render DET-curve / loss-curve /
EER-vs-SNR figures to files.
"""

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from scipy.stats import norm


def load_report(path) -> dict:
    with open(path, encoding="utf-8") as f:
        report = json.load(f)
    report["_dir"] = os.path.dirname(os.path.abspath(path))
    return report


def _condition_order(reports):
    seen = []
    for rep in reports:
        for c in rep["conditions"]:
            if c["condition"] not in seen:
                seen.append(c["condition"])
    originals = [c for c in seen if c == "original"]
    noisy = sorted(
        (c for c in seen if c != "original"),
        key=lambda c: (c.split(":")[0], float(c.split(":")[1])),
    )
    return originals + noisy


def build_grid(reports):
    """rows: condition names + 'average'; columns: system labels;
    cells: (eer, min_dcf) or None."""
    conditions = _condition_order(reports)
    systems = [rep["system"] for rep in reports]
    cells = {}
    for rep in reports:
        by_cond = {c["condition"]: c for c in rep["conditions"]}
        for cond in conditions:
            c = by_cond.get(cond)
            cells[(cond, rep["system"])] = (
                (c["eer"], c["min_dcf"]) if c is not None else None
            )
        cells[("average", rep["system"])] = (
            rep["average"]["eer"],
            rep["average"]["min_dcf"],
        )
    return {"conditions": conditions + ["average"], "systems": systems, "cells": cells}


def render_table(grid) -> str:
    label = {"average": "Average (EER / minDCF)"}
    rows = [["Condition"] + grid["systems"]]
    for cond in grid["conditions"]:
        row = [label.get(cond, cond)]
        for sys_name in grid["systems"]:
            cell = grid["cells"][(cond, sys_name)]
            row.append("-" if cell is None else f"{100*cell[0]:.2f} / {cell[1]:.3f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_grid_csv(path, grid):
    with open(path, "w", encoding="utf-8") as f:
        f.write("condition,system,eer,min_dcf\n")
        for cond in grid["conditions"]:
            for sys_name in grid["systems"]:
                cell = grid["cells"][(cond, sys_name)]
                if cell is None:
                    continue
                f.write(f"{cond},{sys_name},{cell[0]:.6f},{cell[1]:.6f}\n")


def _read_det_csv(path):
    data = np.genfromtxt(path, delimiter=",", names=True)
    return np.atleast_1d(data["p_miss"]), np.atleast_1d(data["p_fa"])


def _probit(p):
    return norm.ppf(np.clip(p, 1e-4, 1 - 1e-4))


def render_det_figures(reports, out_dir):
    """One DET plot per condition, overlaying every system that has the
    condition's curve file next to its report."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for cond in _condition_order(reports):
        fig, ax = plt.subplots(figsize=(5, 5))
        plotted = False
        for rep in reports:
            entry = next(
                (c for c in rep["conditions"] if c["condition"] == cond), None
            )
            if entry is None or "det" not in entry:
                continue
            det_path = os.path.join(rep["_dir"], entry["det"])
            if not os.path.exists(det_path):
                continue
            p_miss, p_fa = _read_det_csv(det_path)
            order = np.argsort(p_fa)
            ax.plot(_probit(p_fa[order]), _probit(p_miss[order]), label=rep["system"])
            plotted = True
        if not plotted:
            plt.close(fig)
            continue
        ticks = np.array([0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8])
        for axis in (ax.xaxis, ax.yaxis):
            axis.set_ticks(_probit(ticks))
            axis.set_ticklabels([f"{100*t:g}" for t in ticks])
        ax.set_xlabel("false acceptance (%)")
        ax.set_ylabel("false rejection (%)")
        ax.set_title(f"DET, condition: {cond}")
        ax.grid(True, alpha=0.3)
        ax.legend()
        path = os.path.join(out_dir, f"det_{cond.replace(':', '_')}.png")
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written


def render_eer_vs_snr(reports, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    kinds = sorted(
        {
            c["condition"].split(":")[0]
            for rep in reports
            for c in rep["conditions"]
            if c["condition"] != "original"
        }
    )
    if not kinds:
        return []
    fig, axes = plt.subplots(1, len(kinds), figsize=(4 * len(kinds), 3.5), squeeze=False)
    for ax, kind in zip(axes[0], kinds):
        for rep in reports:
            pts = sorted(
                (float(c["condition"].split(":")[1]), 100 * c["eer"])
                for c in rep["conditions"]
                if c["condition"].startswith(kind + ":")
            )
            if pts:
                ax.plot(*zip(*pts), marker="o", label=rep["system"])
        ax.set_title(kind)
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("EER (%)")
        ax.grid(True, alpha=0.3)
    axes[0][-1].legend()
    fig.tight_layout()
    path = os.path.join(out_dir, "eer_vs_snr.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def render_loss_curves(log_paths, out_dir, labels=None):
    """Loss-component curves from train_log.jsonl files."""
    os.makedirs(out_dir, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    plotted = False
    for i, log_path in enumerate(log_paths):
        epochs, totals = [], []
        with open(log_path, encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                epochs.append(rec["epoch"])
                totals.append(rec["total"])
        if not epochs:
            continue
        label = labels[i] if labels else os.path.basename(os.path.dirname(log_path))
        ax.plot(epochs, totals, label=label)
        plotted = True
    if not plotted:
        plt.close(fig)
        return []
    ax.set_xlabel("epoch")
    ax.set_ylabel("total training loss")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = os.path.join(out_dir, "loss_curves.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]
