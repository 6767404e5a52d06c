"""Evaluation summaries, deterministic CSV/JSON writers and SVG figures."""
from __future__ import annotations

import csv
import json

import numpy as np

from . import damage as dmg


def write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_csv(path, header, rows, meta: dict | None = None) -> None:
    """CSV with optional ``# key=value`` metadata lines above the header."""
    with open(path, "w", newline="") as fh:
        for key in sorted(meta or {}):
            fh.write(f"# {key}={meta[key]}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def class_label(class_id: int, n_limbs: int) -> str:
    cls = dmg.class_from_id(class_id, n_limbs)
    if cls.is_healthy:
        return "healthy"
    return "+".join(f"L{a.limb}:{dmg.DamageType(a.kind).label}" for a in cls.assignments)


def compare(dappo: np.ndarray, unaware: np.ndarray) -> dict:
    """Paired per-class comparison of (classes,) mean forward rewards.

    A class is a win only when DA-PPO is strictly ahead; equal means count as
    ties and are reported separately.
    """
    dappo, unaware = np.asarray(dappo, float), np.asarray(unaware, float)
    md, mu = float(dappo.mean()), float(unaware.mean())
    wins = int(np.sum(dappo > unaware))
    ties = int(np.sum(dappo == unaware))
    improvement = 0.0 if md == mu else (md - mu) / abs(mu) * 100.0
    return {
        "mean_dappo": md, "mean_unaware": mu, "improvement_pct": improvement,
        "wins": wins, "ties": ties, "losses": len(dappo) - wins - ties,
        "win_rate": wins / len(dappo),
    }


def _pyplot():
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    # fixed element ids and no date stamp keep the SVG reproducible
    plt.rcParams["svg.hashsalt"] = "dappo"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def per_class_bars(path, labels, dappo, unaware, title="") -> None:
    plt = _pyplot()
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(8, 0.35 * len(labels)), 4.5))
    ax.bar(x - 0.2, dappo, 0.4, label="DA-PPO")
    ax.bar(x + 0.2, unaware, 0.4, label="PPO-Unaware")
    ax.set_xticks(x, labels, rotation=90, fontsize=7)
    ax.set_ylabel("mean forward reward")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def training_curves(path, curves: dict, stage_bounds=()) -> None:
    """``curves`` maps a legend label to (iterations, values)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(8, 4))
    for label in sorted(curves):
        it, val = curves[label]
        ax.plot(it, val, label=label, linewidth=1)
    for b in stage_bounds:
        ax.axvline(b, color="grey", linestyle=":", linewidth=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean forward reward")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
