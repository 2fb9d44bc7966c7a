"""Report figures rendered to files next to the delimited outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .traits import TraitRecord  # noqa: E402

_TRAIT_LABELS = (("length_cm", "Length (cm)"),
                 ("width_cm", "Width (cm)"),
                 ("volume_cm3", "Volume (cm$^3$)"))


def save_trait_histograms(records: list[TraitRecord], path: str | Path) -> None:
    """Three-panel histogram of measured lengths, widths and volumes."""
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.2))
    for ax, (attr, label) in zip(axes, _TRAIT_LABELS):
        values = [getattr(r, attr) for r in records if getattr(r, attr) is not None]
        if values:
            ax.hist(values, bins=min(20, max(5, len(values) // 2)),
                    color="#4878a8", edgecolor="white")
            ax.set_title(f"{label}  (n={len(values)})", fontsize=10)
        else:
            ax.text(0.5, 0.5, "no measurable\ninstances", ha="center",
                    va="center", transform=ax.transAxes)
            ax.set_title(label, fontsize=10)
        ax.set_xlabel(label)
        ax.set_ylabel("instances")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_regression_scatter(paired: dict[str, tuple[np.ndarray, np.ndarray]],
                            stats: dict[str, dict] | None,
                            path: str | Path) -> None:
    """Per-trait scatter of estimated vs reference values with identity line."""
    traits = [t for t, _ in _TRAIT_LABELS if t in paired] or sorted(paired)
    fig, axes = plt.subplots(1, max(len(traits), 1), figsize=(3.5 * max(len(traits), 1), 3.4))
    if len(traits) <= 1:
        axes = [axes]
    labels = dict(_TRAIT_LABELS)
    for ax, trait in zip(axes, traits):
        est, ref = (np.asarray(v, dtype=np.float64) for v in paired[trait])
        label = labels.get(trait, trait)
        if est.size:
            ax.scatter(ref, est, s=18, color="#b05030", alpha=0.75, zorder=3)
            lo = min(ref.min(), est.min())
            hi = max(ref.max(), est.max())
            pad = 0.05 * (hi - lo) if hi > lo else 1.0
            ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad],
                    color="gray", lw=1, ls="--", zorder=2)
            ax.set_xlim(lo - pad, hi + pad)
            ax.set_ylim(lo - pad, hi + pad)
        else:
            ax.text(0.5, 0.5, "no paired values", ha="center", va="center",
                    transform=ax.transAxes)
        if stats and trait in stats:
            s = stats[trait]
            ax.set_title(f"{label}\n" + r"$\rho$" + f"={s['rho']:.3f}  "
                         f"MAPE={s['mape']:.1f}%", fontsize=9)
        else:
            ax.set_title(label, fontsize=10)
        ax.set_xlabel(f"reference {label}")
        ax.set_ylabel(f"estimated {label}")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
