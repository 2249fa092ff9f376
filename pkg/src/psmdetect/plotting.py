"""Figures for the ``stats`` report. Needs the optional ``plot`` extra (matplotlib)."""

from __future__ import annotations

from pathlib import Path

from .actionlog import LogStats
from .errors import ConfigError


def plot_stats(stats: LogStats, path) -> Path:
    """Log-log cascade size histogram and cumulative duration distribution, side by side."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise ConfigError("plotting needs matplotlib: pip install 'psmdetect[plot]'") from None

    fig, (ax_size, ax_dur) = plt.subplots(1, 2, figsize=(10, 4))
    if stats.size_histogram:
        sizes = sorted(stats.size_histogram)
        ax_size.loglog(sizes, [stats.size_histogram[s] for s in sizes], "o", markersize=3)
    ax_size.set_xlabel("cascade size")
    ax_size.set_ylabel("cascades")
    ax_size.set_title("Cascade sizes")

    if stats.duration_cdf:
        d, p = zip(*stats.duration_cdf)
        ax_dur.step([v / 3600 for v in d], p, where="post")
        ax_dur.set_xscale("symlog")
    ax_dur.set_xlabel("duration (hours)")
    ax_dur.set_ylabel("fraction of cascades")
    ax_dur.set_title("Cascade durations (CDF)")

    fig.tight_layout()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(out, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return out
