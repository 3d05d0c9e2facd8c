"""Figure emission from run artifacts.

All figures are written as self-contained SVG so they need no display and
diff cleanly. Inputs are the CSV artifacts a run leaves behind: per-slot
episode traces, per-replica training logs, and delivery-time tables.
"""
import csv
import logging
from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

_LOG = logging.getLogger("wra.plots")

KINDS = ("rate_trace", "learning_curve", "cdf")


def _read_columns(path):
    """CSV with a header row -> dict of float column arrays, or None if the
    file holds no data rows.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        rows = [r for r in reader if r]
    if header is None or not rows:
        return None
    return {name: np.array([float(r[i]) for r in rows], dtype=float)
            for i, name in enumerate(header)}


def delivery_time_cdf(times_ms, total: int):
    """Empirical CDF over link-episodes. times_ms holds delivery slots with
    -1 for missed deadlines; the curve is normalized by the full population,
    so it tops out at the delivery rate rather than at 1.
    """
    times_ms = np.asarray(times_ms, dtype=float)
    if total <= 0:
        raise ValueError("total must be positive")
    delivered = np.sort(times_ms[times_ms >= 0.0])
    return delivered, np.arange(1, delivered.size + 1) / total


def _plot_rate_trace(cols, path: Path, out_dir: Path) -> Path:
    links = np.unique(cols["link_id"]).astype(int)
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for k in links:
        sel = cols["link_id"] == k
        order = np.argsort(cols["slot"][sel])
        ax.plot(cols["slot"][sel][order] + 1,
                cols["v2v_rate"][sel][order] / 1e6,
                marker=".", label=f"link {k}")
    ax.set_xlabel("time (ms)")
    ax.set_ylabel("V2V rate (Mb/s)")
    ax.legend()
    ax.grid(alpha=0.3)
    target = out_dir / f"{path.stem}-rate_trace.svg"
    fig.tight_layout()
    fig.savefig(target)
    plt.close(fig)
    return target


def _episode_rewards(cols):
    episodes = np.unique(cols["episode"])
    rewards = np.array([cols["reward"][cols["episode"] == e].mean()
                        for e in episodes])
    return episodes, rewards


def _plot_learning_curve(series, out_dir: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for name, (episodes, rewards) in series.items():
        ax.plot(episodes, rewards, alpha=0.6, label=name)
    # mean over the episode grid common to every replica
    common = None
    for episodes, _ in series.values():
        s = set(episodes.tolist())
        common = s if common is None else common & s
    if common and len(series) > 1:
        grid = np.array(sorted(common))
        stack = []
        for episodes, rewards in series.values():
            idx = np.searchsorted(episodes, grid)
            stack.append(rewards[idx])
        ax.plot(grid, np.mean(stack, axis=0), color="k", linewidth=2,
                label="mean")
    ax.set_xlabel("episode")
    ax.set_ylabel("reward")
    ax.legend()
    ax.grid(alpha=0.3)
    target = out_dir / "learning_curve.svg"
    fig.tight_layout()
    fig.savefig(target)
    plt.close(fig)
    return target


def _plot_cdf(times, total, out_dir: Path) -> Path:
    x, y = delivery_time_cdf(times, total)
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    if x.size:
        ax.step(np.concatenate([[0.0], x]), np.concatenate([[0.0], y]),
                where="post")
    ax.set_xlabel("delivery time (ms)")
    ax.set_ylabel("CDF")
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    target = out_dir / "delivery_cdf.svg"
    fig.tight_layout()
    fig.savefig(target)
    plt.close(fig)
    return target


def emit_plots(files, kind: str, out=None):
    """Render one figure kind from CSV artifacts and return the written
    paths. files may be a single path or a sequence; empty or data-free
    input is a warning-level no-op.

    rate_trace      episode trace CSVs, one figure per file, one labeled
                    series per link
    learning_curve  training log CSVs, one series per file plus their mean
    cdf             delivery-time CSVs pooled into one empirical CDF
    """
    if kind not in KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {KINDS}")
    if isinstance(files, (str, Path)):
        files = [files]
    files = [Path(f) for f in files]
    if not files:
        _LOG.warning("emit_plots(%s): no input files, nothing to do", kind)
        return []
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f)
    out_dir = Path(out) if out is not None else files[0].parent
    out_dir.mkdir(parents=True, exist_ok=True)

    loaded = {}
    for f in files:
        cols = _read_columns(f)
        if cols is None:
            _LOG.warning("emit_plots(%s): %s has no data rows, skipping",
                         kind, f)
        else:
            loaded[f] = cols
    if not loaded:
        _LOG.warning("emit_plots(%s): no data in any input, nothing to do",
                     kind)
        return []

    if kind == "rate_trace":
        return [_plot_rate_trace(cols, f, out_dir)
                for f, cols in loaded.items()]
    if kind == "learning_curve":
        series = {f.stem: _episode_rewards(cols)
                  for f, cols in loaded.items()}
        return [_plot_learning_curve(series, out_dir)]
    times = np.concatenate([cols["delivery_ms"] for cols in loaded.values()])
    return [_plot_cdf(times, times.size, out_dir)]
