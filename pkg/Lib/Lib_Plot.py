import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

PLOT_FILES = ("trajectories.svg", "components.svg", "errors.svg", "global.svg")

# Fixed salt and no date metadata keep SVG output reproducible
matplotlib.rcParams["svg.hashsalt"] = "raft-formation"
SVG_METADATA = {"Date": None}


def _series(record, table):
    """agent -> (frames, values) from a per-frame agent dict list."""
    series = {}
    for frame, values in enumerate(table):
        for agent, value in values.items():
            frames, points = series.setdefault(agent, ([], []))
            frames.append(frame)
            points.append(value)
    return dict(sorted(series.items()))


def plot_trajectories(record, out_path):
    fig, ax = plt.subplots(figsize=(6, 6))
    for agent, (_, points) in _series(record, record.trajectories).items():
        xs = [p.x for p in points]
        ys = [p.y for p in points]
        ax.plot(xs, ys, linewidth=1.2, label=f"agent {agent}")
        ax.plot(xs[-1], ys[-1], "o", color=ax.lines[-1].get_color())
    ax.set_title(f"Scenario {record.label}: trajectories")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_aspect("equal", adjustable="datalim")
    ax.grid(True, alpha=0.25)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)


def plot_components(record, out_path):
    """x(t) above y(t) for every agent, sharing the frame axis."""
    fig, (ax_x, ax_y) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    for agent, (frames, points) in _series(record, record.trajectories).items():
        line, = ax_x.plot(frames, [p.x for p in points], linewidth=1.2, label=f"agent {agent}")
        ax_y.plot(frames, [p.y for p in points], linewidth=1.2, color=line.get_color())
    ax_x.set_title(f"Scenario {record.label}: position components")
    ax_x.set_ylabel("x")
    ax_y.set_ylabel("y")
    ax_y.set_xlabel("frame")
    for ax in (ax_x, ax_y):
        ax.grid(True, alpha=0.25)
    ax_x.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)


def plot_errors(record, out_path):
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for agent, (frames, values) in _series(record, record.per_agent_error).items():
        ax.plot(frames, values, linewidth=1.2, label=f"agent {agent}")
    ax.set_title(f"Scenario {record.label}: distance to goal")
    ax.set_xlabel("frame")
    ax.set_ylabel("error")
    ax.grid(True, alpha=0.25)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)


def plot_global(record, out_path):
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(range(len(record.global_error)), record.global_error, linewidth=1.4)
    if any(v > 0 for v in record.global_error):
        ax.set_yscale("symlog", linthresh=1e-6)
    ax.set_title(f"Scenario {record.label}: global formation error")
    ax.set_xlabel("frame")
    ax.set_ylabel("E")
    ax.grid(True, alpha=0.25)
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)


def write_plots(record, out_dir):
    """Render the SVG charts named in PLOT_FILES; returns their paths."""
    paths = [os.path.join(out_dir, name) for name in PLOT_FILES]
    for plot, path in zip((plot_trajectories, plot_components, plot_errors, plot_global), paths):
        plot(record, path)
        logger.debug("Plotted %s", path)
    return paths
