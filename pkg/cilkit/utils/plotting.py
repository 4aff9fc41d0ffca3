"""
Vector-graphic plots of run reports (matplotlib, Agg backend)
"""

import json
import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from cilkit.errors import DataError  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed element ids and no date stamp keep SVG output stable between runs
matplotlib.rcParams["svg.hashsalt"] = "cilkit"
SVG_METADATA = {"Date": None}


def load_report(path):
    if not os.path.isfile(path):
        raise DataError(f"report not found: {path}")
    with open(path) as handle:
        report = json.load(handle)
    if "stages" not in report or "strategies" not in report:
        raise DataError(f"{path}: not a run report")
    return report


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    logger.debug(f"Wrote plot {path}")
    return path


def plot_accuracy_curves(report, path):
    """A_b against classes seen, one line per strategy"""
    stages = report["stages"]
    seen = [s["classes_seen"] for s in stages]
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in report["strategies"]:
        ax.plot(seen, [100.0 * s["accuracies"][name] for s in stages], marker="o", label=name)
    ax.set_xlabel("Number of classes")
    ax.set_ylabel("Top-1 accuracy (%)")
    ax.set_xticks(seen)
    ax.grid(True, alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_selection_accuracy(report, path):
    stages = report["stages"]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([str(s["stage"]) for s in stages], [100.0 * s["selection_accuracy"] for s in stages])
    ax.set_xlabel("Stage")
    ax.set_ylabel("Adapter selection accuracy (%)")
    return _save(fig, path)


def plot_entropy_matrix(pilot, path):
    """Mean entropy of adapter i (rows) on task b test data (columns)"""
    fig, ax = plt.subplots(figsize=(5, 4))
    image = ax.imshow(pilot["mean_entropy"], cmap="viridis")
    ax.set_xlabel("Test task")
    ax.set_ylabel("Adapter")
    fig.colorbar(image, ax=ax, label="Mean entropy (nats)")
    return _save(fig, path)


def plot_report(report_path, output_dir=None):
    """Write every plot for one report; returns the written paths"""
    report = load_report(report_path)
    output_dir = output_dir or os.path.join(os.path.dirname(os.path.abspath(report_path)), "plots")
    paths = [
        plot_accuracy_curves(report, os.path.join(output_dir, "accuracy.svg")),
        plot_selection_accuracy(report, os.path.join(output_dir, "selection.svg")),
    ]
    pilot_path = os.path.join(os.path.dirname(os.path.abspath(report_path)), "pilot.json")
    if os.path.isfile(pilot_path):
        with open(pilot_path) as handle:
            paths.append(plot_entropy_matrix(json.load(handle), os.path.join(output_dir, "entropy.svg")))
    return paths
