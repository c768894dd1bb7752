"""
Figures for a finished run directory.

Reads predictions.npz (truth and pred, each M x T) and diagnostics.npz
(A_d_block{b} and H_ce_block{b} matrices) and writes, next to them,

    overlay_dim{i}.svg / .csv    truth against prediction for dimension i
    series.csv                   index, truth and pred for every dimension
    heatmap_{A_d,H_ce}_block{b}.svg / .csv
"""
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from gym import logger  # noqa: E402

from caformer.errors import ArtifactError  # noqa: E402

TRUTH_COLOR = "tab:blue"
PRED_COLOR = "tab:orange"

plt.rcParams["svg.hashsalt"] = "caformer"


def _load(path, *keys):
    if not os.path.exists(path):
        raise ArtifactError("missing run artifact %s" % path)
    with np.load(path, allow_pickle=False) as archive:
        missing = [k for k in keys if k not in archive.files]
        if missing:
            raise ArtifactError("%s lacks %s" % (path, ", ".join(missing)))
        return {name: archive[name] for name in archive.files}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_overlay(index, truth, pred, title, path):
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(index, truth, color=TRUTH_COLOR, label="ground truth")
    ax.plot(index, pred, color=PRED_COLOR, label="prediction")
    ax.set_title(title)
    ax.set_xlabel("step")
    ax.legend(loc="upper left")
    fig.tight_layout()
    _save(fig, path)


def plot_heatmap(matrix, title, path):
    """Zero cells map to the bottom of the colour scale."""
    fig, ax = plt.subplots(figsize=(4, 4))
    mesh = ax.pcolormesh(matrix, cmap="viridis", vmin=0.0, vmax=max(float(matrix.max()), 1e-12))
    ax.invert_yaxis()
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.colorbar(mesh, ax=ax)
    _save(fig, path)


def emit_plots(run_dir, dim_names=None):
    """Write every overlay and heatmap for run_dir; returns the written paths."""
    predictions = _load(os.path.join(run_dir, "predictions.npz"), "truth", "pred")
    diagnostics = _load(os.path.join(run_dir, "diagnostics.npz"))
    truth, pred = np.atleast_2d(predictions["truth"]), np.atleast_2d(predictions["pred"])
    if truth.shape != pred.shape:
        raise ArtifactError("truth shape %s differs from prediction shape %s" % (truth.shape, pred.shape))
    M, T = truth.shape
    names = list(dim_names) if dim_names else ["dim%d" % i for i in range(M)]
    index = predictions.get("index", np.arange(T))

    written = []
    columns = {"index": index}
    for i in range(M):
        frame = pd.DataFrame({"index": index, "truth": truth[i], "pred": pred[i]})
        csv_path = os.path.join(run_dir, "overlay_dim%d.csv" % i)
        frame.to_csv(csv_path, index=False)
        svg_path = os.path.join(run_dir, "overlay_dim%d.svg" % i)
        plot_overlay(index, truth[i], pred[i], names[i], svg_path)
        written += [csv_path, svg_path]
        columns["truth_%s" % names[i]] = truth[i]
        columns["pred_%s" % names[i]] = pred[i]
    series_path = os.path.join(run_dir, "series.csv")
    pd.DataFrame(columns).to_csv(series_path, index=False)
    written.append(series_path)

    for name in sorted(diagnostics):
        matrix = np.asarray(diagnostics[name], dtype=np.float64)
        base = os.path.join(run_dir, "heatmap_%s" % name)
        pd.DataFrame(matrix).to_csv(base + ".csv", index=False, header=False)
        plot_heatmap(matrix, name.replace("_block", ", block "), base + ".svg")
        written += [base + ".csv", base + ".svg"]
    logger.info("wrote %d plot files to %s", len(written), run_dir)
    return written
