import numpy as np
import pandas as pd
import pytest
from gym.utils import seeding

from caformer.errors import ArtifactError
from caformer.plots import emit_plots


def _run_dir(tmp_path, M=4, T=20):
    rng, _ = seeding.np_random(0)
    truth = rng.normal(size=(M, T))
    np.savez(tmp_path / "predictions.npz", truth=truth, pred=truth + 0.1, index=100 + np.arange(T))
    h_ce = np.tril(rng.uniform(size=(5, 5)))
    np.savez(tmp_path / "diagnostics.npz", A_d_block0=np.full((M, M), 1.0 / M), H_ce_block0=h_ce)
    return tmp_path


def test_one_overlay_per_dimension(tmp_path):
    run = _run_dir(tmp_path)
    emit_plots(str(run), dim_names=["a", "b", "c", "d"])
    assert len(list(run.glob("overlay_dim*.svg"))) == 4
    assert len(list(run.glob("overlay_dim*.csv"))) == 4
    overlay = pd.read_csv(run / "overlay_dim2.csv")
    assert list(overlay.columns) == ["index", "truth", "pred"]
    assert overlay["index"].iloc[0] == 100


def test_series_csv_has_index_truth_and_pred_per_dimension(tmp_path):
    run = _run_dir(tmp_path, M=3)
    emit_plots(str(run))
    series = pd.read_csv(run / "series.csv")
    assert series.shape == (20, 1 + 2 * 3)
    assert "truth_dim0" in series.columns and "pred_dim2" in series.columns


def test_heatmaps_keep_the_causal_mask(tmp_path):
    run = _run_dir(tmp_path)
    written = emit_plots(str(run))
    assert str(run / "heatmap_H_ce_block0.svg") in written
    assert (run / "heatmap_A_d_block0.svg").exists()
    matrix = np.loadtxt(run / "heatmap_H_ce_block0.csv", delimiter=",")
    assert (np.triu(matrix, 1) == 0.0).all()


def test_plots_are_reproducible(tmp_path):
    runs = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        runs.append(_run_dir(tmp_path / name))
        emit_plots(str(runs[-1]))
    assert (runs[0] / "overlay_dim0.svg").read_bytes() == (runs[1] / "overlay_dim0.svg").read_bytes()


def test_missing_artifacts(tmp_path):
    with pytest.raises(ArtifactError):
        emit_plots(str(tmp_path))
    np.savez(tmp_path / "predictions.npz", truth=np.zeros((2, 5)))
    np.savez(tmp_path / "diagnostics.npz")
    with pytest.raises(ArtifactError, match="pred"):
        emit_plots(str(tmp_path))


def test_mismatched_shapes(tmp_path):
    np.savez(tmp_path / "predictions.npz", truth=np.zeros((2, 5)), pred=np.zeros((2, 4)))
    np.savez(tmp_path / "diagnostics.npz")
    with pytest.raises(ArtifactError):
        emit_plots(str(tmp_path))
