"""Figure rendering tests: each plot lands on disk as a real PNG."""

import numpy as np
import pytest

from posecast.autodiff import ContractError
from posecast.data import Skeleton, Window
from posecast.figures import (
    plot_attention_heatmaps,
    plot_benchmark,
    plot_horizon_curves,
    plot_per_joint_error,
    plot_prediction_tracks,
    plot_training_curves,
)
from posecast.metrics import build_eval_report
from posecast.model import AttentionMap
from posecast.training import LogRow, TrainingLog

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def is_png(path):
    with open(path, "rb") as fh:
        return fh.read(8) == PNG_MAGIC


def sample_report():
    rng = np.random.default_rng(0)
    windows = [Window(rng.normal(size=(4, 6)), rng.normal(size=(5, 6)), None)
               for _ in range(3)]

    def noisy(frames):
        return np.repeat(frames[-1:], 5, axis=0) + 0.01

    predictors = {
        "model": noisy,
        "zero_velocity": lambda frames: np.repeat(frames[-1:], 5, axis=0),
    }
    return build_eval_report(predictors, windows, Skeleton(2, 3),
                             "positions_3d", 25.0, [80, 120, 200])


class TestTrainingCurves:
    def test_writes_png(self, tmp_path):
        log = TrainingLog(rows=[
            LogRow(step=i, lr=0.001 * i, loss_total=1.0 / i, loss_motion=0.8 / i,
                   loss_activity=0.2 / i,
                   eval_l1=0.5 / i if i % 2 == 0 else None)
            for i in range(1, 6)
        ])
        path = plot_training_curves(log, tmp_path / "train.png")
        assert is_png(path)

    def test_empty_log_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            plot_training_curves(TrainingLog(), tmp_path / "x.png")


class TestHorizonCurves:
    def test_writes_png(self, tmp_path):
        path = plot_horizon_curves(sample_report(), "mpjpe",
                                   tmp_path / "horizons.png")
        assert is_png(path)

    def test_unknown_metric_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            plot_horizon_curves(sample_report(), "nope", tmp_path / "x.png")


class TestPerJoint:
    def test_writes_png(self, tmp_path):
        path = plot_per_joint_error(sample_report(), "mpjpe",
                                    tmp_path / "joints.png")
        assert is_png(path)


class TestAttentionHeatmaps:
    def test_writes_png(self, tmp_path):
        rng = np.random.default_rng(1)

        def softmax_rows(raw):
            e = np.exp(raw - raw.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)

        maps = [AttentionMap("decoder", "self", layer, head,
                             softmax_rows(rng.normal(size=(4, 4))))
                for layer in range(2) for head in range(2)]
        maps += [AttentionMap("decoder", "encoder_decoder", 0, head,
                              softmax_rows(rng.normal(size=(4, 7))))
                 for head in range(2)]
        path = plot_attention_heatmaps(maps, tmp_path / "attn.png")
        assert is_png(path)

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            plot_attention_heatmaps([], tmp_path / "x.png")


class TestPredictionTracks:
    def test_writes_png(self, tmp_path):
        rng = np.random.default_rng(2)
        observed = rng.normal(size=(10, 6))
        target = rng.normal(size=(4, 6))
        predicted = target + 0.05
        path = plot_prediction_tracks(observed, target, predicted,
                                      tmp_path / "tracks.png", frame_rate=25.0)
        assert is_png(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            plot_prediction_tracks(np.zeros((5, 3)), np.zeros((2, 3)),
                                   np.zeros((3, 3)), tmp_path / "x.png")


class TestBenchmarkFigure:
    def test_writes_png(self, tmp_path):
        results = {
            "parallel": {"median_sps": 40.0, "min_sps": 35.0, "max_sps": 44.0},
            "stepwise": {"median_sps": 6.0, "min_sps": 5.0, "max_sps": 7.0},
        }
        path = plot_benchmark(results, tmp_path / "bench.png")
        assert is_png(path)

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            plot_benchmark({}, tmp_path / "x.png")
