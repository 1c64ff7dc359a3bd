"""Forecast quality metrics and the evaluation report.

Rotation conventions: a per-joint rotation matrix R factors as
R = Rz(alpha) @ Ry(beta) @ Rx(gamma) (intrinsic z-y-x). The extraction
returns alpha, gamma in [-pi, pi] and beta in [-pi/2, pi/2]; at the
gimbal singularity (|R[2,0]| = 1) gamma is pinned to zero and the
remaining freedom folded into alpha.

Positions are measured with the mean per-joint position error and with
mean average precision at a distance threshold (a joint counts as a hit
when its Euclidean error is strictly below the threshold). Rotations
are measured with the Euclidean norm of the stacked per-joint Euler
angle difference vector. All evaluation paths run the reference
zero-velocity predictor through exactly the same code as the model so
the two stay comparable to the last bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError
from .data import (
    POSITIONS_3D,
    ROTATION_MATRICES,
    PoseSequence,
    Skeleton,
    Window,
)

ORTHONORMAL_TOL = 1e-6
_GIMBAL_EDGE = 1.0 - 1e-9


def euler_to_rotmat(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """Compose R = Rz(alpha) @ Ry(beta) @ Rx(gamma)."""
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cg, -sg], [0.0, sg, cg]])
    return rz @ ry @ rx


def rotmat_to_euler(matrix: np.ndarray) -> tuple[float, float, float]:
    """Invert :func:`euler_to_rotmat`. Rejects non-rotation input."""
    r = np.asarray(matrix, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"rotation matrix must be 3x3, got {r.shape}")
    residual = np.abs(r.T @ r - np.eye(3)).max()
    if residual > ORTHONORMAL_TOL:
        raise ValueError(
            f"matrix is not orthonormal (max residual {residual:.3e})"
        )
    det = float(np.linalg.det(r))
    if abs(det - 1.0) > ORTHONORMAL_TOL:
        raise ValueError(f"matrix is not a proper rotation (det {det:.6f})")
    sin_beta = -r[2, 0]
    if abs(sin_beta) >= _GIMBAL_EDGE:
        # cos(beta) vanishes: alpha and gamma are degenerate. Pin gamma.
        beta = np.copysign(np.pi / 2.0, sin_beta)
        alpha = np.arctan2(-r[0, 1], r[1, 1])
        gamma = 0.0
    else:
        beta = np.arcsin(np.clip(sin_beta, -1.0, 1.0))
        alpha = np.arctan2(r[1, 0], r[0, 0])
        gamma = np.arctan2(r[2, 1], r[2, 2])
    return float(alpha), float(beta), float(gamma)


def _euler_vector(frames: np.ndarray, num_joints: int) -> np.ndarray:
    """(T, 9K) rotation frames to (T, 3K) stacked Euler angles."""
    num_frames = frames.shape[0]
    out = np.zeros((num_frames, 3 * num_joints))
    for t in range(num_frames):
        for k in range(num_joints):
            block = frames[t, k * 9:(k + 1) * 9].reshape(3, 3)
            out[t, k * 3:(k + 1) * 3] = rotmat_to_euler(block)
    return out


def _as_frames(seq) -> np.ndarray:
    if isinstance(seq, PoseSequence):
        return seq.frames
    return np.asarray(seq, dtype=np.float64)


def _check_same_shape(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ContractError(
            f"prediction shape {pred.shape} does not match ground truth {gt.shape}"
        )


def euler_angle_error(pred, gt, num_joints: int | None = None) -> np.ndarray:
    """Per-frame Euclidean norm of the stacked Euler-angle difference.

    Inputs are rotation-matrix sequences (PoseSequence or (T, 9K)
    arrays). Returns one error value per frame.
    """
    for seq in (pred, gt):
        if isinstance(seq, PoseSequence) and seq.representation != ROTATION_MATRICES:
            raise ContractError(
                f"euler_angle_error needs rotation matrices, got {seq.representation}"
            )
    pred_frames, gt_frames = _as_frames(pred), _as_frames(gt)
    _check_same_shape(pred_frames, gt_frames)
    if num_joints is None:
        if isinstance(pred, PoseSequence):
            num_joints = pred.skeleton.num_joints
        else:
            if pred_frames.shape[1] % 9 != 0:
                raise ContractError(
                    f"rotation frames need 9 values per joint, got width "
                    f"{pred_frames.shape[1]}"
                )
            num_joints = pred_frames.shape[1] // 9
    diff = _euler_vector(pred_frames, num_joints) - _euler_vector(gt_frames, num_joints)
    return np.linalg.norm(diff, axis=1)


def _joint_distances(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """(T, 3K) position frames to (T, K) per-joint Euclidean errors."""
    if pred.shape[1] % 3 != 0:
        raise ContractError(
            f"position frames need 3 values per joint, got width {pred.shape[1]}"
        )
    num_joints = pred.shape[1] // 3
    delta = (pred - gt).reshape(pred.shape[0], num_joints, 3)
    return np.linalg.norm(delta, axis=2)


def mpjpe(pred, gt) -> tuple[np.ndarray, float]:
    """Mean per-joint position error: per frame and averaged overall."""
    for seq in (pred, gt):
        if isinstance(seq, PoseSequence) and seq.representation != POSITIONS_3D:
            raise ContractError(
                f"mpjpe needs 3-D positions, got {seq.representation}"
            )
    pred_frames, gt_frames = _as_frames(pred), _as_frames(gt)
    _check_same_shape(pred_frames, gt_frames)
    per_frame = _joint_distances(pred_frames, gt_frames).mean(axis=1)
    return per_frame, float(per_frame.mean())


@dataclass
class MapResult:
    overall: float
    per_frame: np.ndarray
    per_joint: np.ndarray
    threshold: float


def map_at_threshold(pred, gt, threshold: float = 0.10) -> MapResult:
    """Fraction of joint predictions whose position error is strictly
    below the threshold, overall plus per-frame and per-joint views."""
    if threshold <= 0:
        raise ContractError(f"threshold must be positive, got {threshold}")
    for seq in (pred, gt):
        if isinstance(seq, PoseSequence) and seq.representation != POSITIONS_3D:
            raise ContractError(
                f"map_at_threshold needs 3-D positions, got {seq.representation}"
            )
    pred_frames, gt_frames = _as_frames(pred), _as_frames(gt)
    _check_same_shape(pred_frames, gt_frames)
    hits = _joint_distances(pred_frames, gt_frames) < threshold
    return MapResult(
        overall=float(hits.mean()),
        per_frame=hits.mean(axis=1),
        per_joint=hits.mean(axis=0),
        threshold=threshold,
    )


def l1_error(pred, gt) -> np.ndarray:
    """Per-frame mean absolute error over all pose dimensions."""
    pred_frames, gt_frames = _as_frames(pred), _as_frames(gt)
    _check_same_shape(pred_frames, gt_frames)
    return np.abs(pred_frames - gt_frames).mean(axis=1)


def zero_velocity_predict(seq, target_len: int):
    """Repeat the last observed frame; the baseline every forecast must
    beat. Preserves PoseSequence metadata when given one."""
    if target_len < 1:
        raise ContractError(f"target_len must be >= 1, got {target_len}")
    frames = _as_frames(seq)
    if frames.shape[0] < 1:
        raise ContractError("zero_velocity_predict needs at least one input frame")
    prediction = np.repeat(frames[-1:], target_len, axis=0)
    if isinstance(seq, PoseSequence):
        return seq.with_frames(prediction)
    return prediction


def classification_accuracy(logits: np.ndarray, labels) -> float:
    """Argmax accuracy; ties resolve to the lowest class index."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ContractError(
            f"logits {logits.shape} do not pair with {labels.shape} labels"
        )
    if logits.shape[0] == 0:
        raise ContractError("classification_accuracy needs at least one sample")
    predicted = np.argmax(logits, axis=1)
    return float((predicted == labels).mean())


def horizon_to_frame(horizon_ms: float, frame_rate: float) -> int:
    """Millisecond horizon to 1-based target frame index."""
    frame = int(round(horizon_ms * frame_rate / 1000.0))
    if frame < 1:
        raise ContractError(
            f"horizon {horizon_ms} ms is below one frame at {frame_rate} fps"
        )
    return frame


# ---------------------------------------------------------------------------
# evaluation report


@dataclass
class EvalReport:
    """Per-horizon metric tables for one or more predictors.

    ``metrics[predictor][metric][horizon_ms]`` holds the value at that
    horizon's frame; ``aggregates`` averages each metric over every
    target frame; ``per_joint`` averages over frames joint by joint.
    """

    horizons_ms: list[int]
    frame_rate: float
    representation: str
    num_windows: int
    metrics: dict[str, dict[str, dict[int, float]]]
    aggregates: dict[str, dict[str, float]]
    per_joint: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    accuracy: float | None = None

    def predictor_names(self) -> list[str]:
        return list(self.metrics.keys())

    def metric_names(self) -> list[str]:
        first = next(iter(self.metrics.values()))
        return list(first.keys())

    def to_csv(self, path) -> None:
        """Rows are horizons (plus an aggregate row), columns are
        predictor/metric pairs."""
        names = self.predictor_names()
        metric_names = self.metric_names()
        header = ["horizon_ms"]
        for name in names:
            for metric in metric_names:
                header.append(f"{name}.{metric}")
        lines = [",".join(header)]
        for horizon in self.horizons_ms:
            row = [str(horizon)]
            for name in names:
                for metric in metric_names:
                    row.append(f"{self.metrics[name][metric][horizon]:.12g}")
            lines.append(",".join(row))
        row = ["all"]
        for name in names:
            for metric in metric_names:
                row.append(f"{self.aggregates[name][metric]:.12g}")
        lines.append(",".join(row))
        if self.accuracy is not None:
            lines.append(f"accuracy,{self.accuracy:.12g}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    def metric_table_csv(self, metric: str, path) -> None:
        """One metric as a compact table: a row per predictor, a column
        per horizon plus the all-frame aggregate."""
        header = ["predictor"] + [f"{h}ms" for h in self.horizons_ms] + ["all"]
        lines = [",".join(header)]
        for name in self.predictor_names():
            row = [name]
            row += [f"{self.metrics[name][metric][h]:.12g}" for h in self.horizons_ms]
            row.append(f"{self.aggregates[name][metric]:.12g}")
            lines.append(",".join(row))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    def per_joint_csv(self, path) -> None:
        lines = ["predictor,metric,joint,value"]
        for name, tables in self.per_joint.items():
            for metric, values in tables.items():
                for joint, value in enumerate(values):
                    lines.append(f"{name},{metric},{joint},{value:.12g}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def metrics_for_representation(representation: str) -> list[str]:
    if representation == POSITIONS_3D:
        return ["l1", "mpjpe", "map"]
    return ["l1", "euler"]


def build_eval_report(
    predictors: dict,
    windows: list[Window],
    skeleton: Skeleton,
    representation: str,
    frame_rate: float,
    horizons_ms: list[int],
    threshold: float = 0.10,
    classifier=None,
    labels: list[int] | None = None,
) -> EvalReport:
    """Evaluate predictors over windows.

    Each predictor maps input frames (T, N) to predicted frames
    (T', N), both in raw data space. Horizons beyond the target length
    are rejected. When ``classifier`` and labels are present, argmax
    accuracy over all windows is included.
    """
    if not windows:
        raise ContractError("evaluation needs at least one window")
    if not horizons_ms:
        raise ContractError("evaluation needs at least one horizon")
    horizons_ms = sorted(int(h) for h in horizons_ms)
    target_len = windows[0].target_frames.shape[0]
    frame_of = {}
    for horizon in horizons_ms:
        frame = horizon_to_frame(horizon, frame_rate)
        if frame > target_len:
            raise ContractError(
                f"horizon {horizon} ms needs frame {frame} but targets have "
                f"{target_len} frames at {frame_rate} fps"
            )
        frame_of[horizon] = frame
    metric_names = metrics_for_representation(representation)
    num_joints = skeleton.num_joints

    per_frame_sums = {
        name: {metric: np.zeros(target_len) for metric in metric_names}
        for name in predictors
    }
    per_joint_sums = {
        name: {metric: np.zeros(num_joints)
               for metric in metric_names if metric != "l1"}
        for name in predictors
    }
    logits_rows = []
    label_rows = []

    for window in windows:
        gt = window.target_frames
        for name, predictor in predictors.items():
            pred = np.asarray(predictor(window.input_frames), dtype=np.float64)
            _check_same_shape(pred, gt)
            per_frame_sums[name]["l1"] += l1_error(pred, gt)
            if representation == POSITIONS_3D:
                distances = _joint_distances(pred, gt)
                per_frame_sums[name]["mpjpe"] += distances.mean(axis=1)
                per_joint_sums[name]["mpjpe"] += distances.mean(axis=0)
                hits = distances < threshold
                per_frame_sums[name]["map"] += hits.mean(axis=1)
                per_joint_sums[name]["map"] += hits.mean(axis=0)
            else:
                pred_euler = _euler_vector(pred, num_joints)
                gt_euler = _euler_vector(gt, num_joints)
                diff = pred_euler - gt_euler
                per_frame_sums[name]["euler"] += np.linalg.norm(diff, axis=1)
                joint_norms = np.linalg.norm(
                    diff.reshape(target_len, num_joints, 3), axis=2)
                per_joint_sums[name]["euler"] += joint_norms.mean(axis=0)
        if classifier is not None and labels is not None:
            logits_rows.append(np.asarray(classifier(window.input_frames)).reshape(-1))

    count = float(len(windows))
    metrics_out: dict[str, dict[str, dict[int, float]]] = {}
    aggregates: dict[str, dict[str, float]] = {}
    per_joint_out: dict[str, dict[str, np.ndarray]] = {}
    for name in predictors:
        metrics_out[name] = {}
        aggregates[name] = {}
        per_joint_out[name] = {}
        for metric in metric_names:
            mean_per_frame = per_frame_sums[name][metric] / count
            metrics_out[name][metric] = {
                horizon: float(mean_per_frame[frame_of[horizon] - 1])
                for horizon in horizons_ms
            }
            aggregates[name][metric] = float(mean_per_frame.mean())
        for metric, sums in per_joint_sums[name].items():
            per_joint_out[name][metric] = sums / count

    accuracy = None
    if classifier is not None and labels is not None:
        label_rows = list(labels)
        if len(label_rows) != len(logits_rows):
            raise ContractError(
                f"{len(label_rows)} labels for {len(logits_rows)} classified windows"
            )
        accuracy = classification_accuracy(np.stack(logits_rows), label_rows)

    return EvalReport(
        horizons_ms=horizons_ms,
        frame_rate=frame_rate,
        representation=representation,
        num_windows=len(windows),
        metrics=metrics_out,
        aggregates=aggregates,
        per_joint=per_joint_out,
        accuracy=accuracy,
    )
