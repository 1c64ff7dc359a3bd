"""Pose sequences, synthetic motion generation, normalization and file I/O.

A pose frame is a flat float64 vector of length N = num_joints *
features_per_joint; a sequence stacks T frames into a (T, N) array.
Two representations are supported: 3-D joint positions (3 features per
joint) and per-joint rotation matrices (9 features per joint, rows of
the 3x3 matrix concatenated).

Synthetic motion follows one law per activity class: every joint k and
axis a moves as

    rest[k, a] + amplitude * sin(2*pi*frequency*t + phase[k, a]) + drift[a]*t

plus white Gaussian noise, with t in seconds. Each class couples its own
frequency and drift so classes are separable from motion alone. For the
rotation representation the same law drives per-joint Euler angles
(kept well inside the gimbal-safe range) which are then converted to
matrices.

The on-disk container is a little-endian binary file starting with the
magic bytes ``POSE``; see ``save_poses`` for the layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

POSITIONS_3D = "positions_3d"
ROTATION_MATRICES = "rotation_matrices"
_REPRESENTATIONS = (POSITIONS_3D, ROTATION_MATRICES)

_FEATURES = {POSITIONS_3D: 3, ROTATION_MATRICES: 9}


class FormatError(ValueError):
    """A pose file is malformed. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class Skeleton:
    num_joints: int
    features_per_joint: int

    def __post_init__(self):
        if self.num_joints < 1:
            raise ValueError(f"skeleton needs at least one joint, got {self.num_joints}")
        if self.features_per_joint < 1:
            raise ValueError(
                f"features_per_joint must be positive, got {self.features_per_joint}"
            )

    @property
    def pose_dim(self) -> int:
        return self.num_joints * self.features_per_joint


@dataclass
class PoseSequence:
    """T frames of motion with enough metadata to interpret them."""

    frames: np.ndarray
    frame_rate: float
    skeleton: Skeleton
    representation: str = POSITIONS_3D

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be (T, N), got shape {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("a pose sequence needs at least one frame")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")
        if self.representation not in _REPRESENTATIONS:
            raise ValueError(
                f"representation must be one of {_REPRESENTATIONS}, "
                f"got {self.representation!r}"
            )
        if self.skeleton.features_per_joint != _FEATURES[self.representation]:
            raise ValueError(
                f"{self.representation} uses {_FEATURES[self.representation]} features "
                f"per joint, skeleton says {self.skeleton.features_per_joint}"
            )
        if self.frames.shape[1] != self.skeleton.pose_dim:
            raise ValueError(
                f"frame width {self.frames.shape[1]} does not match skeleton "
                f"pose dim {self.skeleton.pose_dim}"
            )
        if self.frame_rate <= 0:
            raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def pose_dim(self) -> int:
        return self.frames.shape[1]

    def last_frame(self) -> np.ndarray:
        return self.frames[-1]

    def joint_view(self) -> np.ndarray:
        """Frames reshaped to (T, num_joints, features_per_joint)."""
        return self.frames.reshape(self.num_frames, self.skeleton.num_joints,
                                   self.skeleton.features_per_joint)

    def with_frames(self, frames: np.ndarray) -> "PoseSequence":
        return PoseSequence(frames, self.frame_rate, self.skeleton,
                            self.representation)


@dataclass
class PoseDataset:
    """Sequences plus optional per-sequence activity labels."""

    sequences: list[PoseSequence]
    labels: list[int] | None = None
    num_classes: int = 0

    def __post_init__(self):
        if not self.sequences:
            raise ValueError("a dataset needs at least one sequence")
        first = self.sequences[0]
        for seq in self.sequences:
            if seq.pose_dim != first.pose_dim or seq.representation != first.representation:
                raise ValueError("all sequences must share skeleton and representation")
        if self.labels is not None:
            if len(self.labels) != len(self.sequences):
                raise ValueError(
                    f"{len(self.labels)} labels for {len(self.sequences)} sequences"
                )
            if self.num_classes < 1:
                self.num_classes = max(self.labels) + 1
            for lab in self.labels:
                if not (0 <= lab < self.num_classes):
                    raise ValueError(
                        f"label {lab} outside [0, {self.num_classes})"
                    )

    @property
    def skeleton(self) -> Skeleton:
        return self.sequences[0].skeleton

    @property
    def representation(self) -> str:
        return self.sequences[0].representation

    @property
    def frame_rate(self) -> float:
        return self.sequences[0].frame_rate


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class MotionLaw:
    """Per-class oscillation signature."""

    frequency: float
    amplitude: float
    drift: float
    phase: float = 0.0

    def __post_init__(self):
        if not np.isfinite([self.frequency, self.amplitude, self.drift,
                            self.phase]).all():
            raise ValueError("motion law parameters must be finite")
        if self.frequency < 0 or self.amplitude < 0:
            raise ValueError("frequency and amplitude must be non-negative")


def default_laws(num_classes: int) -> list[MotionLaw]:
    """Spread classes over frequency and drift so that no two classes
    share a (frequency, drift) pair."""
    return [
        MotionLaw(frequency=0.5 + 1.5 * c, amplitude=0.5, drift=0.05 * c,
                  phase=0.4 * c)
        for c in range(num_classes)
    ]


@dataclass
class SyntheticSpec:
    num_joints: int = 4
    representation: str = POSITIONS_3D
    num_classes: int = 2
    sequences_per_class: int = 50
    sequence_length: int = 60
    frame_rate: float = 25.0
    noise_sigma: float = 0.01
    seed: int = 0
    laws: list[MotionLaw] = field(default_factory=list)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.sequences_per_class < 1:
            raise ValueError("need at least one sequence per class")
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")
        if self.representation not in _REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not self.laws:
            self.laws = default_laws(self.num_classes)
        if len(self.laws) != self.num_classes:
            raise ValueError(
                f"{len(self.laws)} motion laws for {self.num_classes} classes"
            )
        signatures = {(law.frequency, law.drift) for law in self.laws}
        if len(signatures) != self.num_classes:
            raise ValueError("classes must differ in (frequency, drift)")


_AXIS_SHIFTS = np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])


def _joint_phases(law: MotionLaw, num_joints: int) -> np.ndarray:
    """Phase offsets (num_joints, 3): evenly staggered joints, axes a
    third of a cycle apart so trajectories are honestly 3-D."""
    per_joint = law.phase + 2.0 * np.pi * np.arange(num_joints) / num_joints
    return per_joint[:, np.newaxis] + _AXIS_SHIFTS[np.newaxis, :]


def _rest_pose(num_joints: int) -> np.ndarray:
    """A fixed chain along x at shoulder height; independent of class so
    classes are only separable through motion, not posture."""
    rest = np.zeros((num_joints, 3))
    rest[:, 0] = 0.3 * np.arange(num_joints)
    rest[:, 1] = 0.9
    return rest


def _angle_tracks(law: MotionLaw, num_joints: int, num_frames: int,
                  frame_rate: float, noise_sigma: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Shared sinusoid machinery: (T, K, 3) tracks of the motion law."""
    t = np.arange(num_frames)[np.newaxis, np.newaxis, :] / frame_rate
    phases = _joint_phases(law, num_joints)[:, :, np.newaxis]
    tracks = law.amplitude * np.sin(2.0 * np.pi * law.frequency * t + phases)
    tracks = tracks + law.drift * t
    if noise_sigma > 0:
        tracks = tracks + rng.normal(scale=noise_sigma, size=tracks.shape)
    return np.transpose(tracks, (2, 0, 1))


def generate_synthetic(spec: SyntheticSpec) -> PoseDataset:
    """Deterministic for a given spec: same seed, same dataset."""
    rng = np.random.default_rng(spec.seed)
    features = _FEATURES[spec.representation]
    skeleton = Skeleton(spec.num_joints, features)
    sequences: list[PoseSequence] = []
    labels: list[int] = []
    for class_index, law in enumerate(spec.laws):
        for _ in range(spec.sequences_per_class):
            # A random starting phase per sequence; the class signature
            # lives in frequency and drift, not in absolute phase.
            start = rng.uniform(0.0, 2.0 * np.pi)
            shifted = MotionLaw(law.frequency, law.amplitude, law.drift,
                                law.phase + start)
            tracks = _angle_tracks(shifted, spec.num_joints,
                                   spec.sequence_length, spec.frame_rate,
                                   spec.noise_sigma, rng)
            if spec.representation == POSITIONS_3D:
                frames = tracks + _rest_pose(spec.num_joints)[np.newaxis]
                frames = frames.reshape(spec.sequence_length, -1)
            else:
                frames = _angles_to_rotmat_frames(tracks)
            sequences.append(PoseSequence(frames, spec.frame_rate, skeleton,
                                          spec.representation))
            labels.append(class_index)
    return PoseDataset(sequences, labels, spec.num_classes)


# Euler angles stay inside (-pi/2, pi/2) for the middle axis when the
# law amplitude is scaled below; 0.45 keeps 0.5-amplitude laws safe.
_ANGLE_SCALE = np.array([1.0, 0.45, 1.0])


def _angles_to_rotmat_frames(tracks: np.ndarray) -> np.ndarray:
    from .metrics import euler_to_rotmat

    num_frames, num_joints, _ = tracks.shape
    frames = np.zeros((num_frames, num_joints * 9))
    for t in range(num_frames):
        for k in range(num_joints):
            alpha, beta, gamma = tracks[t, k] * _ANGLE_SCALE
            frames[t, k * 9:(k + 1) * 9] = euler_to_rotmat(alpha, beta, gamma).reshape(-1)
    return frames


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("stats must be matching 1-D vectors")
        if np.any(self.std <= 0):
            raise ValueError("std entries must be positive")


STD_FLOOR = 1e-8


def compute_stats(source) -> NormalizationStats:
    """Per-dimension mean and standard deviation over all frames of the
    training material. Dimensions that never move get their std floored
    at 1e-8 so normalization cannot divide by zero.

    Accepts a PoseDataset, a list of PoseSequence, or a list of arrays.
    """
    if isinstance(source, PoseDataset):
        arrays = [seq.frames for seq in source.sequences]
    else:
        arrays = [seq.frames if isinstance(seq, PoseSequence) else np.asarray(seq)
                  for seq in source]
    if not arrays:
        raise ValueError("compute_stats needs at least one sequence")
    stacked = np.concatenate(arrays, axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    return NormalizationStats(mean, np.maximum(std, STD_FLOOR))


def normalize(frames: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != stats.mean.shape[0]:
        raise ValueError(
            f"frame width {frames.shape[-1]} does not match stats width "
            f"{stats.mean.shape[0]}"
        )
    return (frames - stats.mean) / stats.std


def denormalize(frames: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != stats.mean.shape[0]:
        raise ValueError(
            f"frame width {frames.shape[-1]} does not match stats width "
            f"{stats.mean.shape[0]}"
        )
    return frames * stats.std + stats.mean


def center_on_joint(seq: PoseSequence, joint_index: int) -> PoseSequence:
    """Subtract one joint's trajectory from every joint, frame by frame.
    Positions only; rotation matrices have no meaningful origin."""
    if seq.representation != POSITIONS_3D:
        raise ValueError("center_on_joint applies to 3-D positions only")
    if not (0 <= joint_index < seq.skeleton.num_joints):
        raise ValueError(
            f"joint_index {joint_index} outside [0, {seq.skeleton.num_joints})"
        )
    joints = seq.joint_view().copy()
    joints -= joints[:, joint_index:joint_index + 1, :]
    return seq.with_frames(joints.reshape(seq.num_frames, -1))


# ---------------------------------------------------------------------------
# windowing


@dataclass(frozen=True)
class Window:
    input_frames: np.ndarray
    target_frames: np.ndarray
    label: int | None


def window_dataset(dataset: PoseDataset, input_len: int, target_len: int,
                   stride: int = 1) -> tuple[list[Window], int]:
    """Slide (input_len + target_len)-frame windows over every sequence.

    Returns the windows plus the number of sequences skipped for being
    shorter than one full window.
    """
    if input_len < 1 or target_len < 1:
        raise ValueError("input_len and target_len must be >= 1")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    span = input_len + target_len
    windows: list[Window] = []
    skipped = 0
    for index, seq in enumerate(dataset.sequences):
        if seq.num_frames < span:
            skipped += 1
            continue
        label = dataset.labels[index] if dataset.labels is not None else None
        for start in range(0, seq.num_frames - span + 1, stride):
            windows.append(Window(
                input_frames=seq.frames[start:start + input_len].copy(),
                target_frames=seq.frames[start + input_len:start + span].copy(),
                label=label,
            ))
    return windows, skipped


# ---------------------------------------------------------------------------
# binary pose container

_MAGIC = b"POSE"
_VERSION = 1
_REP_CODES = {POSITIONS_3D: 0, ROTATION_MATRICES: 1}
_REP_NAMES = {code: name for name, code in _REP_CODES.items()}


def save_poses(path, dataset: PoseDataset) -> None:
    """Write a dataset to the POSE container.

    Layout, all little-endian: magic ``POSE``; u32 version (1); f64
    frame rate; u8 representation code; u32 joints; u32 features per
    joint; u32 num_classes (0 when unlabeled); u32 sequence count; then
    per sequence an i32 label (-1 when unlabeled), u32 frame count and
    the (T, N) float64 frame block.
    """
    skeleton = dataset.skeleton
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<d", dataset.frame_rate))
        fh.write(struct.pack("<B", _REP_CODES[dataset.representation]))
        fh.write(struct.pack("<III", skeleton.num_joints,
                             skeleton.features_per_joint,
                             dataset.num_classes if dataset.labels is not None else 0))
        fh.write(struct.pack("<I", len(dataset.sequences)))
        for index, seq in enumerate(dataset.sequences):
            label = dataset.labels[index] if dataset.labels is not None else -1
            fh.write(struct.pack("<i", label))
            fh.write(struct.pack("<I", seq.num_frames))
            fh.write(seq.frames.astype("<f8").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    offset = fh.tell()
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(
            f"truncated file: wanted {count} bytes for {what}, got {len(data)}",
            offset,
        )
    return data


def load_poses(path) -> PoseDataset:
    """Read a POSE container back; inverse of :func:`save_poses`."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != _MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}", 0)
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        (frame_rate,) = struct.unpack("<d", _read_exact(fh, 8, "frame rate"))
        (rep_code,) = struct.unpack("<B", _read_exact(fh, 1, "representation"))
        if rep_code not in _REP_NAMES:
            raise FormatError(f"unknown representation code {rep_code}", 16)
        joints, features, num_classes = struct.unpack(
            "<III", _read_exact(fh, 12, "skeleton header"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "sequence count"))
        if count < 1:
            raise FormatError("file contains no sequences", 29)
        representation = _REP_NAMES[rep_code]
        try:
            skeleton = Skeleton(joints, features)
        except ValueError as err:
            raise FormatError(f"bad skeleton header: {err}", 17) from None
        pose_dim = skeleton.pose_dim
        sequences: list[PoseSequence] = []
        labels: list[int] = []
        any_label = False
        for _ in range(count):
            (label,) = struct.unpack("<i", _read_exact(fh, 4, "label"))
            (num_frames,) = struct.unpack("<I", _read_exact(fh, 4, "frame count"))
            offset = fh.tell()
            raw = _read_exact(fh, num_frames * pose_dim * 8, "frame block")
            frames = np.frombuffer(raw, dtype="<f8").reshape(num_frames, pose_dim)
            try:
                sequences.append(PoseSequence(frames.copy(), frame_rate, skeleton,
                                              representation))
            except ValueError as err:
                raise FormatError(f"bad sequence data: {err}", offset) from None
            labels.append(label)
            if label >= 0:
                any_label = True
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after last sequence", fh.tell() - 1)
    if any_label:
        if min(labels) < 0:
            raise FormatError("mix of labeled and unlabeled sequences", None)
        return PoseDataset(sequences, labels, num_classes)
    return PoseDataset(sequences, None, 0)


# ---------------------------------------------------------------------------
# plain-text import


def load_poses_csv(frames_path, frame_rate: float, num_joints: int,
                   representation: str = POSITIONS_3D,
                   labels_path=None) -> PoseDataset:
    """Import sequences from CSV: one frame per row, N comma-separated
    values, sequences separated by blank lines. An optional sidecar file
    carries one integer label per sequence."""
    if representation not in _REPRESENTATIONS:
        raise FormatError(f"unknown representation {representation!r}")
    features = _FEATURES[representation]
    skeleton = Skeleton(num_joints, features)
    pose_dim = skeleton.pose_dim
    sequences: list[PoseSequence] = []
    current: list[np.ndarray] = []

    def flush():
        if current:
            sequences.append(PoseSequence(np.array(current), frame_rate,
                                          skeleton, representation))
            current.clear()

    with open(frames_path, "r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                flush()
                continue
            try:
                values = np.array([float(v) for v in stripped.split(",")])
            except ValueError:
                raise FormatError(
                    f"line {line_number}: not a comma-separated float row"
                ) from None
            if values.shape[0] != pose_dim:
                raise FormatError(
                    f"line {line_number}: expected {pose_dim} values, "
                    f"got {values.shape[0]}"
                )
            current.append(values)
    flush()
    if not sequences:
        raise FormatError("no frames found in CSV file")
    labels = None
    num_classes = 0
    if labels_path is not None:
        with open(labels_path, "r", encoding="utf-8") as fh:
            raw = [line.strip() for line in fh if line.strip()]
        try:
            labels = [int(v) for v in raw]
        except ValueError:
            raise FormatError("labels file must hold one integer per line") from None
        if len(labels) != len(sequences):
            raise FormatError(
                f"{len(labels)} labels for {len(sequences)} sequences"
            )
        num_classes = max(labels) + 1
    return PoseDataset(sequences, labels, num_classes)
