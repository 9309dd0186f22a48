"""Pose records, the JSONL dataset format, preprocessing and the synthetic
two-mode dataset.

Record file: one JSON object per line with keys ``id``, ``pose2d``,
``pose3d``, ``camera_frame_pose3d``, ``mask``, ``subject``, ``action`` and,
after preprocessing, ``scale2d``. Pose arrays are flat and joint-major;
absent values are ``null``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .skeleton import (GeometryError, Skeleton, bone_lengths, builtin_skeleton,
                       procrustes_align, root_center)

log = logging.getLogger(__name__)

RECORD_KEYS = ("id", "pose2d", "pose3d", "camera_frame_pose3d", "mask", "subject", "action", "scale2d")


class DataError(ValueError):
    pass


@dataclass
class PoseRecord:
    id: str
    pose2d: Optional[np.ndarray] = None
    pose3d: Optional[np.ndarray] = None
    camera_frame_pose3d: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    subject: Optional[str] = None
    action: Optional[str] = None
    scale2d: Optional[float] = None

    def weights(self, c: int) -> np.ndarray:
        return np.ones(c) if self.mask is None else self.mask

    def to_json(self) -> dict:
        out = {}
        for k in RECORD_KEYS:
            v = getattr(self, k)
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def _array(value, n: int, what: str, lineno: int) -> Optional[np.ndarray]:
    if value is None:
        return None
    if not isinstance(value, list):
        raise DataError(f"line {lineno}: {what} must be a list of numbers")
    try:
        a = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise DataError(f"line {lineno}: {what} must be a list of numbers") from None
    if a.ndim != 1 or a.size != n:
        raise DataError(f"line {lineno}: {what} has {a.size} values, expected {n}")
    if not np.all(np.isfinite(a)):
        raise DataError(f"line {lineno}: {what} has non-finite values")
    return a


def parse_record(obj: dict, sk: Skeleton, lineno: int = 0) -> PoseRecord:
    if not isinstance(obj, dict):
        raise DataError(f"line {lineno}: record must be a JSON object")
    unknown = set(obj) - set(RECORD_KEYS)
    if unknown:
        raise DataError(f"line {lineno}: unknown keys {sorted(unknown)}")
    if "id" not in obj:
        raise DataError(f"line {lineno}: missing id")
    c = sk.joint_count
    rec = PoseRecord(
        id=str(obj["id"]),
        pose2d=_array(obj.get("pose2d"), 2 * c, "pose2d", lineno),
        pose3d=_array(obj.get("pose3d"), 3 * c, "pose3d", lineno),
        camera_frame_pose3d=_array(obj.get("camera_frame_pose3d"), 3 * c, "camera_frame_pose3d", lineno),
        mask=_array(obj.get("mask"), c, "mask", lineno),
        subject=obj.get("subject"),
        action=obj.get("action"),
        scale2d=obj.get("scale2d"),
    )
    if rec.pose2d is None and rec.pose3d is None:
        raise DataError(f"line {lineno}: record needs pose2d or pose3d")
    if rec.mask is not None and (np.any(rec.mask < 0) or np.any(rec.mask > 1)):
        raise DataError(f"line {lineno}: mask values must lie in [0, 1]")
    return rec


def read_records(path, sk: Skeleton) -> List[PoseRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            records.append(parse_record(obj, sk, lineno))
    return records


def load_dataset(path, skeleton_path=None) -> Tuple[List[PoseRecord], Skeleton]:
    from .skeleton import load_skeleton

    sk = load_skeleton(skeleton_path) if skeleton_path is not None else builtin_skeleton()
    records = read_records(path, sk)
    log.info("loaded %d records from %s", len(records), path)
    return records, sk


def save_dataset(records: Iterable[PoseRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


# -------------------------------------------------------------- preprocessing

def normalize_2d(pose2d: np.ndarray, sk: Skeleton) -> Tuple[np.ndarray, float]:
    centered = root_center(pose2d, sk)
    s = float(np.std(centered))
    if s <= 0:
        raise GeometryError("2D pose has zero spread")
    return centered / s, s


def align_to_template(pose3d: np.ndarray, template: np.ndarray, sk: Skeleton) -> np.ndarray:
    t = procrustes_align(pose3d, template, sk.alignment_joints, with_scale=True)
    return root_center(t.apply(pose3d), sk)


def make_template(records: Sequence[PoseRecord], sk: Skeleton, count: int = 100) -> np.ndarray:
    """Mean of the first ``count`` 3D poses after aligning them to the first one."""
    poses = [r.pose3d for r in records if r.pose3d is not None][:count]
    if not poses:
        raise DataError("no 3D poses to build a template from")
    ref = root_center(poses[0], sk)
    aligned = []
    for p in poses:
        try:
            aligned.append(align_to_template(p, ref, sk))
        except GeometryError:
            continue
    return np.mean(aligned, axis=0)


def preprocess(records: Sequence[PoseRecord], sk: Skeleton,
               template: Optional[np.ndarray] = None) -> List[PoseRecord]:
    """Template-align and root-center 3D poses; root-center and std-normalize 2D poses.

    Records whose hip/shoulder joints are degenerate are skipped with a warning.
    ``pose3d`` already carrying ``scale2d`` is not renormalized in 2D.
    """
    if template is None:
        template = make_template(records, sk)
    out = []
    for r in records:
        try:
            p3 = None if r.pose3d is None else align_to_template(r.pose3d, template, sk)
            p2, s = (None, r.scale2d) if r.pose2d is None else normalize_2d(r.pose2d, sk)
        except GeometryError as exc:
            log.warning("skipping record %s: %s", r.id, exc)
            continue
        if r.pose2d is not None and r.scale2d is not None:
            s = r.scale2d * s
        cam = None if r.camera_frame_pose3d is None else root_center(r.camera_frame_pose3d, sk)
        out.append(replace(r, pose2d=p2, pose3d=p3, camera_frame_pose3d=cam, scale2d=s))
    return out


# -------------------------------------------------------------------- masking

def draw_missing(limbs: Sequence[int], policy: Union[str, Sequence[int]], rng: np.random.Generator) -> List[int]:
    if not isinstance(policy, str):
        return list(policy)
    if policy == "none":
        return []
    counts = {"random-1": 1, "random-2": 2}
    if policy not in counts:
        raise DataError(f"unknown missing-joint policy {policy!r}")
    if not limbs:
        raise DataError("skeleton has no limb joints to mask")
    return sorted(int(j) for j in rng.choice(np.asarray(limbs), size=counts[policy], replace=False))


def mask_joints(record: PoseRecord, sk: Skeleton, policy: Union[str, Sequence[int]] = "random-1",
                seed: int = 0) -> PoseRecord:
    """Zero the 2D coordinates and loss weights of missing joints."""
    c = sk.joint_count
    rng = np.random.Generator(np.random.Philox(seed))
    missing = draw_missing(sk.limbs, policy, rng)
    if any(not 0 <= j < c for j in missing):
        raise DataError(f"joints {missing} outside skeleton of {c} joints")
    if record.pose2d is None:
        raise DataError(f"record {record.id} has no 2D pose to mask")
    p2 = record.pose2d.copy().reshape(c, 2)
    w = record.weights(c).copy()
    p2[missing] = 0.0
    w[missing] = 0.0
    return replace(record, pose2d=p2.reshape(-1), mask=w)


# ------------------------------------------------------------ synthetic data

@dataclass(frozen=True)
class SyntheticConfig:
    """Two-mode articulated test bed.

    The torso (hips, thorax, shoulders, head) lies in the image plane. Every
    limb bone leaves the plane by an elevation angle drawn from
    ``[elevation_min, elevation_max]`` degrees, with one sign shared by all
    limbs: +z with probability ``front_prob``. Under the orthographic camera
    both signs give the same 2D pose, so each input has exactly two
    consistent 3D poses.
    """

    joint_count: int = 15
    train_size: int = 5000
    test_size: int = 200
    seed: int = 0
    camera_scale: float = 1.0
    front_prob: float = 0.85
    elevation_min: float = 20.0
    elevation_max: float = 60.0
    # in-plane swing around the rest direction, degrees
    swing: float = 35.0
    hip_width: float = 130.0
    torso: float = 480.0
    neck_head: float = 200.0
    shoulder_width: float = 170.0
    thigh: float = 450.0
    shin: float = 440.0
    upper_arm: float = 290.0
    forearm: float = 260.0

    def __post_init__(self):
        lengths = (self.hip_width, self.torso, self.neck_head, self.shoulder_width,
                   self.thigh, self.shin, self.upper_arm, self.forearm)
        if min(lengths) <= 0:
            raise DataError("bone lengths must be positive")
        if self.train_size <= 0 or self.test_size <= 0:
            raise DataError("train and test sizes must be positive")
        if not 0 < self.elevation_min <= self.elevation_max < 90:
            raise DataError("elevation range must satisfy 0 < min <= max < 90 degrees")
        if not 0 <= self.swing < 90:
            raise DataError("swing must lie in [0, 90) degrees")
        if not 0 <= self.front_prob <= 1:
            raise DataError("front_prob must lie in [0, 1]")
        if self.joint_count != 15:
            raise DataError("the synthetic skeleton has 15 joints")

    @classmethod
    def from_mapping(cls, values: Dict[str, str]) -> "SyntheticConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in known:
                raise DataError(f"unknown synthetic config key: {k}")
            kwargs[k] = int(v) if k in ("joint_count", "train_size", "test_size", "seed") else float(v)
        return cls(**kwargs)

    def bone_table(self) -> Dict[Tuple[int, int], float]:
        sk = synthetic_skeleton()
        n = {name: i for i, name in enumerate(sk.joint_names)}
        pairs = {
            ("pelvis", "r_hip"): self.hip_width, ("pelvis", "l_hip"): self.hip_width,
            ("r_hip", "r_knee"): self.thigh, ("l_hip", "l_knee"): self.thigh,
            ("r_knee", "r_ankle"): self.shin, ("l_knee", "l_ankle"): self.shin,
            ("pelvis", "thorax"): self.torso, ("thorax", "head"): self.neck_head,
            ("thorax", "l_shoulder"): self.shoulder_width, ("thorax", "r_shoulder"): self.shoulder_width,
            ("l_shoulder", "l_elbow"): self.upper_arm, ("r_shoulder", "r_elbow"): self.upper_arm,
            ("l_elbow", "l_wrist"): self.forearm, ("r_elbow", "r_wrist"): self.forearm,
        }
        return {(n[a], n[b]): v for (a, b), v in pairs.items()}


def synthetic_skeleton() -> Skeleton:
    return builtin_skeleton("synth15")


# rest directions (degrees, in the image plane) of the limb bones
_LIMB_REST = {
    ("r_hip", "r_knee"): -95.0, ("r_knee", "r_ankle"): -90.0,
    ("l_hip", "l_knee"): -85.0, ("l_knee", "l_ankle"): -90.0,
    ("l_shoulder", "l_elbow"): -60.0, ("l_elbow", "l_wrist"): -30.0,
    ("r_shoulder", "r_elbow"): -120.0, ("r_elbow", "r_wrist"): -150.0,
}


def depth_flip(pose3d: np.ndarray) -> np.ndarray:
    p = np.array(pose3d, dtype=np.float64).reshape(-1, 3)
    p[:, 2] *= -1.0
    return p.reshape(np.shape(pose3d))


def sample_synthetic_poses(cfg: SyntheticConfig, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (poses (n, 3C), front flags (n,))."""
    sk = synthetic_skeleton()
    idx = {name: i for i, name in enumerate(sk.joint_names)}
    lengths = cfg.bone_table()
    c = sk.joint_count
    pts = np.zeros((n, c, 3))
    fixed = {
        "r_hip": (-1.0, 0.0), "l_hip": (1.0, 0.0), "thorax": (0.0, 1.0),
    }
    for name, (dx, dy) in fixed.items():
        j = idx[name]
        pts[:, j, :2] = np.array([dx, dy]) * lengths[(sk.parents[j], j)]
    thorax = pts[:, idx["thorax"]]
    pts[:, idx["head"]] = thorax + np.array([0.0, cfg.neck_head, 0.0])
    pts[:, idx["l_shoulder"]] = thorax + np.array([cfg.shoulder_width, 0.0, 0.0])
    pts[:, idx["r_shoulder"]] = thorax + np.array([-cfg.shoulder_width, 0.0, 0.0])
    front = rng.uniform(size=n) < cfg.front_prob
    sign = np.where(front, 1.0, -1.0)
    # parents are listed before children in _LIMB_REST order
    for (pa, ch), rest in _LIMB_REST.items():
        theta = np.deg2rad(rest + rng.uniform(-cfg.swing, cfg.swing, size=n))
        phi = np.deg2rad(rng.uniform(cfg.elevation_min, cfg.elevation_max, size=n))
        d = np.stack([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), sign * np.sin(phi)], axis=1)
        pts[:, idx[ch]] = pts[:, idx[pa]] + lengths[(idx[pa], idx[ch])] * d
    return pts.reshape(n, 3 * c), front


def project_orthographic(poses: np.ndarray, scale: float = 1.0) -> np.ndarray:
    j = np.asarray(poses).reshape(poses.shape[0], -1, 3)
    return (scale * j[:, :, :2]).reshape(poses.shape[0], -1)


@dataclass
class SyntheticDataset:
    skeleton: Skeleton
    train: List[PoseRecord]
    test: List[PoseRecord]
    modes: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def synth_multimodal(cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticDataset:
    """Raw (unpreprocessed) synthetic records.

    ``train`` holds 2D-only records followed by an unpaired, shuffled pool of
    3D-only records; ``test`` holds paired records. ``modes`` maps each test
    id to its two consistent 3D poses (the pose and its depth flip).
    """
    sk = synthetic_skeleton()
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    train_poses, train_front = sample_synthetic_poses(cfg, cfg.train_size, rng)
    test_poses, test_front = sample_synthetic_poses(cfg, cfg.test_size, rng)
    x_train = project_orthographic(train_poses, cfg.camera_scale)
    x_test = project_orthographic(test_poses, cfg.camera_scale)
    pool_order = rng.permutation(cfg.train_size)
    train = [PoseRecord(id=f"x{i:06d}", pose2d=x_train[i], subject="synthetic") for i in range(cfg.train_size)]
    train += [PoseRecord(id=f"pool{k:06d}", pose3d=train_poses[i], subject="synthetic")
              for k, i in enumerate(pool_order)]
    test, modes = [], {}
    for i in range(cfg.test_size):
        rid = f"t{i:06d}"
        action = "front" if test_front[i] else "back"
        test.append(PoseRecord(id=rid, pose2d=x_test[i], pose3d=test_poses[i],
                               camera_frame_pose3d=test_poses[i].copy(), subject="synthetic", action=action))
        modes[rid] = (test_poses[i].copy(), depth_flip(test_poses[i]))
    return SyntheticDataset(skeleton=sk, train=train, test=test, modes=modes)


def check_bone_lengths(poses: np.ndarray, cfg: SyntheticConfig) -> float:
    """Largest absolute deviation from the configured bone lengths."""
    sk = synthetic_skeleton()
    table = cfg.bone_table()
    expected = np.array([table[b] for b in sk.bones])
    return float(np.max(np.abs(bone_lengths(poses, sk) - expected)))


def read_kv_file(path) -> Dict[str, str]:
    """Flat ``key = value`` config; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out
