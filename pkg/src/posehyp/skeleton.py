"""Skeleton topology and pose geometry.

Poses are flat joint-major vectors: a 2D pose is ``(u1, v1, u2, v2, ...)``
of length 2C and a 3D pose ``(x1, y1, z1, ...)`` of length 3C. Every
function here accepts leading batch axes. ``reproject`` and ``kcs`` are
written against the array protocol shared by numpy and :mod:`posehyp.tape`
so they can be used inside a differentiable graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tape

LIMB_JOINT_NAMES = ("l_wrist", "r_wrist", "l_elbow", "r_elbow",
                    "l_knee", "r_knee", "l_ankle", "r_ankle")


class GeometryError(ValueError):
    """Raised for degenerate or inconsistent geometric input."""


@dataclass(frozen=True)
class Skeleton:
    joint_names: Tuple[str, ...]
    parents: Tuple[int, ...]
    root: int
    hips: Tuple[int, int]
    shoulders: Tuple[int, int]
    limbs: Optional[Tuple[int, ...]] = None
    bones: Tuple[Tuple[int, int], ...] = field(init=False)

    def __post_init__(self):
        names = tuple(self.joint_names)
        parents = tuple(int(p) for p in self.parents)
        object.__setattr__(self, "joint_names", names)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "hips", tuple(int(i) for i in self.hips))
        object.__setattr__(self, "shoulders", tuple(int(i) for i in self.shoulders))
        c = len(names)
        if c < 2 or len(parents) != c:
            raise GeometryError("skeleton needs >= 2 joints and one parent entry per joint")
        if len(set(names)) != c:
            raise GeometryError("joint names must be unique")
        if not 0 <= self.root < c or parents[self.root] != -1:
            raise GeometryError("root must be a valid joint with parent -1")
        for j, p in enumerate(parents):
            if j != self.root and not 0 <= p < c:
                raise GeometryError(f"joint {j} has invalid parent {p}")
        # every joint must reach the root without cycles
        for j in range(c):
            seen, k = set(), j
            while k != self.root:
                if k in seen:
                    raise GeometryError(f"cycle through joint {j}")
                seen.add(k)
                k = parents[k]
        special = list(self.hips) + list(self.shoulders)
        if len(special) != 4 or len(set(special)) != 4 or not all(0 <= i < c for i in special):
            raise GeometryError("hips and shoulders must be four distinct valid joints")
        if self.limbs is None:
            limbs = tuple(names.index(n) for n in LIMB_JOINT_NAMES if n in names)
        else:
            limbs = tuple(int(i) for i in self.limbs)
        if any(not 0 <= i < c for i in limbs):
            raise GeometryError("limb joint index out of range")
        object.__setattr__(self, "limbs", limbs)
        bones = tuple((parents[j], j) for j in range(c) if j != self.root)
        object.__setattr__(self, "bones", bones)

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    @property
    def alignment_joints(self) -> Tuple[int, ...]:
        return tuple(self.hips) + tuple(self.shoulders)

    def bone_matrix(self) -> np.ndarray:
        """(C-1, C) incidence matrix: row b is ``child - parent`` of bone b."""
        d = np.zeros((len(self.bones), self.joint_count))
        for b, (p, ch) in enumerate(self.bones):
            d[b, ch] = 1.0
            d[b, p] = -1.0
        return d

    def to_dict(self) -> dict:
        return {"joint_names": list(self.joint_names), "parents": list(self.parents),
                "root": self.root, "hips": list(self.hips), "shoulders": list(self.shoulders),
                "limbs": list(self.limbs)}

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        required = ("joint_names", "parents", "root", "hips", "shoulders")
        missing = [k for k in required if k not in d]
        if missing:
            raise GeometryError(f"skeleton config missing keys: {', '.join(missing)}")
        return cls(joint_names=d["joint_names"], parents=d["parents"], root=int(d["root"]),
                   hips=d["hips"], shoulders=d["shoulders"], limbs=d.get("limbs"))


def load_skeleton(path) -> Skeleton:
    with open(path) as fh:
        return Skeleton.from_dict(json.load(fh))


def save_skeleton(sk: Skeleton, path) -> None:
    Path(path).write_text(json.dumps(sk.to_dict(), indent=2) + "\n")


def builtin_skeleton(name: str = "h36m16") -> Skeleton:
    """Shipped skeleton configs: ``h36m16`` (default) and ``synth15``."""
    text = resources.files("posehyp").joinpath("configs", f"{name}.json").read_text()
    return Skeleton.from_dict(json.loads(text))


@dataclass(frozen=True)
class RigidTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, pose: np.ndarray) -> np.ndarray:
        pts = np.asarray(pose, dtype=np.float64).reshape(-1, 3)
        out = self.scale * pts @ self.rotation.T + self.translation
        return out.reshape(np.shape(pose))


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(tape.value_of(a))):
            raise GeometryError("non-finite input")


def reproject(M, y):
    """Weak-perspective projection ``M @ joint`` for every joint.

    ``M`` is (..., 2, 3) and ``y`` is (..., 3C); returns (..., 2C).
    """
    _check_finite(M, y)
    n = y.shape[-1]
    if n % 3:
        raise GeometryError(f"3D pose length {n} is not a multiple of 3")
    lead = tuple(y.shape[:-1])
    joints = y.reshape(lead + (n // 3, 3))
    mt = M.T if M.ndim == 2 else tape_swap(M)
    return (joints @ mt).reshape(lead + (2 * (n // 3),))


def tape_swap(M):
    if isinstance(M, tape.Tensor):
        return tape.transpose(M)
    return np.swapaxes(M, -1, -2)


def bone_vectors(y, sk: Skeleton):
    """(..., C-1, 3) matrix of bone vectors ``child - parent``."""
    c = sk.joint_count
    if y.shape[-1] != 3 * c:
        raise GeometryError(f"pose has {y.shape[-1]} coords, skeleton needs {3 * c}")
    lead = tuple(y.shape[:-1])
    return sk.bone_matrix() @ y.reshape(lead + (c, 3))


def kcs(y, sk: Skeleton):
    """Kinematic-chain-space Gram matrix of bone vectors, (..., C-1, C-1)."""
    b = bone_vectors(y, sk)
    return b @ tape_swap(b)


def bone_lengths(y: np.ndarray, sk: Skeleton) -> np.ndarray:
    return np.linalg.norm(bone_vectors(np.asarray(y, dtype=np.float64), sk), axis=-1)


def procrustes_align(source, target, joint_subset: Optional[Sequence[int]] = None,
                     with_scale: bool = True) -> RigidTransform:
    """Similarity transform mapping ``source`` joints onto ``target`` (least squares).

    Reflections are excluded by the determinant sign correction.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != tgt.shape:
        raise GeometryError("source and target poses differ in size")
    _check_finite(src, tgt)
    if joint_subset is not None:
        idx = list(joint_subset)
        src, tgt = src[idx], tgt[idx]
    if len(src) < 3:
        raise GeometryError("need at least 3 joints for alignment")
    mu_s, mu_t = src.mean(axis=0), tgt.mean(axis=0)
    a, b = src - mu_s, tgt - mu_t
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise GeometryError("degenerate (collinear) joint subset")
    u, s, vt = np.linalg.svd(a.T @ b)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    corr = np.array([1.0, 1.0, d])
    rot = vt.T @ np.diag(corr) @ u.T
    scale = float(np.sum(s * corr) / np.sum(a * a)) if with_scale else 1.0
    trans = mu_t - scale * rot @ mu_s
    return RigidTransform(scale, rot, trans)


def rotation_from_camera(M) -> np.ndarray:
    """Orthonormal rotation from the rows of a 2x3 camera matrix (Gram-Schmidt)."""
    m = np.asarray(M, dtype=np.float64)
    if m.shape != (2, 3):
        raise GeometryError(f"camera matrix must be 2x3, got {m.shape}")
    _check_finite(m)
    n1 = np.linalg.norm(m[0])
    if n1 < 1e-12:
        raise GeometryError("camera matrix has a zero row")
    r1 = m[0] / n1
    r2 = m[1] - (m[1] @ r1) * r1
    n2 = np.linalg.norm(r2)
    if n2 < 1e-12 * max(np.linalg.norm(m[1]), 1e-300):
        raise GeometryError("camera matrix rows are parallel or zero")
    r2 = r2 / n2
    return np.stack([r1, r2, np.cross(r1, r2)])


def root_center(p, sk: Skeleton) -> np.ndarray:
    """Translate a 2D or 3D pose (detected from its length) so the root is at 0."""
    p = np.asarray(p, dtype=np.float64)
    c = sk.joint_count
    if p.shape[-1] == 2 * c:
        dim = 2
    elif p.shape[-1] == 3 * c:
        dim = 3
    else:
        raise GeometryError(f"pose length {p.shape[-1]} does not match {c} joints")
    joints = p.reshape(p.shape[:-1] + (c, dim))
    return (joints - joints[..., sk.root:sk.root + 1, :]).reshape(p.shape)


def joints(p: np.ndarray, dim: int = 3) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p.reshape(p.shape[:-1] + (p.shape[-1] // dim, dim))


def upper_triangle_index(n: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n)


def orthographic(scale: float = 1.0) -> np.ndarray:
    return scale * np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def validate_pose(p, c: int, dim: int) -> np.ndarray:
    a = np.asarray(p, dtype=np.float64)
    if a.shape[-1] != dim * c:
        raise GeometryError(f"expected {dim * c} coordinates, got {a.shape[-1]}")
    if not np.all(np.isfinite(a)):
        raise GeometryError("pose has non-finite coordinates")
    return a


__all__: List[str] = [
    "GeometryError", "Skeleton", "RigidTransform", "load_skeleton", "save_skeleton",
    "builtin_skeleton", "reproject", "bone_vectors", "kcs", "bone_lengths",
    "procrustes_align", "rotation_from_camera", "root_center", "orthographic",
]
