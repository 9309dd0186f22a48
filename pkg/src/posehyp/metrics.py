"""Pose error and hypothesis-diversity metrics (millimetres)."""

from __future__ import annotations

import json
from collections import OrderedDict
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .skeleton import GeometryError, procrustes_align, rotation_from_camera


def _pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.shape[-1] % 3:
        raise GeometryError(f"pose size mismatch: {p.shape} vs {g.shape}")
    return p.reshape(p.shape[:-1] + (-1, 3)), g.reshape(g.shape[:-1] + (-1, 3))


def joint_errors(pred, gt) -> np.ndarray:
    p, g = _pair(pred, gt)
    return np.linalg.norm(p - g, axis=-1)


def mpjpe(pred, gt) -> float:
    """Mean Euclidean joint distance; batched inputs are averaged too."""
    return float(np.mean(joint_errors(pred, gt)))


def align_p2(pred, gt) -> np.ndarray:
    """``pred`` after the similarity transform (all joints, with scale) best matching ``gt``."""
    p, g = _pair(pred, gt)
    if np.allclose(p, p[0]):
        raise GeometryError("degenerate prediction: all joints coincide")
    t = procrustes_align(p, g, with_scale=True)
    return t.apply(p.reshape(-1))


def mpjpe_p2(pred, gt) -> float:
    return mpjpe(align_p2(pred, gt), gt)


def mpjpe_p1(pred, M, gt_camera_frame) -> float:
    """Error after rotating ``pred`` into the camera frame given by ``M``."""
    R = rotation_from_camera(M)
    p, g = _pair(pred, gt_camera_frame)
    return mpjpe((p @ R.T).reshape(-1), g.reshape(-1))


def pck3d(pred, gt, radius: float = 150.0) -> float:
    """Fraction of joints within ``radius`` (inclusive)."""
    return float(np.mean(joint_errors(pred, gt) <= radius))


def hypothesis_std(H, root: int = 0) -> float:
    """Population std of root-relative coordinates across hypotheses, mean over coordinates."""
    h = np.asarray(H, dtype=np.float64)
    if h.ndim != 2 or len(h) < 2:
        raise GeometryError("hypothesis_std needs at least two hypotheses")
    j = h.reshape(len(h), -1, 3)
    rel = j - j[:, root:root + 1]
    # deviations from the first hypothesis: same std, and exactly 0 for identical sets
    rel = rel - rel[:1]
    return float(np.mean(np.std(rel.reshape(len(h), -1), axis=0)))


def std_fps(H, k: int = 5, root: int = 0) -> float:
    from .inference import fps

    h = np.asarray(H, dtype=np.float64)
    if not len(h) >= k >= 2:
        raise GeometryError("std_fps needs N >= k >= 2")
    return hypothesis_std(h[fps(h, k)], root)


# -------------------------------------------------------------------- reports

def per_action_table(values: Mapping[str, float], counts: Optional[Mapping[str, int]] = None,
                     metric: str = "value") -> List[str]:
    """Tab-separated rows ``action<TAB>metric``, ending with an ``Avg.`` row over records."""
    rows = [f"action\t{metric}"]
    for action in sorted(values):
        rows.append(f"{action}\t{values[action]:.1f}")
    if counts:
        total = sum(counts.values())
        avg = sum(values[a] * counts[a] for a in values) / total
    else:
        avg = float(np.mean(list(values.values()))) if values else float("nan")
    rows.append(f"Avg.\t{avg:.1f}")
    return rows


def group_mean(per_record: Sequence[Tuple[str, float]]) -> Tuple[Dict[str, float], Dict[str, int]]:
    sums: Dict[str, float] = OrderedDict()
    counts: Dict[str, int] = OrderedDict()
    for action, v in per_record:
        sums[action] = sums.get(action, 0.0) + v
        counts[action] = counts.get(action, 0) + 1
    return {a: sums[a] / counts[a] for a in sums}, counts


def summary_json(summary: Mapping[str, float]) -> str:
    return json.dumps(dict(summary), indent=2, sort_keys=True) + "\n"
