"""Hypothesis sampling and selection: posterior samples, mean-shift mode,
zero code, farthest point subsets and ground-truth best hypothesis."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from . import tape
from .metrics import mpjpe, mpjpe_p1, mpjpe_p2
from .networks import Model
from .skeleton import GeometryError

log = logging.getLogger(__name__)


@dataclass
class HypothesisSet:
    poses: np.ndarray            # (N, 3C)
    x: np.ndarray                # conditioning 2D pose
    seeds: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.poses = np.atleast_2d(np.asarray(self.poses, dtype=np.float64))
        if len(self.poses) < 1:
            raise GeometryError("a hypothesis set needs at least one pose")

    def __len__(self) -> int:
        return len(self.poses)


@dataclass(frozen=True)
class MeanShiftConfig:
    bandwidth: float = 0.0          # 0 selects the automatic rule
    max_iterations: int = 200
    convergence_tol: float = 1e-6
    merge_radius: Optional[float] = None   # default: bandwidth / 2

    def __post_init__(self):
        if self.bandwidth < 0 or self.max_iterations < 1 or self.convergence_tol <= 0:
            raise ValueError("invalid mean-shift configuration")
        if self.merge_radius is not None and self.merge_radius <= 0:
            raise ValueError("merge_radius must be positive")


def draw_seeds(seed: int, n: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, np.uint64)]


def latents_from_seeds(seeds: Sequence[int], dim: int) -> np.ndarray:
    """One standard-normal code per seed from a keyed Philox generator."""
    return np.stack([np.random.Generator(np.random.Philox(key=s)).standard_normal(dim) for s in seeds]) \
        if len(seeds) else np.zeros((0, dim))


def sample_hypotheses(x, n: int, model: Model, seed: int) -> HypothesisSet:
    if n < 1:
        raise ValueError("need at least one hypothesis")
    seeds = draw_seeds(seed, n)
    return replay(x, seeds, model)


def replay(x, seeds: Sequence[int], model: Model) -> HypothesisSet:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    z = latents_from_seeds(seeds, model.cfg.latent_dim)
    poses = tape.value_of(model.generator(np.broadcast_to(x, (len(seeds), x.size)), z))
    return HypothesisSet(poses, x, list(seeds))


def zero_code_pose(x, model: Model) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = tape.value_of(model.generator(x, np.zeros((len(x), model.cfg.latent_dim))))
    return out[0] if out.shape[0] == 1 else out


# ------------------------------------------------------------------ mean-shift

def auto_bandwidth(H: np.ndarray) -> float:
    """Median pairwise distance divided by sqrt(2 ln N)."""
    n = len(H)
    if n < 2:
        return 0.0
    d = np.sqrt(np.maximum(_sq_dists(H, H), 0.0))
    med = float(np.median(d[np.triu_indices(n, 1)]))
    return med / np.sqrt(2.0 * np.log(n))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)


def log_kde(points: np.ndarray, H: np.ndarray, w: float) -> np.ndarray:
    """Gaussian kernel density estimate (natural log) at each row of ``points``."""
    points = np.atleast_2d(points)
    n, d = H.shape
    e = -_sq_dists(points, H) / (2.0 * w * w)
    return logsumexp(e, axis=1) - np.log(n) - d * np.log(w) - 0.5 * d * np.log(2.0 * np.pi)


@dataclass
class MeanShiftResult:
    mode: np.ndarray
    modes: np.ndarray
    log_density: np.ndarray
    origin: List[int]
    bandwidth: float
    converged: bool


def mean_shift(H, cfg: MeanShiftConfig = MeanShiftConfig()) -> MeanShiftResult:
    """Gaussian mean-shift from every hypothesis; returns the densest merged mode."""
    h = np.atleast_2d(np.asarray(getattr(H, "poses", H), dtype=np.float64))
    n = len(h)
    w = cfg.bandwidth if cfg.bandwidth > 0 else auto_bandwidth(h)
    if n == 1 or w <= 0:
        return MeanShiftResult(h[0].copy(), h[:1].copy(), np.zeros(1), [0], w, True)
    pts = h.copy()
    active = np.ones(n, dtype=bool)
    dens = log_kde(pts, h, w)
    for _ in range(cfg.max_iterations):
        if not active.any():
            break
        cur = pts[active]
        logits = -_sq_dists(cur, h) / (2.0 * w * w)
        logits -= logits.max(axis=1, keepdims=True)
        k = np.exp(logits)
        new = (k @ h) / k.sum(axis=1, keepdims=True)
        shift = np.max(np.abs(new - cur), axis=1)
        new_dens = log_kde(new, h, w)
        # ascent property of Gaussian mean-shift (tolerance for round-off)
        assert np.all(new_dens >= dens[active] - 1e-9 * np.maximum(1.0, np.abs(dens[active]))), \
            "mean-shift density decreased"
        idx = np.flatnonzero(active)
        pts[idx] = new
        dens[idx] = new_dens
        active[idx[shift < cfg.convergence_tol]] = False
    converged = not active.any()
    if not converged:
        log.warning("mean-shift: %d trajectories did not converge", int(active.sum()))
    radius = cfg.merge_radius if cfg.merge_radius is not None else w / 2.0
    modes, origin = [], []
    for i in range(n):
        if all(np.linalg.norm(pts[i] - m) > radius for m in modes):
            modes.append(pts[i])
            origin.append(i)
    modes_a = np.array(modes)
    md = log_kde(modes_a, h, w)
    best = int(np.flatnonzero(md == md.max())[0])
    return MeanShiftResult(modes_a[best].copy(), modes_a, md, origin, w, converged)


def mean_shift_mode(H, cfg: MeanShiftConfig = MeanShiftConfig()) -> np.ndarray:
    return mean_shift(H, cfg).mode


# ------------------------------------------------------------------------ FPS

def fps(H, k: int) -> List[int]:
    """Greedy max-min subset indices, starting from the point farthest from the centroid.

    Ties go to the lowest index.
    """
    h = np.atleast_2d(np.asarray(getattr(H, "poses", H), dtype=np.float64))
    n = len(h)
    if not 1 <= k <= n:
        raise ValueError(f"fps: need 1 <= k <= N, got k={k}, N={n}")
    centroid = h.mean(axis=0)
    first = int(np.argmax(np.linalg.norm(h - centroid, axis=1)))
    chosen = [first]
    dmin = np.linalg.norm(h - h[first], axis=1)
    while len(chosen) < k:
        cand = dmin.copy()
        cand[chosen] = -np.inf
        nxt = int(np.argmax(cand))
        chosen.append(nxt)
        dmin = np.minimum(dmin, np.linalg.norm(h - h[nxt], axis=1))
    return chosen


def fps_subset(H: HypothesisSet, k: int) -> HypothesisSet:
    idx = fps(H, k)
    seeds = [H.seeds[i] for i in idx] if H.seeds else []
    return HypothesisSet(H.poses[idx], H.x, seeds)


# ------------------------------------------------------------ best hypothesis

def protocol_error(pred, gt, protocol: str = "p2", M=None) -> float:
    if protocol == "p2":
        return mpjpe_p2(pred, gt)
    if protocol == "p1":
        return mpjpe_p1(pred, M, gt) if M is not None else mpjpe(pred, gt)
    raise ValueError(f"unknown protocol {protocol!r}")


def best_hypothesis(H, gt, protocol: str = "p2", M=None) -> Tuple[np.ndarray, float]:
    h = np.asarray(getattr(H, "poses", H), dtype=np.float64)
    if h.ndim != 2 or len(h) == 0:
        raise ValueError("best_hypothesis: empty hypothesis set")
    errs = [protocol_error(p, gt, protocol, M) for p in h]
    i = int(np.argmin(errs))
    return h[i].copy(), float(errs[i])
