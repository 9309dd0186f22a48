"""Training objectives.

All loss functions take batched inputs (leading axis = sample) and return a
scalar :class:`~posehyp.tape.Tensor`; plain numpy inputs work too and give a
constant-valued tensor. Joint layouts follow :mod:`posehyp.skeleton`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from . import tape
from .skeleton import reproject
from .tape import Tensor


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    gp: float = 0.1
    two_d: float = 10.0
    reg: float = 7.5
    rec: float = 10.0

    def __post_init__(self):
        for k in ("gp", "two_d", "reg", "rec"):
            v = getattr(self, k)
            if not np.isfinite(v) or v < 0:
                raise LossError(f"loss weight {k} must be finite and >= 0, got {v}")


# weights used for the missing-joint experiments
MISSING_JOINT_WEIGHTS = LossWeights(gp=0.1, two_d=20.0, reg=7.5, rec=10.0)


@dataclass(frozen=True)
class KernelConfig:
    alphas: Tuple[float, ...] = (0.2, 0.5, 1.0, 2.0, 5.0)
    include_dot: bool = True

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if not self.alphas or any(a <= 0 for a in self.alphas):
            raise LossError("kernel alphas must be a nonempty list of positive reals")


@dataclass(frozen=True)
class DiversityConfig:
    tau: float = 20.0
    eps_z: float = 1e-8

    def __post_init__(self):
        if self.tau <= 0 or self.eps_z <= 0:
            raise LossError("tau and eps_z must be positive")


def _batched(a) -> Tensor:
    t = tape.as_tensor(a)
    return t.reshape(1, -1) if t.ndim == 1 else t


def loss_2d(M, y, x, mask=None) -> Tensor:
    """Masked L1 reprojection error, averaged over unmasked joints then samples."""
    y, x = _batched(y), _batched(x)
    M = tape.as_tensor(M)
    if M.ndim == 2:
        M = M.reshape(1, 2, 3)
    b, c = x.shape[0], x.shape[1] // 2
    m = np.ones((b, c)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1, c)
    m = np.broadcast_to(m, (b, c))
    counts = (m > 0).sum(axis=1)
    if np.any(counts == 0):
        raise LossError("loss_2d: mask has no unmasked joints")
    resid = tape.abs_(reproject(M, y) - x).reshape(b, c, 2).sum(axis=2)
    per_sample = (resid * m).sum(axis=1) / counts.astype(np.float64)
    return per_sample.mean()


def loss_reg(g1, g2, z1, z2, cfg: DiversityConfig = DiversityConfig()) -> Tensor:
    """Clamped ratio of output L1 distance to latent L1 distance, batch mean."""
    g1, g2 = _batched(g1), _batched(g2)
    zd = np.abs(np.atleast_2d(tape.value_of(z1)) - np.atleast_2d(tape.value_of(z2))).sum(axis=1)
    if not np.all(np.isfinite(zd)):
        raise LossError("loss_reg: non-finite latent codes")
    denom = np.maximum(zd, cfg.eps_z)
    ratio = tape.l1_norm(g1 - g2, axis=1) / denom
    return tape.min_with_constant(ratio, cfg.tau).mean()


def loss_rec(z, z_hat) -> Tensor:
    z, z_hat = tape.as_tensor(z), tape.as_tensor(z_hat)
    if z.shape != z_hat.shape:
        raise LossError(f"loss_rec: shape mismatch {z.shape} vs {z_hat.shape}")
    return tape.abs_(z - z_hat).mean()


def pairwise_sq_dists(a, b) -> Tensor:
    a, b = tape.as_tensor(a), tape.as_tensor(b)
    aa = tape.square(a).sum(axis=1, keepdims=True)
    bb = tape.square(b).sum(axis=1, keepdims=True)
    return aa + tape.transpose(bb) - 2.0 * (a @ tape.transpose(b))


def kernel_matrix(a, b, cfg: KernelConfig = KernelConfig()) -> Tensor:
    """Mixed rational-quadratic + dot kernel between the rows of ``a`` and ``b``."""
    a, b = tape.as_tensor(a), tape.as_tensor(b)
    d2 = pairwise_sq_dists(a, b)
    k = None
    for alpha in cfg.alphas:
        term = tape.pow_scalar(1.0 + d2 / (2.0 * alpha), -alpha)
        k = term if k is None else k + term
    if cfg.include_dot:
        k = k + a @ tape.transpose(b)
    return k


def kernel_rq_dot(a, b, cfg: KernelConfig = KernelConfig()) -> float:
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise LossError("kernel_rq_dot: dimension mismatch")
    return float(kernel_matrix(a[None], b[None], cfg).value[0, 0])


def mmd_u(real, fake, cfg: KernelConfig = KernelConfig()) -> Tensor:
    """Unbiased squared-MMD estimate between two sample sets (rows)."""
    real, fake = tape.as_tensor(real), tape.as_tensor(fake)
    if real.ndim == 1:
        real = real.reshape(-1, 1)
    if fake.ndim == 1:
        fake = fake.reshape(-1, 1)
    m, n = real.shape[0], fake.shape[0]
    if m < 2 or n < 2:
        raise LossError(f"mmd_u needs at least 2 samples per set, got {m} and {n}")
    off_m = 1.0 - np.eye(m)
    off_n = 1.0 - np.eye(n)
    kxx = (kernel_matrix(real, real, cfg) * off_m).sum() / (m * (m - 1))
    kyy = (kernel_matrix(fake, fake, cfg) * off_n).sum() / (n * (n - 1))
    kxy = kernel_matrix(real, fake, cfg).sum() * (2.0 / (m * n))
    return kxx + kyy - kxy


def gradient_penalty(critic: Callable[[Tensor], Tensor], real, fake, eps_fd: float = 1e-3,
                     rng: Optional[np.random.Generator] = None) -> Tensor:
    """Unit-slope penalty on finite-difference directional derivatives of ``critic``.

    Interpolates ``u * real + (1 - u) * fake`` with one random unit direction
    per row; the critic output may be a vector, whose L2 norm is used.
    """
    if eps_fd <= 0:
        raise LossError("eps_fd must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    r = np.atleast_2d(tape.value_of(real))
    f = np.atleast_2d(tape.value_of(fake))
    if r.shape != f.shape:
        raise LossError("gradient_penalty: real and fake batches must have the same shape")
    u = rng.uniform(size=(r.shape[0], 1))
    v = rng.standard_normal(r.shape)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    y_hat = u * r + (1.0 - u) * f
    base = critic(tape.constant(y_hat))
    shifted = critic(tape.constant(y_hat + eps_fd * v))
    if not (np.all(np.isfinite(base.value)) and np.all(np.isfinite(shifted.value))):
        raise LossError("gradient_penalty: non-finite critic output")
    slope = (shifted - base) / eps_fd
    if slope.ndim == 1:
        slope = slope.reshape(-1, 1)
    return tape.square(tape.l2_norm(slope, axis=1) - 1.0).mean()


def camera_loss(M) -> Tensor:
    """Deviation of ``M M^T`` from a scaled identity, batch mean of Frobenius norms."""
    M = tape.as_tensor(M)
    if M.ndim == 2:
        M = M.reshape(1, 2, 3)
    mmt = M @ tape.transpose(M)
    tr = mmt[:, 0, 0] + mmt[:, 1, 1]
    if np.any(tr.value < 1e-12):
        raise LossError("camera_loss: degenerate camera matrix (trace below 1e-12)")
    # (2 M M^T - tr I) / tr: exactly zero whenever the rows are exactly orthogonal with equal norms
    tr3 = tr.reshape(-1, 1, 1)
    dev = (mmt * 2.0 - tr3 * np.eye(2)) / tr3
    return tape.l2_norm(dev.reshape(-1, 4), axis=1).mean()


# ------------------------------------------------------------ composite losses

@dataclass
class BatchContext:
    """One training batch. ``real`` is an unpaired pool sample, not labels for ``x``."""

    x: np.ndarray
    mask: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    real: np.ndarray
    gp_seed: int = 0


@dataclass
class LossBreakdown:
    total: Tensor
    terms: Dict[str, float] = field(default_factory=dict)
    # generated poses (values) for reuse by the caller
    extras: Dict[str, np.ndarray] = field(default_factory=dict)


def combine_generator(adv, l2d, reg, rec, w: LossWeights):
    return adv + w.two_d * l2d - w.reg * reg + w.rec * rec


def generator_loss(ctx: BatchContext, nets, weights: LossWeights = LossWeights(),
                   kernel: KernelConfig = KernelConfig(),
                   diversity: DiversityConfig = DiversityConfig()) -> LossBreakdown:
    """``L_adv + w2d*L_2D - wreg*L_reg + wrec*L_rec`` for the generator and encoder.

    ``nets`` exposes ``generator(x, z)``, ``encoder(y)``, ``discriminator(y)``,
    ``camera(x)``, ``normalize(y)`` and ``denormalize(y)``; see :class:`posehyp.networks.Model`.
    """
    g1 = nets.generator(ctx.x, ctx.z1)
    g2 = nets.generator(ctx.x, ctx.z2)
    M = nets.camera(ctx.x)
    l2d = 0.5 * (loss_2d(M, g1, ctx.x, ctx.mask) + loss_2d(M, g2, ctx.x, ctx.mask))
    reg = loss_reg(nets.normalize(g1), nets.normalize(g2), ctx.z1, ctx.z2, diversity)
    rec = 0.5 * (loss_rec(ctx.z1, nets.encoder(g1)) + loss_rec(ctx.z2, nets.encoder(g2)))
    adv = mmd_u(nets.discriminator(ctx.real), nets.discriminator(g1), kernel)
    total = combine_generator(adv, l2d, reg, rec, weights)
    terms = {"adv": float(adv.value), "2d": float(l2d.value), "reg": float(reg.value),
             "rec": float(rec.value)}
    return LossBreakdown(total, terms, {"g1": g1.value, "g2": g2.value})


def discriminator_loss(ctx: BatchContext, nets, weights: LossWeights = LossWeights(),
                       kernel: KernelConfig = KernelConfig(), eps_fd: float = 1e-3) -> LossBreakdown:
    """``-L_adv + wgp*L_gp``; generated poses enter as constants."""
    fake = tape.value_of(nets.generator(ctx.x, ctx.z1))
    adv = mmd_u(nets.discriminator(ctx.real), nets.discriminator(fake), kernel)
    rng = np.random.Generator(np.random.Philox(ctx.gp_seed))
    # penalize slopes in normalized pose units, the space the critic actually sees
    gp = gradient_penalty(lambda t: nets.discriminator(nets.denormalize(t)),
                          tape.value_of(nets.normalize(ctx.real)), tape.value_of(nets.normalize(fake)),
                          eps_fd, rng)
    total = -1.0 * adv + weights.gp * gp
    return LossBreakdown(total, {"adv": float(adv.value), "gp": float(gp.value)})
