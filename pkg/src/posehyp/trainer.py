"""Alternating discriminator / generator+encoder / camera optimization with ADAM."""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tape
from .data import DataError, PoseRecord, draw_missing, read_kv_file
from .losses import (BatchContext, DiversityConfig, KernelConfig, LossError, LossWeights,
                     MISSING_JOINT_WEIGHTS, camera_loss, discriminator_loss, generator_loss, loss_2d)
from .networks import Checkpoint, Model, ModelConfig, ParamStore, init_params
from .skeleton import Skeleton

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "epoch", "L_adv", "L_2D", "L_reg", "L_rec", "L_gp", "L_cam", "lr")
MISSING_POLICIES = ("none", "random-1", "random-2")
GROUPS = {"d": ("discriminator",), "g": ("generator", "encoder"), "c": ("camera",)}


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    """A loss or gradient became non-finite; ``term`` names the culprit."""

    def __init__(self, term: str, detail: str = ""):
        super().__init__(f"non-finite value in {term}" + (f": {detail}" if detail else ""))
        self.term = term


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    decay_rate: float = 0.94
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 10
    d_steps_per_g_step: int = 1
    weights: LossWeights = LossWeights()
    diversity: DiversityConfig = DiversityConfig()
    kernel: KernelConfig = KernelConfig()
    gp_eps: float = 1e-3
    seed: int = 0
    missing_joint_policy: str = "none"
    latent_dim: int = 32
    feature_dim: int = 32
    hidden_width: int = 1024
    residual_blocks: int = 2

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be positive")
        if not 0 < self.decay_rate <= 1:
            raise TrainingError("decay_rate must lie in (0, 1]")
        if self.batch_size < 4:
            raise TrainingError("batch_size must be at least 4")
        if self.epochs < 0 or self.d_steps_per_g_step < 1:
            raise TrainingError("epochs must be >= 0 and d_steps_per_g_step >= 1")
        if self.missing_joint_policy not in MISSING_POLICIES:
            raise TrainingError(f"missing_joint_policy must be one of {MISSING_POLICIES}")

    # flat key=value representation
    def to_flat(self) -> "OrderedDict[str, str]":
        out: OrderedDict = OrderedDict()
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "weights":
                out.update(lambda_gp=repr(v.gp), lambda_2d=repr(v.two_d), lambda_reg=repr(v.reg),
                           lambda_rec=repr(v.rec))
            elif f.name == "diversity":
                out.update(tau=repr(v.tau), eps_z=repr(v.eps_z))
            elif f.name == "kernel":
                out["kernel_alphas"] = ",".join(repr(a) for a in v.alphas)
                out["kernel_dot"] = "true" if v.include_dot else "false"
            else:
                out[f.name] = repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_flat(cls, values: Mapping[str, str], base: Optional["TrainConfig"] = None) -> "TrainConfig":
        base = base or cls()
        known = set(base.to_flat()) | {"preset"}
        for k in values:
            if k not in known:
                raise TrainingError(f"unknown config key: {k}")
        if "preset" in values:
            base = preset(values["preset"])
        kw: Dict[str, object] = {}
        w, d, k = asdict(base.weights), asdict(base.diversity), asdict(base.kernel)
        try:
            for key, v in values.items():
                if key == "preset":
                    continue
                if key.startswith("lambda_"):
                    w[{"lambda_gp": "gp", "lambda_2d": "two_d", "lambda_reg": "reg",
                       "lambda_rec": "rec"}[key]] = float(v)
                elif key in ("tau", "eps_z"):
                    d[key] = float(v)
                elif key == "kernel_alphas":
                    k["alphas"] = tuple(float(a) for a in v.split(","))
                elif key == "kernel_dot":
                    k["include_dot"] = v.strip().lower() in ("1", "true", "yes", "on")
                else:
                    cur = getattr(base, key)
                    kw[key] = v.strip() if isinstance(cur, str) else type(cur)(float(v)) if isinstance(cur, int) else float(v)
            return replace(base, weights=LossWeights(**w), diversity=DiversityConfig(**d),
                           kernel=KernelConfig(**k), **kw)
        except (ValueError, LossError) as exc:
            raise TrainingError(f"invalid config value: {exc}") from None

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_flat(read_kv_file(path))


def preset(name: str) -> TrainConfig:
    """``default``: the standard weights; ``missing-joints``: weights for occluded limbs."""
    if name == "default":
        return TrainConfig()
    if name == "missing-joints":
        return TrainConfig(weights=MISSING_JOINT_WEIGHTS, missing_joint_policy="random-1")
    raise TrainingError(f"unknown preset {name!r}")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise TrainingError("epoch must be >= 0")
    return cfg.learning_rate * cfg.decay_rate ** epoch


# ----------------------------------------------------------------------- ADAM

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_update(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
                lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected ADAM step over the parameters named in ``grads`` (in place)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"gradient of {name}")
        if g.shape != params[name].shape:
            raise TrainingError(f"gradient shape mismatch for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ------------------------------------------------------------------ training

@dataclass
class TrainingData:
    """Preprocessed inputs: 2D poses with masks, and an unpaired 3D pool."""

    skeleton: Skeleton
    x: np.ndarray
    pool: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        c = self.skeleton.joint_count
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, 2 * c)
        self.pool = np.asarray(self.pool, dtype=np.float64).reshape(-1, 3 * c)
        if self.mask is None:
            self.mask = np.ones((len(self.x), c))
        if len(self.x) == 0 or len(self.pool) < 2:
            raise DataError("training needs 2D poses and at least two pool poses")

    @classmethod
    def from_records(cls, records: Sequence[PoseRecord], sk: Skeleton) -> "TrainingData":
        c = sk.joint_count
        two_d = [r for r in records if r.pose2d is not None]
        pool = [r.pose3d for r in records if r.pose3d is not None]
        if not two_d or not pool:
            raise DataError("dataset is empty: need records with pose2d and records with pose3d")
        return cls(sk, np.stack([r.pose2d for r in two_d]), np.stack(pool),
                   np.stack([r.weights(c) for r in two_d]))


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def _leaves(params: ParamStore, networks: Iterable[str]) -> Dict[str, object]:
    bound: Dict[str, object] = dict(params)
    for net in networks:
        for k in params.subset(net):
            bound[k] = tape.leaf(params[k], name=k)
    return bound


def _grads(bound: Mapping[str, object], networks: Iterable[str], root) -> Dict[str, np.ndarray]:
    g = tape.backward(root)
    out = {}
    for k, v in bound.items():
        if isinstance(v, tape.Tensor) and any(k.startswith(n + ".") for n in networks):
            out[k] = g.get(k, np.zeros_like(v.value))
    return out


def train_step(batch: Tuple[np.ndarray, np.ndarray, np.ndarray], model: Model, params: ParamStore,
               states: Dict[str, AdamState], cfg: TrainConfig, step_seed: int, lr: float) -> Dict[str, float]:
    """One D update, one generator+encoder update, one camera update.

    ``batch`` is ``(x, real, mask)``; ``real`` is unpaired with ``x``.
    """
    x, real, mask = batch
    rng = np.random.Generator(np.random.Philox(step_seed))
    dz = model.cfg.latent_dim
    b = len(x)
    adam = dict(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    terms: Dict[str, float] = {}
    try:
        for _ in range(cfg.d_steps_per_g_step):
            z = rng.standard_normal((b, dz))
            ctx = BatchContext(x, mask, z, z, real, gp_seed=int(rng.integers(2 ** 63)))
            bound = _leaves(params, GROUPS["d"])
            out = discriminator_loss(ctx, model.with_params(bound), cfg.weights, cfg.kernel, cfg.gp_eps)
            adam_update(params, _grads(bound, GROUPS["d"], out.total), states["d"], lr, **adam)
            terms["gp"] = out.terms["gp"]

        z1 = rng.standard_normal((b, dz))
        z2 = rng.standard_normal((b, dz))
        ctx = BatchContext(x, mask, z1, z2, real)
        bound = _leaves(params, GROUPS["g"])
        gm = model.with_params(bound)
        out = generator_loss(ctx, gm, cfg.weights, cfg.kernel, cfg.diversity)
        grads = _grads(bound, GROUPS["g"], out.total)
        fakes = out.extras
        adam_update(params, grads, states["g"], lr, **adam)
        terms.update(out.terms)

        bound = _leaves(params, GROUPS["c"])
        M = model.with_params(bound).camera(x)
        l2d = 0.5 * (loss_2d(M, fakes["g1"], x, mask) + loss_2d(M, fakes["g2"], x, mask))
        lcam = camera_loss(M)
        total = cfg.weights.two_d * l2d + lcam
        adam_update(params, _grads(bound, GROUPS["c"], total), states["c"], lr, **adam)
        terms["cam"] = float(lcam.value)
    except (tape.TapeError, LossError) as exc:
        raise TrainingDiverged("loss", str(exc)) from None
    for k, v in terms.items():
        if not np.isfinite(v):
            raise TrainingDiverged(f"L_{k}")
    return terms


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: List[str]

    @property
    def model(self) -> Model:
        return self.checkpoint.model()


def _metrics_line(step: int, epoch: int, t: Mapping[str, float], lr: float) -> str:
    vals = [t["adv"], t["2d"], t["reg"], t["rec"], t["gp"], t["cam"], lr]
    return "\t".join([str(step), str(epoch)] + [repr(float(v)) for v in vals])


def _checkpoint(cfg: TrainConfig, mcfg: ModelConfig, sk: Skeleton, params: ParamStore,
                states: Dict[str, AdamState], epoch: int, step: int) -> Checkpoint:
    extra: OrderedDict = OrderedDict()
    for g, st in states.items():
        extra[f"adam.{g}.step"] = np.array([float(st.step)])
        for name in st.m:
            extra[f"adam.{g}.m.{name}"] = st.m[name]
            extra[f"adam.{g}.v.{name}"] = st.v[name]
    config = {"model": mcfg.to_dict(), "skeleton": sk.to_dict(), "train": dict(cfg.to_flat())}
    return Checkpoint(config=config, params=params.copy(),
                      extra=OrderedDict((k, v.copy()) for k, v in extra.items()),
                      seeds={"init": cfg.seed, "train": cfg.seed}, epoch=epoch, step=step)


def _restore_states(ckpt: Checkpoint) -> Dict[str, AdamState]:
    states = {g: AdamState() for g in GROUPS}
    for key, arr in ckpt.extra.items():
        parts = key.split(".", 3)
        if parts[0] != "adam":
            continue
        st = states[parts[1]]
        if parts[2] == "step":
            st.step = int(arr[0])
        else:
            (st.m if parts[2] == "m" else st.v)[parts[3]] = arr.copy()
    return states


def model_config_for(data: TrainingData, cfg: TrainConfig) -> ModelConfig:
    scale = float(np.std(data.pool))
    if not scale > 0:
        raise DataError("3D pool has zero spread")
    return ModelConfig(joint_count=data.skeleton.joint_count, latent_dim=cfg.latent_dim,
                       feature_dim=cfg.feature_dim, hidden_width=cfg.hidden_width,
                       residual_blocks=cfg.residual_blocks, pose_scale=scale)


def train(data: TrainingData, cfg: TrainConfig, out_dir=None, resume: Optional[Checkpoint] = None,
          progress=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs (beyond ``resume``'s epoch when resuming).

    Output files, when ``out_dir`` is given: ``epoch_<n>.ckpt`` after every
    epoch (``epoch_0.ckpt`` is the initialization) and ``metrics.tsv``.
    """
    sk = data.skeleton
    c = sk.joint_count
    if resume is not None:
        mcfg = ModelConfig(**resume.config["model"])
        if Skeleton.from_dict(resume.config["skeleton"]) != sk:
            raise TrainingError("checkpoint skeleton differs from the dataset skeleton")
        params = resume.params.copy()
        states = _restore_states(resume)
        start_epoch, step = resume.epoch, resume.step
    else:
        mcfg = model_config_for(data, cfg)
        params = init_params(mcfg, cfg.seed)
        states = {g: AdamState() for g in GROUPS}
        start_epoch, step = 0, 0
    model = Model(mcfg, sk, params)
    out = Path(out_dir) if out_dir is not None else None
    metrics: List[str] = []
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume is None:
            _checkpoint(cfg, mcfg, sk, params, states, 0, 0).save(out / "epoch_0.ckpt")
        # a resumed run appends to the log already in out_dir, if any
        fresh = resume is None or not (out / "metrics.tsv").is_file()
        log_fh = open(out / "metrics.tsv", "w" if fresh else "a")
        if fresh:
            log_fh.write("\t".join(METRIC_COLUMNS) + "\n")
    n = len(data.x)
    b = min(cfg.batch_size, n)
    if b < 4:
        raise DataError("need at least 4 training inputs")
    steps_per_epoch = max(n // b, 1)
    try:
        for epoch in range(start_epoch, start_epoch + cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            rng = np.random.Generator(np.random.Philox(_seed(cfg.seed, 1, epoch)))
            order = rng.permutation(n)
            pool_order = np.concatenate([rng.permutation(len(data.pool))
                                         for _ in range(-(-steps_per_epoch * b // len(data.pool)))])
            x_all, mask_all = data.x.copy(), data.mask.copy()
            if cfg.missing_joint_policy != "none":
                xj = x_all.reshape(n, c, 2)
                for i in range(n):
                    miss = draw_missing(sk.limbs, cfg.missing_joint_policy, rng)
                    xj[i, miss] = 0.0
                    mask_all[i, miss] = 0.0
            for s in range(steps_per_epoch):
                idx = order[s * b:(s + 1) * b]
                real = data.pool[pool_order[s * b:(s + 1) * b]]
                terms = train_step((x_all[idx], real, mask_all[idx]), model, params, states, cfg,
                                   _seed(cfg.seed, 2, step), lr)
                line = _metrics_line(step, epoch, terms, lr)
                metrics.append(line)
                if log_fh is not None:
                    log_fh.write(line + "\n")
                step += 1
            if progress is not None:
                progress(epoch, terms)
            if out is not None:
                log_fh.flush()
                _checkpoint(cfg, mcfg, sk, params, states, epoch + 1, step).save(out / f"epoch_{epoch + 1}.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()
    final = _checkpoint(cfg, mcfg, sk, params, states, start_epoch + cfg.epochs, step)
    return TrainResult(final, metrics)
