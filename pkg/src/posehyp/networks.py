"""The four networks (pose generator, discriminator, latent encoder, camera)
and their parameter storage / checkpoint container."""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from . import tape
from .skeleton import GeometryError, Skeleton, kcs, orthographic

NETWORKS = ("generator", "discriminator", "encoder", "camera")


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class MLPConfig:
    input_dim: int
    output_dim: int
    hidden_width: int = 1024
    residual_blocks: int = 2
    slope: float = 0.2

    def __post_init__(self):
        if min(self.input_dim, self.output_dim, self.hidden_width) <= 0 or self.residual_blocks < 0:
            raise NetworkError(f"invalid MLP config {self}")

    def shapes(self, prefix: str) -> List[Tuple[str, Tuple[int, ...]]]:
        w = self.hidden_width
        out = [(f"{prefix}.in.W", (self.input_dim, w)), (f"{prefix}.in.b", (w,))]
        for k in range(self.residual_blocks):
            for i in range(2):
                out += [(f"{prefix}.block{k}.{i}.W", (w, w)), (f"{prefix}.block{k}.{i}.b", (w,))]
        out += [(f"{prefix}.out.W", (w, self.output_dim)), (f"{prefix}.out.b", (self.output_dim,))]
        return out


@dataclass(frozen=True)
class ModelConfig:
    joint_count: int
    latent_dim: int = 32
    feature_dim: int = 32
    hidden_width: int = 1024
    residual_blocks: int = 2
    slope: float = 0.2
    # fixed mm-per-unit scale between network space and pose space
    pose_scale: float = 1.0
    # output layers start small so initial poses, features and cameras stay near zero
    output_gain: float = 0.1

    def mlp(self, network: str) -> MLPConfig:
        c = self.joint_count
        dims = {
            "generator": (2 * c + self.latent_dim, 3 * c),
            "discriminator": (3 * c + (c - 1) * c // 2, self.feature_dim),
            "encoder": (3 * c, self.latent_dim),
            "camera": (2 * c, 6),
        }
        if network not in dims:
            raise NetworkError(f"unknown network {network!r}")
        i, o = dims[network]
        return MLPConfig(i, o, self.hidden_width, self.residual_blocks, self.slope)

    def to_dict(self) -> dict:
        return asdict(self)


class ParamStore(OrderedDict):
    """Ordered map of parameter name -> float64 array; remembers its creation seed."""

    def __init__(self, *args, seed: Optional[int] = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.seed = seed

    def copy(self) -> "ParamStore":
        return ParamStore(((k, v.copy()) for k, v in self.items()), seed=self.seed)

    def subset(self, network: str) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.items() if k.startswith(network + ".")}


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    """Kaiming-uniform weights (leaky-ReLU gain; ``output_gain`` on output layers), zero biases."""
    rng = np.random.Generator(np.random.Philox(seed))
    gain = np.sqrt(2.0 / (1.0 + cfg.slope ** 2))
    store = ParamStore(seed=seed)
    for net in NETWORKS:
        for name, shape in cfg.mlp(net).shapes(net):
            if name.endswith(".b"):
                store[name] = np.zeros(shape)
            else:
                g = cfg.output_gain if name.endswith(".out.W") else gain
                bound = g * np.sqrt(3.0 / shape[0])
                store[name] = rng.uniform(-bound, bound, size=shape)
    return store


def kaiming_std(fan_in: int, slope: float = 0.2) -> float:
    return float(np.sqrt(2.0 / (1.0 + slope ** 2)) / np.sqrt(fan_in))


def mlp_forward(p: Mapping, prefix: str, cfg: MLPConfig, h):
    h = tape.leaky_relu(h @ p[f"{prefix}.in.W"] + p[f"{prefix}.in.b"], cfg.slope)
    for k in range(cfg.residual_blocks):
        r = tape.leaky_relu(h @ p[f"{prefix}.block{k}.0.W"] + p[f"{prefix}.block{k}.0.b"], cfg.slope)
        r = tape.leaky_relu(r @ p[f"{prefix}.block{k}.1.W"] + p[f"{prefix}.block{k}.1.b"], cfg.slope)
        h = h + r
    return h @ p[f"{prefix}.out.W"] + p[f"{prefix}.out.b"]


def _rows(a, dim: int, what: str):
    t = tape.as_tensor(a)
    if t.ndim == 1:
        t = t.reshape(1, -1)
    if t.shape[-1] != dim:
        raise NetworkError(f"{what}: expected last dimension {dim}, got {t.shape[-1]}")
    return t


class Model:
    """Network forwards bound to a parameter map.

    ``params`` values may be numpy arrays or tape tensors; passing tape leaves for
    some networks makes those differentiable while the rest act as constants.
    All forwards are batched over the leading axis.
    """

    def __init__(self, cfg: ModelConfig, skeleton: Skeleton, params: Mapping):
        if skeleton.joint_count != cfg.joint_count:
            raise NetworkError("skeleton joint count does not match model config")
        self.cfg = cfg
        self.skeleton = skeleton
        self.params = params
        c = cfg.joint_count
        root_mask = np.ones((c, 3))
        root_mask[skeleton.root] = 0.0
        self._root_mask = root_mask.reshape(-1)
        self._triu = np.flatnonzero(np.triu(np.ones((c - 1, c - 1))).reshape(-1))

    def with_params(self, params: Mapping) -> "Model":
        return Model(self.cfg, self.skeleton, params)

    def normalize(self, y):
        return y * (1.0 / self.cfg.pose_scale)

    def denormalize(self, y):
        return y * self.cfg.pose_scale

    def generator(self, x, z):
        c = self.cfg.joint_count
        x = _rows(x, 2 * c, "generator x")
        z = _rows(z, self.cfg.latent_dim, "generator z")
        if x.shape[0] != z.shape[0]:
            raise NetworkError("generator: x and z batch sizes differ")
        out = mlp_forward(self.params, "generator", self.cfg.mlp("generator"), tape.concat([x, z], axis=1))
        return out * (self._root_mask * self.cfg.pose_scale)

    def discriminator_input(self, y):
        c = self.cfg.joint_count
        yn = self.normalize(_rows(y, 3 * c, "discriminator y"))
        try:
            k = kcs(yn, self.skeleton)
        except GeometryError as exc:
            raise NetworkError(str(exc)) from None
        flat = k.reshape(k.shape[0], (c - 1) * (c - 1))[:, self._triu]
        return tape.concat([yn, flat], axis=1)

    def discriminator(self, y):
        return mlp_forward(self.params, "discriminator", self.cfg.mlp("discriminator"),
                           self.discriminator_input(y))

    def encoder(self, y):
        yn = self.normalize(_rows(y, 3 * self.cfg.joint_count, "encoder y"))
        return mlp_forward(self.params, "encoder", self.cfg.mlp("encoder"), yn)

    def camera(self, x):
        x = _rows(x, 2 * self.cfg.joint_count, "camera x")
        out = mlp_forward(self.params, "camera", self.cfg.mlp("camera"), x)
        # start from an orthographic camera; the output head learns the residual
        return (out.reshape(-1, 2, 3) + orthographic()) * (1.0 / self.cfg.pose_scale)


def generator_forward(x, z, params, cfg: ModelConfig, skeleton: Skeleton) -> np.ndarray:
    return tape.value_of(Model(cfg, skeleton, params).generator(x, z))


def discriminator_forward(y, skeleton: Skeleton, params, cfg: ModelConfig) -> np.ndarray:
    return tape.value_of(Model(cfg, skeleton, params).discriminator(y))


def encoder_forward(y, params, cfg: ModelConfig, skeleton: Skeleton) -> np.ndarray:
    return tape.value_of(Model(cfg, skeleton, params).encoder(y))


def camera_net_forward(x, params, cfg: ModelConfig, skeleton: Skeleton) -> np.ndarray:
    return tape.value_of(Model(cfg, skeleton, params).camera(x))


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"POSEHYP-CKPT\n"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """Versioned container: JSON header line followed by raw little-endian float64 data."""

    config: dict
    params: ParamStore
    extra: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    seeds: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0

    def save(self, path) -> None:
        entries, blobs, offset = [], [], 0
        for section, arrays in (("params", self.params), ("extra", self.extra)):
            for name, arr in arrays.items():
                a = np.ascontiguousarray(arr, dtype="<f8")
                entries.append({"section": section, "name": name, "shape": list(a.shape),
                                "offset": offset, "count": int(a.size)})
                blobs.append(a.tobytes())
                offset += a.size
        header = {"version": CHECKPOINT_VERSION, "config": self.config, "seeds": self.seeds,
                  "param_seed": self.params.seed, "epoch": self.epoch, "step": self.step,
                  "arrays": entries}
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
            for b in blobs:
                fh.write(b)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if not raw.startswith(CHECKPOINT_MAGIC):
            raise NetworkError(f"{path}: not a checkpoint file")
        rest = raw[len(CHECKPOINT_MAGIC):]
        nl = rest.index(b"\n")
        header = json.loads(rest[:nl])
        if header.get("version") != CHECKPOINT_VERSION:
            raise NetworkError(f"{path}: unsupported checkpoint version {header.get('version')}")
        data = np.frombuffer(rest[nl + 1:], dtype="<f8")
        params = ParamStore(seed=header.get("param_seed"))
        extra: OrderedDict = OrderedDict()
        for e in header["arrays"]:
            a = data[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)
            (params if e["section"] == "params" else extra)[e["name"]] = a
        return cls(config=header["config"], params=params, extra=extra, seeds=header["seeds"],
                   epoch=int(header["epoch"]), step=int(header["step"]))

    def model(self) -> Model:
        cfg = ModelConfig(**self.config["model"])
        return Model(cfg, Skeleton.from_dict(self.config["skeleton"]), self.params)


def params_equal(a: Mapping, b: Mapping) -> bool:
    return list(a) == list(b) and all(np.array_equal(a[k], b[k]) for k in a)
