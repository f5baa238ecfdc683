"""Residual regressor with a deliberately small receptive field.

The trunk has three stages: three residual blocks in stage 1 (with the
only two max-pool layers between them), one block each in stages 2 and 3,
and all stage-3 convolutions are 1x1.  A global average pool follows
stage 3, and a 1x1 feed-forward head (a linear map on the pooled
embedding) produces the seven feature predictions.  Keeping kernels small
and pooling scarce keeps the receptive field far below that of a
standard residual network, which `receptive_field` makes measurable.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import (BatchNorm2d, Conv2d, GlobalAvgPool2d, Linear, MaxPool2d, ReLU,
                 ResidualBlock, Sequential)

N_OUTPUTS = 7

CHECKPOINT_MAGIC = b"MLNCKPT1"


class ConfigError(ValueError):
    """Architecture config violates a structural invariant."""


@dataclass(frozen=True)
class RFResNetConfig:
    """Structure of the trunk; widths and kernels are overridable, the
    block layout (3 blocks, then 1, then 1; stage 3 all 1x1) is enforced."""

    in_channels: int = 1
    stem_channels: int = 64
    stage1_channels: tuple[int, ...] = (64, 128, 128)
    stage2_channels: tuple[int, ...] = (256,)
    stage3_channels: tuple[int, ...] = (512,)
    stage1_kernels: tuple[tuple[int, int], ...] = ((3, 3), (3, 3), (3, 3))
    stage2_kernels: tuple[tuple[int, int], ...] = ((3, 1),)
    stage3_kernels: tuple[tuple[int, int], ...] = ((1, 1),)
    pool_after: tuple[int, ...] = (0, 1)   # stage-1 block indices followed by a pool
    pool_size: int = 2
    n_outputs: int = N_OUTPUTS
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.stage1_channels) != 3 or len(self.stage1_kernels) != 3:
            raise ConfigError("stage 1 must have exactly 3 residual blocks")
        if len(self.stage2_channels) != 1 or len(self.stage2_kernels) != 1:
            raise ConfigError("stage 2 must have exactly 1 residual block")
        if len(self.stage3_channels) != 1 or len(self.stage3_kernels) != 1:
            raise ConfigError("stage 3 must have exactly 1 residual block")
        for ks in self.stage3_kernels:
            if any(k != 1 for k in ks):
                raise ConfigError("every stage-3 layer must have kernel size 1x1")
        if self.n_outputs != N_OUTPUTS:
            raise ConfigError(f"output dimensionality must be {N_OUTPUTS}")
        if len(self.pool_after) != 2 or any(i not in (0, 1, 2) for i in self.pool_after):
            raise ConfigError("exactly two stage-1 max pools are expected")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def embedding_width(self) -> int:
        return self.stage3_channels[-1]

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @classmethod
    def tiny(cls, channels: int = 2, dtype: str = "float64") -> "RFResNetConfig":
        """Smallest valid config; used by gradient checks."""
        c = channels
        return cls(stem_channels=c, stage1_channels=(c, c, c),
                   stage2_channels=(c,), stage3_channels=(c,), dtype=dtype)

    @classmethod
    def small(cls, width: int = 8, dtype: str = "float32") -> "RFResNetConfig":
        """Desk-scale config for the synthetic pipeline."""
        w = width
        return cls(stem_channels=w, stage1_channels=(w, 2 * w, 2 * w),
                   stage2_channels=(2 * w,), stage3_channels=(4 * w,), dtype=dtype)


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Domain head on the pooled trunk embedding: MLP to one logit."""

    input_width: int = 512
    hidden: tuple[int, ...] = (128,)

    def __post_init__(self):
        if self.input_width < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("discriminator widths must be positive")


class Model:
    """Trunk + head with config and provenance; the checkpointable unit."""

    def __init__(self, config: RFResNetConfig, trunk: Sequential, head: Linear,
                 provenance: dict | None = None):
        self.config = config
        self.trunk = trunk
        self.head = head
        self.provenance = dict(provenance or {})

    # -- parameter plumbing -------------------------------------------------
    def params(self) -> dict[str, np.ndarray]:
        return {**self.trunk.params(), **{f"head.{k}": v
                                          for k, v in self.head.params().items()}}

    def grads(self) -> dict[str, np.ndarray]:
        return {**self.trunk.grads(), **{f"head.{k}": v
                                         for k, v in self.head.grads().items()}}

    def buffers(self) -> dict[str, np.ndarray]:
        return self.trunk.buffers()

    def zero_grads(self) -> None:
        for g in self.grads().values():
            g[...] = 0.0

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {**self.params(), **self.buffers()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)[:3]} "
                             f"extra={sorted(extra)[:3]}")
        for k, v in own.items():
            src = np.asarray(arrays[k], dtype=v.dtype)
            if src.shape != v.shape:
                raise ValueError(f"{k}: shape {src.shape} != {v.shape}")
            v[...] = src

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    # -- running the network -------------------------------------------------
    @staticmethod
    def _as_batch(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[:, None, :, :]
        if x.ndim != 4:
            raise ValueError(f"expected (n, bands, frames) or (n, c, bands, frames), "
                             f"got shape {x.shape}")
        return x

    def forward(self, x: np.ndarray, train: bool = False,
                return_embedding: bool = False):
        x = self._as_batch(x).astype(self.config.np_dtype())
        emb = self.trunk.forward(x, train)
        pred = self.head.forward(emb, train)
        if return_embedding:
            return pred, emb
        return pred

    def backward(self, dpred: np.ndarray, demb_extra: np.ndarray | None = None) -> None:
        """Backprop dL/dpred (plus an optional extra embedding gradient)."""
        demb = self.head.backward(dpred)
        if demb_extra is not None:
            demb = demb + demb_extra
        self.trunk.backward(demb)

    def predict(self, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Evaluation-mode predictions, batched; per-example deterministic."""
        x = self._as_batch(x)
        outs = [self.forward(x[i:i + batch_size], train=False)
                for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def embed(self, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Evaluation-mode pooled embeddings, batched."""
        x = self._as_batch(x)
        outs = []
        for i in range(0, len(x), batch_size):
            _, emb = self.forward(x[i:i + batch_size], train=False,
                                  return_embedding=True)
            outs.append(emb)
        return np.concatenate(outs, axis=0)

    @property
    def checkpoint_id(self) -> str:
        return str(self.provenance.get("run_id", "unnamed"))


def build_model(config: RFResNetConfig | None = None, seed: int = 0) -> Model:
    """Deterministically initialized model for the given config and seed."""
    config = config or RFResNetConfig()
    rng = np.random.default_rng(seed)
    dt = config.np_dtype()

    layers: list = [
        Conv2d(config.in_channels, config.stem_channels, (3, 3), rng=rng,
               dtype=dt, name="stem.conv"),
        BatchNorm2d(config.stem_channels, dtype=dt, name="stem.bn"),
        ReLU(name="stem.relu"),
    ]
    in_ch = config.stem_channels
    for i, (out_ch, ks) in enumerate(zip(config.stage1_channels, config.stage1_kernels)):
        layers.append(ResidualBlock(in_ch, out_ch, ks, rng=rng, dtype=dt,
                                    name=f"stage1.block{i}"))
        in_ch = out_ch
        if i in config.pool_after:
            layers.append(MaxPool2d(config.pool_size, name=f"stage1.pool{i}"))
    for stage, (chans, kerns) in ((2, (config.stage2_channels, config.stage2_kernels)),
                                  (3, (config.stage3_channels, config.stage3_kernels))):
        for i, (out_ch, ks) in enumerate(zip(chans, kerns)):
            layers.append(ResidualBlock(in_ch, out_ch, ks, rng=rng, dtype=dt,
                                        name=f"stage{stage}.block{i}"))
            in_ch = out_ch
    layers.append(GlobalAvgPool2d(name="gap"))
    trunk = Sequential(layers)
    head = Linear(in_ch, config.n_outputs, rng=rng, dtype=dt, name="out")
    return Model(config, trunk, head, provenance={"stage": "init", "seed": seed})


def forward(model: Model, batch: np.ndarray, return_embedding: bool = False):
    """Module-level alias for Model.forward in evaluation mode."""
    return model.forward(batch, train=False, return_embedding=return_embedding)


def build_discriminator(config: DiscriminatorConfig | None = None, seed: int = 0,
                        dtype=np.float32) -> Sequential:
    """MLP domain head producing one logit per example."""
    config = config or DiscriminatorConfig()
    rng = np.random.default_rng(seed)
    layers: list = []
    widths = [config.input_width, *config.hidden]
    for i in range(len(widths) - 1):
        layers.append(Linear(widths[i], widths[i + 1], rng=rng, dtype=dtype,
                             name=f"fc{i}"))
        layers.append(ReLU(name=f"relu{i}"))
    layers.append(Linear(widths[-1], 1, rng=rng, dtype=dtype, name="logit"))
    return Sequential(layers, name="disc")


# ---------------------------------------------------------------------------
# Receptive fields


def receptive_field_of_layers(layers) -> tuple[int, int]:
    """Compose r <- r + (k - 1) * j, j <- j * s over ((kh, kw), (sh, sw)) layers."""
    rf = [1, 1]
    jump = [1, 1]
    for (kh, kw), (sh, sw) in layers:
        for axis, (k, s) in enumerate(((kh, sh), (kw, sw))):
            rf[axis] += (k - 1) * jump[axis]
            jump[axis] *= s
    return rf[0], rf[1]


def trunk_layer_specs(config: RFResNetConfig) -> list:
    """(kernel, stride) pairs along the trunk's main path, pre-pool.

    The residual skips are 1x1 and never widen the field, so the main path
    determines it; the global average pool and the post-pool head are not
    part of the composition.
    """
    specs = [((3, 3), (1, 1))]                      # stem conv
    for i, ks in enumerate(config.stage1_kernels):
        for k in ks:
            specs.append(((k, k), (1, 1)))
        if i in config.pool_after:
            p = config.pool_size
            specs.append(((p, p), (p, p)))
    for kerns in (config.stage2_kernels, config.stage3_kernels):
        for ks in kerns:
            for k in ks:
                specs.append(((k, k), (1, 1)))
    return specs


def receptive_field(config: RFResNetConfig) -> tuple[int, int]:
    """(rf_freq, rf_time) of one pre-pool trunk unit, in input pixels."""
    return receptive_field_of_layers(trunk_layer_specs(config))


def reference_resnet_layer_specs() -> list:
    """Main-path layers of an unmodified 18-layer residual network.

    7x7 stride-2 stem, 3x3 stride-2 max pool, then four stages of two
    3x3+3x3 blocks with stride-2 entry convs from stage 2 on.
    """
    specs = [((7, 7), (2, 2)), ((3, 3), (2, 2))]
    for stage in range(4):
        for block in range(2):
            stride = 2 if (stage > 0 and block == 0) else 1
            specs.append(((3, 3), (stride, stride)))
            specs.append(((3, 3), (1, 1)))
    return specs


# ---------------------------------------------------------------------------
# Checkpoints


def _config_to_jsonable(config) -> dict:
    def conv(v):
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v
    return {k: conv(v) for k, v in dataclasses.asdict(config).items()}


def _config_from_jsonable(d: dict) -> RFResNetConfig:
    def detuple(v):
        if isinstance(v, list):
            return tuple(detuple(x) for x in v)
        return v
    return RFResNetConfig(**{k: detuple(v) for k, v in d.items()})


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Self-describing container: JSON header + named little-endian float32 arrays."""
    arrays = model.state_arrays()
    names = sorted(arrays)
    header = {
        "config": _config_to_jsonable(model.config),
        "provenance": model.provenance,
        "arrays": [{"name": k, "shape": list(arrays[k].shape)} for k in names],
        "dtype": "float32",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint64(len(blob)).tobytes())
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(arrays[k], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    hlen = int(np.frombuffer(raw[8:16], dtype=np.uint64)[0])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    config = _config_from_jsonable(header["config"])
    model = build_model(config, seed=0)
    offset = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw[offset:offset + 4 * count], dtype="<f4").reshape(shape)
        arrays[entry["name"]] = arr
        offset += 4 * count
    model.load_state(arrays)
    model.provenance = dict(header["provenance"])
    return model


def models_equal(a: Model, b: Model) -> bool:
    sa, sb = a.state_arrays(), b.state_arrays()
    return set(sa) == set(sb) and all(np.array_equal(sa[k], sb[k]) for k in sa)
