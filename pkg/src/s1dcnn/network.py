"""Model assembly, receptive-field and cost accounting, and model files.

A model is ``D`` blocks of (unit, batch norm) followed by a linear head and a
softmax. Block 1 reads context-stacked features of size ``F0 * (2C + 1)``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .layers import (Activation, BatchNorm, Linear, S1DCNNUnit, SvdfLayer, batchnorm_backward,
                     batchnorm_forward, linear_backward, linear_forward, reduce_svdf_to_unit,
                     svdf_forward, unit_backward, unit_forward)
from .numerics import FLOAT, Rng, softmax

MODEL_MAGIC = b"S1DC"
MODEL_VERSION = 1
ARCHS = ("s1dcnn", "svdf")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 13
    context: int = 5
    depth: int = 7
    filters: int = 32
    memory: int = 9
    lookahead: int = 0
    classes: int = 2
    arch: str = "s1dcnn"
    hop_ms: int = 10
    g1: Activation = Activation.IDENTITY
    g2: Activation = Activation.RELU
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        for name in ("feature_dim", "depth", "filters", "memory", "classes", "hop_ms"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.context < 0:
            raise ConfigError(f"context must be >= 0, got {self.context}")
        if not 0 <= self.lookahead <= self.memory - 1:
            raise ConfigError(f"lookahead must lie in [0, {self.memory - 1}], got {self.lookahead}")
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.arch == "svdf" and (self.lookahead != 0 or self.g1 != Activation.IDENTITY):
            raise ConfigError("svdf blocks have no lookahead and an identity first stage")
        if not (self.bn_eps > 0 and 0 < self.bn_momentum < 1):
            raise ConfigError("batch norm needs eps > 0 and momentum in (0, 1)")
        object.__setattr__(self, "g1", Activation(self.g1))
        object.__setattr__(self, "g2", Activation(self.g2))

    @property
    def input_dim(self) -> int:
        return self.feature_dim * (2 * self.context + 1)

    @property
    def latency_frames(self) -> int:
        """Frames between pushing an input frame and scoring it when streaming."""
        return self.context + self.lookahead * self.depth


def paper_config(lookahead: int = 0, arch: str = "s1dcnn") -> ModelConfig:
    """13 MFCCs with +-5 frames of context, 7 blocks of 32 filters, memory 9."""
    return ModelConfig(feature_dim=13, context=5, depth=7, filters=32, memory=9,
                       lookahead=lookahead, classes=2, arch=arch)


@dataclass
class Block:
    layer: S1DCNNUnit | SvdfLayer
    bn: BatchNorm

    def as_unit(self) -> S1DCNNUnit:
        if isinstance(self.layer, SvdfLayer):
            return reduce_svdf_to_unit(self.layer)
        return self.layer


@dataclass
class Model:
    config: ModelConfig
    blocks: list[Block]
    head: Linear

    def __post_init__(self):
        cfg = self.config
        if len(self.blocks) != cfg.depth:
            raise ShapeError(f"expected {cfg.depth} blocks, got {len(self.blocks)}")
        for i, blk in enumerate(self.blocks):
            want = cfg.input_dim if i == 0 else cfg.filters
            if blk.layer.in_dim != want or blk.layer.filters != cfg.filters:
                raise ShapeError(f"block {i} has shape ({blk.layer.filters}, {blk.layer.in_dim})")
        if self.head.weights.shape != (cfg.classes, cfg.filters):
            raise ShapeError(f"head has shape {self.head.weights.shape}")

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays in file order; the arrays are the model's own storage."""
        out = []
        for i, blk in enumerate(self.blocks):
            if isinstance(blk.layer, SvdfLayer):
                out += [(f"blocks.{i}.beta", blk.layer.beta), (f"blocks.{i}.alpha", blk.layer.alpha)]
            else:
                u = blk.layer
                out += [(f"blocks.{i}.feature_weights", u.feature_weights),
                        (f"blocks.{i}.feature_bias", u.feature_bias),
                        (f"blocks.{i}.time_weights", u.time_weights),
                        (f"blocks.{i}.time_bias", u.time_bias)]
            out += [(f"blocks.{i}.gamma", blk.bn.gamma), (f"blocks.{i}.beta_shift", blk.bn.beta_shift)]
        out += [("head.weights", self.head.weights), ("head.bias", self.head.bias)]
        return out

    def tensors(self) -> list[np.ndarray]:
        """Every stored array (parameters and running statistics) in file order."""
        out = []
        for blk in self.blocks:
            if isinstance(blk.layer, SvdfLayer):
                out += [blk.layer.beta, blk.layer.alpha]
            else:
                u = blk.layer
                out += [u.feature_weights, u.feature_bias, u.time_weights, u.time_bias]
            bn = blk.bn
            out += [bn.gamma, bn.beta_shift, bn.running_mean, bn.running_var]
        out += [self.head.weights, self.head.bias]
        return out

    def astype(self, dtype) -> "Model":
        """Deep copy with every array cast to ``dtype``."""
        arrays = iter([t.astype(dtype) for t in self.tensors()])
        return _assemble(self.config, lambda shape: next(arrays))


def _assemble(cfg: ModelConfig, take) -> Model:
    """Build a model pulling arrays in file order from ``take(shape)``."""
    blocks = []
    for i in range(cfg.depth):
        f = cfg.input_dim if i == 0 else cfg.filters
        n, k = cfg.filters, cfg.memory
        if cfg.arch == "svdf":
            layer = SvdfLayer(take((n, f)), take((n, k)), cfg.g2)
        else:
            layer = S1DCNNUnit(take((n, f)), take((n,)), take((n, k)), take((n,)),
                               cfg.lookahead, cfg.g1, cfg.g2)
        bn = BatchNorm(take((n,)), take((n,)), take((n,)), take((n,)), cfg.bn_eps, cfg.bn_momentum)
        blocks.append(Block(layer, bn))
    head = Linear(take((cfg.classes, cfg.filters)), take((cfg.classes,)))
    return Model(cfg, blocks, head)


def build(config: ModelConfig, rng: Rng) -> Model:
    """Weights uniform in +-1/sqrt(fan_in), biases zero, batch norm at identity."""
    cfg = config
    n, k = cfg.filters, cfg.memory

    def uniform(shape, fan_in):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape).astype(FLOAT)

    blocks = []
    for i in range(cfg.depth):
        f = cfg.input_dim if i == 0 else n
        w = uniform((n, f), f)
        wt = uniform((n, k), k)
        if cfg.arch == "svdf":
            layer = SvdfLayer(w, wt, cfg.g2)
        else:
            layer = S1DCNNUnit(w, np.zeros(n, FLOAT), wt, np.zeros(n, FLOAT), cfg.lookahead, cfg.g1, cfg.g2)
        blocks.append(Block(layer, BatchNorm.identity(n, cfg.bn_eps, cfg.bn_momentum)))
    head = Linear(uniform((cfg.classes, n), n), np.zeros(cfg.classes, FLOAT))
    return Model(cfg, blocks, head)


def to_s1dcnn(model: Model) -> Model:
    """Replace every SVDF block by its equivalent S1DCNN unit."""
    if model.config.arch == "s1dcnn":
        return model
    cfg = replace(model.config, arch="s1dcnn")
    blocks = [Block(b.as_unit(), b.bn) for b in model.blocks]
    return Model(cfg, blocks, model.head)


# --- forward / backward -----------------------------------------------------------

def logits(model: Model, feats: np.ndarray) -> np.ndarray:
    """Inference logits ``(..., classes, T)`` for context-stacked ``feats``."""
    if feats.ndim < 2 or feats.shape[-2] != model.config.input_dim:
        raise ShapeError(f"expected {model.config.input_dim}-dim features, got shape {feats.shape}")
    h = feats
    for blk in model.blocks:
        if isinstance(blk.layer, SvdfLayer):
            h = svdf_forward(blk.layer, h)
        else:
            h = unit_forward(blk.layer, h)
        h = batchnorm_forward(blk.bn, h, "infer")
    return linear_forward(model.head, h)


def forward(model: Model, feats: np.ndarray) -> np.ndarray:
    """Per-frame class posteriors ``(..., classes, T)``."""
    return softmax(logits(model, feats), axis=-2)


def forward_train(model: Model, feats: np.ndarray, mask: np.ndarray | None = None,
                  bn_mode: str = "train") -> tuple[np.ndarray, dict]:
    """Logits plus the cache :func:`backward` needs.

    ``feats`` may be a padded batch ``(B, F, T)`` with ``mask`` ``(B, T)``.
    SVDF blocks run through their reduced unit so both architectures share one
    backward path.
    """
    h = feats
    caches = []
    for blk in model.blocks:
        cu, cb = {}, {}
        h = unit_forward(blk.as_unit(), h, mask, cu)
        h = batchnorm_forward(blk.bn, h, bn_mode, mask, cb)
        caches.append((cu, cb))
    ch = {}
    out = linear_forward(model.head, h, ch)
    return out, {"blocks": caches, "head": ch}


def backward(model: Model, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every entry of :meth:`Model.named_parameters`, plus
    ``"input"`` for the feature gradient."""
    grads = {}
    g, gh = linear_backward(model.head, cache["head"], dlogits)
    grads["head.weights"], grads["head.bias"] = gh["weights"], gh["bias"]
    for i in reversed(range(len(model.blocks))):
        blk = model.blocks[i]
        cu, cb = cache["blocks"][i]
        g, gbn = batchnorm_backward(blk.bn, cb, g)
        grads[f"blocks.{i}.gamma"] = gbn["gamma"]
        grads[f"blocks.{i}.beta_shift"] = gbn["beta_shift"]
        g, gu = unit_backward(blk.as_unit(), cu, g)
        if isinstance(blk.layer, SvdfLayer):
            grads[f"blocks.{i}.beta"] = gu["feature_weights"]
            grads[f"blocks.{i}.alpha"] = gu["time_weights"]
        else:
            for name, val in gu.items():
                grads[f"blocks.{i}.{name}"] = val
    grads["input"] = g
    return grads


# --- accounting ------------------------------------------------------------------------

def receptive_field(config: ModelConfig) -> tuple[int, int]:
    """(past_ms, future_ms) of input audio that can influence one output frame."""
    c = config
    past = (c.memory - 1 - c.lookahead) * c.depth + c.context
    future = c.lookahead * c.depth + c.context
    return past * c.hop_ms, future * c.hop_ms


def output_delay(config: ModelConfig) -> int:
    """Milliseconds an output frame lags its input frame."""
    return config.latency_frames * config.hop_ms


@dataclass
class ParamCount:
    total: int
    conv: int
    batchnorm: int
    linear: int


def count_params(model: Model | ModelConfig) -> ParamCount:
    """Conv weights and biases, batch-norm gamma and beta, head weights and bias.

    Running statistics are not parameters. SVDF blocks have no conv biases.
    """
    cfg = model.config if isinstance(model, Model) else model
    n, k = cfg.filters, cfg.memory
    conv = 0
    for i in range(cfg.depth):
        f = cfg.input_dim if i == 0 else n
        conv += n * f + n * k
        if cfg.arch == "s1dcnn":
            conv += 2 * n
    bn = 2 * n * cfg.depth
    lin = cfg.classes * n + cfg.classes
    return ParamCount(conv + bn + lin, conv, bn, lin)


def count_macs(model: Model | ModelConfig) -> int:
    """Multiply-accumulates per output frame: one per conv or head weight, one
    per channel for the fused batch-norm scale. Bias adds are free and the
    score averaging is not counted."""
    cfg = model.config if isinstance(model, Model) else model
    n, k = cfg.filters, cfg.memory
    macs = 0
    for i in range(cfg.depth):
        f = cfg.input_dim if i == 0 else n
        macs += n * f + n * k + n
    return macs + cfg.classes * n


def info(model: Model | ModelConfig) -> dict:
    cfg = model.config if isinstance(model, Model) else model
    past, future = receptive_field(cfg)
    pc = count_params(cfg)
    return {
        "arch": cfg.arch,
        "feature_dim": cfg.feature_dim,
        "context": cfg.context,
        "depth": cfg.depth,
        "filters": cfg.filters,
        "memory": cfg.memory,
        "lookahead": cfg.lookahead,
        "classes": cfg.classes,
        "params": pc.total,
        "params_conv": pc.conv,
        "params_batchnorm": pc.batchnorm,
        "params_linear": pc.linear,
        "macs": count_macs(cfg),
        "receptive_field_past_ms": past,
        "receptive_field_future_ms": future,
        "delay_ms": output_delay(cfg),
    }


def format_info(data: dict, as_json: bool = False) -> str:
    if as_json:
        return json.dumps(data, indent=2)
    return "\n".join(f"{k}={v}" for k, v in data.items())


# --- model files -------------------------------------------------------------------------

_CONFIG_FIELDS = ("feature_dim", "context", "depth", "filters", "memory", "lookahead",
                  "classes", "hop_ms", "g1", "g2")
_HEADER = struct.Struct("<4sB" + "I" * (len(_CONFIG_FIELDS) + 1) + "dd")


def to_bytes(model: Model) -> bytes:
    cfg = model.config
    ints = [int(getattr(cfg, name)) for name in _CONFIG_FIELDS]
    ints.append(ARCHS.index(cfg.arch))
    parts = [_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, *ints, cfg.bn_eps, cfg.bn_momentum)]
    parts += [np.ascontiguousarray(t, dtype="<f4").tobytes() for t in model.tensors()]
    return b"".join(parts)


def from_bytes(data: bytes) -> Model:
    if data[:4] != MODEL_MAGIC:
        raise FormatError("bad model file magic", 0)
    if len(data) < 5:
        raise FormatError("truncated model header", len(data))
    if data[4] != MODEL_VERSION:
        raise FormatError(f"unsupported model file version {data[4]}", 4)
    if len(data) < _HEADER.size:
        raise FormatError("truncated model header", len(data))
    fields = _HEADER.unpack_from(data)
    ints = fields[2:2 + len(_CONFIG_FIELDS) + 1]
    eps, momentum = fields[-2:]
    kwargs = dict(zip(_CONFIG_FIELDS, ints))
    if ints[-1] >= len(ARCHS) or kwargs["g1"] > 2 or kwargs["g2"] > 2:
        raise FormatError("unknown arch or activation code", 5)
    try:
        cfg = ModelConfig(**kwargs, arch=ARCHS[ints[-1]], bn_eps=eps, bn_momentum=momentum)
    except ConfigError as exc:
        raise FormatError(f"invalid model config: {exc}", 5) from exc

    offset = _HEADER.size

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(data):
            raise FormatError(f"truncated tensor data: need {end} bytes, have {len(data)}", len(data))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(FLOAT)
        offset = end
        return arr

    model = _assemble(cfg, take)
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after model data", offset)
    return model


def save(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path: str | Path) -> Model:
    return from_bytes(Path(path).read_bytes())


def config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["g1"] = Activation(cfg.g1).name.lower()
    d["g2"] = Activation(cfg.g2).name.lower()
    return d

