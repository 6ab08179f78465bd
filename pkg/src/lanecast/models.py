"""The two lane-change classifiers.

``disjoint``: two independent 5-conv / 3-FC streams (one RGB frame, one stack
of flow fields) whose softmax outputs are averaged.

``st-multiplier``: two residual streams over ``T_s`` time steps. Every
appearance residual unit receives the motion activations multiplicatively,

    x_a' = f(x_a) + F(x_a * f(x_m), W_a)        x_m' = f(x_m) + F(x_m, W_m)

with ``f = relu``, and identity-initialised temporal convolutions are injected
after selected stages.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import functional as F
from .autodiff.checkpoint import load_checkpoint, save_checkpoint
from .autodiff.layers import (
    LayerParams,
    batchnorm_layer,
    conv2d_layer,
    count_parameters,
    forward,
    linear_layer,
    temporal_layer,
)
from .autodiff.tensor import Tensor, as_tensor
from .dataset import ManeuverClass
from .errors import ConfigurationError, DimensionError

KINDS = ("disjoint", "st-multiplier")
NUM_CLASSES = len(ManeuverClass)

DESK_CONV = (16, 32, 64, 64, 64)
DESK_FC = (256, 128)
CNN_M_CONV = (96, 256, 512, 512, 512)
CNN_M_FC = (4096, 2048)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "st-multiplier"
    input_size: int = 112
    flow_pairs: int = 10  # L
    appearance_frames: int = 5  # T_s, st-multiplier only
    batchnorm: bool = True
    bias: bool = True
    # disjoint
    conv_widths: tuple = DESK_CONV
    fc_widths: tuple = DESK_FC
    # st-multiplier
    stem_width: int = 16
    stage_widths: tuple = (16, 32, 64, 128)
    stage_blocks: tuple = (2, 2, 2, 2)
    temporal_after: tuple = (2, 4)  # 1-based stage numbers

    def __post_init__(self):
        for name in ("conv_widths", "fc_widths", "stage_widths", "stage_blocks", "temporal_after"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.kind not in KINDS:
            raise ConfigurationError(f"model kind must be one of {KINDS}, got {self.kind!r}")
        if self.flow_pairs < 1 or self.input_size < 16:
            raise ConfigurationError("flow_pairs must be >= 1 and input_size >= 16")
        if self.kind == "disjoint":
            if len(self.conv_widths) != 5 or len(self.fc_widths) != 2:
                raise ConfigurationError("disjoint streams have 5 conv layers and 3 FC layers (2 hidden widths)")
        else:
            if len(self.stage_widths) != len(self.stage_blocks) or not self.stage_widths:
                raise ConfigurationError("stage_widths and stage_blocks must be nonempty and of equal length")
            if any(b < 1 for b in self.stage_blocks):
                raise ConfigurationError("every stage needs at least one residual block")
            if self.appearance_frames < 1 or self.flow_pairs % self.appearance_frames:
                raise ConfigurationError(
                    f"flow_pairs ({self.flow_pairs}) must be a multiple of appearance_frames ({self.appearance_frames})"
                )
            bad = [s for s in self.temporal_after if not 1 <= s <= len(self.stage_widths)]
            if bad:
                raise ConfigurationError(f"temporal_after names unknown stages {bad}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        presets = {
            "disjoint": dict(kind="disjoint"),
            "disjoint-cnn-m": dict(kind="disjoint", conv_widths=CNN_M_CONV, fc_widths=CNN_M_FC),
            "st-multiplier": dict(kind="st-multiplier"),
        }
        if name not in presets:
            raise ConfigurationError(f"unknown model preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- parameter records


@dataclass
class ResidualUnit:
    """``F(z) = BN(conv(relu(BN(conv(z)))))`` plus an optional projection skip."""

    conv1: LayerParams
    conv2: LayerParams
    bn1: Optional[LayerParams] = None
    bn2: Optional[LayerParams] = None
    proj: Optional[LayerParams] = None
    proj_bn: Optional[LayerParams] = None

    def named_layers(self, prefix: str) -> dict[str, LayerParams]:
        out = {}
        for name in ("conv1", "bn1", "conv2", "bn2", "proj", "proj_bn"):
            layer = getattr(self, name)
            if layer is not None:
                out[f"{prefix}.{name}"] = layer
        return out


@dataclass
class StBlockParams:
    appearance: ResidualUnit
    motion: ResidualUnit


@dataclass
class Model:
    config: ModelConfig
    layers: dict[str, LayerParams]
    blocks: list[StBlockParams] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers.values() for p in layer.parameters()]

    def num_parameters(self) -> int:
        return count_parameters(self.layers.values())


DisjointTwoStreamModel = Model
StMultiplierModel = Model


def _conv(cin, cout, k, rng, stride, cfg, dtype, bias=None):
    use_bias = cfg.bias and not cfg.batchnorm if bias is None else bias
    return conv2d_layer(cin, cout, k, rng, stride=stride, padding=k // 2, bias=use_bias, dtype=dtype)


def _residual_unit(cin, cout, stride, rng, cfg, dtype) -> ResidualUnit:
    unit = ResidualUnit(_conv(cin, cout, 3, rng, stride, cfg, dtype), _conv(cout, cout, 3, rng, 1, cfg, dtype))
    if cfg.batchnorm:
        unit.bn1 = batchnorm_layer(cout, dtype=dtype)
        unit.bn2 = batchnorm_layer(cout, dtype=dtype)
        # start the residual branch small so each block begins near its skip path
        unit.bn2.weight.data[:] = 0.1
    if stride != 1 or cin != cout:
        unit.proj = conv2d_layer(cin, cout, 1, rng, stride=stride, padding=0, bias=False, dtype=dtype)
        if cfg.batchnorm:
            unit.proj_bn = batchnorm_layer(cout, dtype=dtype)
    return unit


def _pool_extent(n: int) -> int:
    return F.conv_output_extent(n, 3, 2, 1)


def disjoint_feature_extent(size: int) -> int:
    """Spatial extent entering the first FC layer for a square input of ``size``."""
    n = F.conv_output_extent(size, 7, 2, 3)
    n = _pool_extent(n)
    n = F.conv_output_extent(n, 5, 2, 2)
    n = _pool_extent(n)
    return _pool_extent(n)


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    rng = np.random.default_rng(seed)
    return _build_disjoint(config, rng, dtype) if config.kind == "disjoint" else _build_st(config, rng, dtype)


def _build_disjoint(cfg: ModelConfig, rng, dtype) -> Model:
    layers: dict[str, LayerParams] = {}
    extent = disjoint_feature_extent(cfg.input_size)
    if extent < 1:
        raise ConfigurationError(f"input_size {cfg.input_size} too small for the disjoint streams")
    for stream, cin in (("spatial", 3), ("motion", 2 * cfg.flow_pairs)):
        widths = (cin,) + cfg.conv_widths
        kernels = (7, 5, 3, 3, 3)
        strides = (2, 2, 1, 1, 1)
        for i in range(5):
            layers[f"{stream}.conv{i + 1}"] = _conv(widths[i], widths[i + 1], kernels[i], rng, strides[i], cfg, dtype)
            if cfg.batchnorm:
                layers[f"{stream}.bn{i + 1}"] = batchnorm_layer(widths[i + 1], dtype=dtype)
        fc_in = (cfg.conv_widths[-1] * extent * extent,) + cfg.fc_widths
        fc_out = cfg.fc_widths + (NUM_CLASSES,)
        for i in range(3):
            gain = 2.0 if i < 2 else 1.0
            layers[f"{stream}.fc{i + 1}"] = linear_layer(fc_in[i], fc_out[i], rng, bias=cfg.bias, gain=gain, dtype=dtype)
    return Model(cfg, layers)


def _build_st(cfg: ModelConfig, rng, dtype) -> Model:
    layers: dict[str, LayerParams] = {}
    motion_in = 2 * cfg.flow_pairs // cfg.appearance_frames
    for stream, cin in (("app", 3), ("mot", motion_in)):
        layers[f"{stream}.stem"] = _conv(cin, cfg.stem_width, 7, rng, 2, cfg, dtype)
        if cfg.batchnorm:
            layers[f"{stream}.stem_bn"] = batchnorm_layer(cfg.stem_width, dtype=dtype)
    blocks = []
    cin = cfg.stem_width
    for s, (width, depth) in enumerate(zip(cfg.stage_widths, cfg.stage_blocks), start=1):
        for b in range(depth):
            stride = 2 if (b == 0 and s > 1) else 1
            block = StBlockParams(
                _residual_unit(cin, width, stride, rng, cfg, dtype),
                _residual_unit(cin, width, stride, rng, cfg, dtype),
            )
            layers.update(block.appearance.named_layers(f"app.s{s}b{b + 1}"))
            layers.update(block.motion.named_layers(f"mot.s{s}b{b + 1}"))
            blocks.append(block)
            cin = width
        if s in cfg.temporal_after:
            for stream in ("app", "mot"):
                layers[f"{stream}.temporal{s}"] = temporal_layer(width, rng, dtype=dtype)
    layers["head.app"] = linear_layer(cin, NUM_CLASSES, rng, bias=cfg.bias, gain=1.0, dtype=dtype)
    layers["head.mot"] = linear_layer(cin, NUM_CLASSES, rng, bias=False, gain=1.0, dtype=dtype)
    return Model(cfg, layers, blocks)


# ---------------------------------------------------------------- residual blocks


def _maybe_bn(layer: Optional[LayerParams], x: Tensor, training: bool) -> Tensor:
    return x if layer is None else forward(layer, x, training)


def residual_branch(unit: ResidualUnit, z: Tensor, training: bool = False) -> Tensor:
    h = F.relu(_maybe_bn(unit.bn1, forward(unit.conv1, z), training))
    return _maybe_bn(unit.bn2, forward(unit.conv2, h), training)


def _skip(unit: ResidualUnit, activated: Tensor, training: bool) -> Tensor:
    if unit.proj is None:
        return activated
    return _maybe_bn(unit.proj_bn, forward(unit.proj, activated), training)


def residual_unit_forward(unit: ResidualUnit, x: Tensor, training: bool = False) -> Tensor:
    """Ungated unit: ``f(x) + F(x, W)``."""
    return _skip(unit, F.relu(x), training) + residual_branch(unit, x, training)


def st_block_forward(
    params: StBlockParams, x_a: Tensor, x_m: Tensor, training: bool = False
) -> tuple[Tensor, Tensor]:
    """One gated block: motion activations modulate the appearance residual input."""
    x_a, x_m = as_tensor(x_a), as_tensor(x_m)
    if x_a.shape != x_m.shape:
        raise DimensionError(f"gated block needs identical stream shapes, got {x_a.shape} and {x_m.shape}")
    gate = F.relu(x_m)
    a_next = _skip(params.appearance, F.relu(x_a), training) + residual_branch(params.appearance, x_a * gate, training)
    m_next = residual_unit_forward(params.motion, x_m, training)
    return a_next, m_next


# ---------------------------------------------------------------- time handling


def fold_time(x: Tensor, batch: int) -> Tensor:
    """``(B*T) x C x H x W`` to ``B x C x T x H x W``."""
    bt, c, h, w = x.shape
    return F.transpose(F.reshape(x, (batch, bt // batch, c, h, w)), (0, 2, 1, 3, 4))


def unfold_time(x: Tensor) -> Tensor:
    """``B x C x T x H x W`` to ``(B*T) x C x H x W``."""
    b, c, t, h, w = x.shape
    return F.reshape(F.transpose(x, (0, 2, 1, 3, 4)), (b * t, c, h, w))


def temporal_conv_inject(features: Tensor, layer: LayerParams) -> Tensor:
    """1D convolution over axis 2 (time) of ``B x C x T [x H x W]`` features."""
    if layer.kind != "conv1d-temporal":
        raise ConfigurationError(f"expected a conv1d-temporal layer, got {layer.kind}")
    return forward(layer, as_tensor(features))


# ---------------------------------------------------------------- forward passes


def _check_input(x: Tensor, shape: tuple, what: str) -> None:
    if x.shape != shape:
        raise DimensionError(f"{what}: expected shape {shape}, got {x.shape}")


def disjoint_logits(
    model: Model, appearance, flow_stack, training: bool = False
) -> tuple[Tensor, Tensor]:
    """Per-stream logits for ``B x 3 x S x S`` frames and ``B x 2L x S x S`` flow stacks."""
    cfg = model.config
    appearance, flow_stack = as_tensor(appearance), as_tensor(flow_stack)
    if appearance.ndim != 4 or flow_stack.ndim != 4:
        raise DimensionError(f"disjoint model expects 4-D inputs, got {appearance.shape} and {flow_stack.shape}")
    S = cfg.input_size
    B = appearance.shape[0]
    _check_input(appearance, (B, 3, S, S), "spatial stream input")
    _check_input(flow_stack, (B, 2 * cfg.flow_pairs, S, S), "motion stream input")
    out = []
    for stream, x in (("spatial", appearance), ("motion", flow_stack)):
        L = model.layers
        for i in range(1, 6):
            x = forward(L[f"{stream}.conv{i}"], x)
            x = F.relu(_maybe_bn(L.get(f"{stream}.bn{i}"), x, training))
            if i in (1, 2, 5):
                x = F.max_pool2d(x, 3, 2, 1)
        x = F.reshape(x, (B, -1))
        x = F.relu(forward(L[f"{stream}.fc1"], x))
        x = F.relu(forward(L[f"{stream}.fc2"], x))
        out.append(forward(L[f"{stream}.fc3"], x))
    return out[0], out[1]


def fuse_softmax(p_spatial: np.ndarray, p_motion: np.ndarray) -> np.ndarray:
    return (p_spatial + p_motion) / 2


def disjoint_forward(model: Model, appearance, flow_stack) -> np.ndarray:
    """Fused class probabilities, ``B x 3``."""
    ls, lm = disjoint_logits(model, appearance, flow_stack)
    return fuse_softmax(F.softmax(ls.data), F.softmax(lm.data))


def st_logits(model: Model, appearance_frames, flow_stack, training: bool = False) -> Tensor:
    """Logits for ``B x T_s x 3 x S x S`` frames and ``B x L x 2 x S x S`` flows."""
    cfg = model.config
    a, m = as_tensor(appearance_frames), as_tensor(flow_stack)
    if a.ndim != 5 or m.ndim != 5:
        raise DimensionError(f"st-multiplier expects 5-D inputs, got {a.shape} and {m.shape}")
    B, T, S = a.shape[0], cfg.appearance_frames, cfg.input_size
    L = cfg.flow_pairs
    _check_input(a, (B, T, 3, S, S), "appearance input")
    _check_input(m, (B, L, 2, S, S), "flow input")
    # time folded into the batch axis; each step sees L / T_s consecutive flows
    a = F.reshape(a, (B * T, 3, S, S))
    m = F.reshape(m, (B * T, 2 * L // T, S, S))
    layers = model.layers
    feats = {}
    for stream, x in (("app", a), ("mot", m)):
        x = forward(layers[f"{stream}.stem"], x)
        x = F.relu(_maybe_bn(layers.get(f"{stream}.stem_bn"), x, training))
        feats[stream] = F.max_pool2d(x, 3, 2, 1)
    x_a, x_m = feats["app"], feats["mot"]
    i = 0
    for s, depth in enumerate(cfg.stage_blocks, start=1):
        for _ in range(depth):
            x_a, x_m = st_block_forward(model.blocks[i], x_a, x_m, training)
            i += 1
        if s in cfg.temporal_after:
            x_a = unfold_time(temporal_conv_inject(fold_time(x_a, B), layers[f"app.temporal{s}"]))
            x_m = unfold_time(temporal_conv_inject(fold_time(x_m, B), layers[f"mot.temporal{s}"]))
    pooled = []
    for x in (x_a, x_m):
        _, c, h, w = x.shape
        pooled.append(F.mean(F.reshape(F.relu(x), (B, T, c, h * w)), axis=(1, 3)))
    return forward(layers["head.app"], pooled[0]) + forward(layers["head.mot"], pooled[1])


def st_forward(model: Model, appearance_frames, flow_stack) -> np.ndarray:
    return F.softmax(st_logits(model, appearance_frames, flow_stack).data)


# ---------------------------------------------------------------- sample-level interface


def model_inputs(model: Model, appearance: np.ndarray, flow: np.ndarray, dtype=None) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays from stacked SampleWindow fields (``B x T_s x 3 x S x S``, ``B x 2L x S x S``)."""
    dtype = dtype or model.parameters()[0].dtype
    appearance = np.asarray(appearance, dtype=dtype)
    flow = np.asarray(flow, dtype=dtype)
    if model.config.kind == "disjoint":
        return appearance[:, -1], flow
    B, C, S, _ = flow.shape
    return appearance, flow.reshape(B, C // 2, 2, S, S)


def batch_logits(model: Model, appearance: np.ndarray, flow: np.ndarray, training: bool = False) -> list[Tensor]:
    """One logits tensor per independently trained head."""
    a, m = model_inputs(model, appearance, flow)
    if model.config.kind == "disjoint":
        return list(disjoint_logits(model, a, m, training))
    return [st_logits(model, a, m, training)]


def predict_proba(model: Model, appearance: np.ndarray, flow: np.ndarray) -> np.ndarray:
    a, m = model_inputs(model, appearance, flow)
    if model.config.kind == "disjoint":
        return disjoint_forward(model, a, m)
    return st_forward(model, a, m)


def predict(probabilities) -> ManeuverClass | np.ndarray:
    """Argmax with ties resolved toward the lowest class index."""
    p = np.asarray(probabilities)
    if p.ndim == 1:
        return ManeuverClass(int(np.argmax(p)))
    return np.argmax(p, axis=-1)


# ---------------------------------------------------------------- persistence


def state_arrays(model: Model) -> dict[str, tuple[str, np.ndarray]]:
    out = {}
    for name, layer in model.layers.items():
        out[f"{name}.weight"] = (layer.kind, layer.weight.data)
        if layer.bias is not None:
            out[f"{name}.bias"] = (layer.kind, layer.bias.data)
        if layer.kind == "batchnorm":
            out[f"{name}.running_mean"] = (layer.kind, layer.running_mean)
            out[f"{name}.running_var"] = (layer.kind, layer.running_var)
    return out


def save_model(path, model: Model, meta: Optional[dict] = None) -> None:
    save_checkpoint(path, state_arrays(model), {**(meta or {}), "model_config": model.config.to_dict()})


def load_state(model: Model, arrays: dict[str, tuple[str, np.ndarray]]) -> None:
    expected = state_arrays(model)
    missing = set(expected) - set(arrays)
    extra = set(arrays) - set(expected)
    if missing or extra:
        raise ConfigurationError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for name, layer in model.layers.items():
        for attr in ("weight", "bias"):
            t = getattr(layer, attr)
            if t is not None:
                src = arrays[f"{name}.{attr}"][1]
                if src.shape != t.shape:
                    raise DimensionError(f"{name}.{attr}: checkpoint shape {src.shape}, model {t.shape}")
                t.data = src.astype(t.dtype)
        if layer.kind == "batchnorm":
            layer.running_mean[:] = arrays[f"{name}.running_mean"][1]
            layer.running_var[:] = arrays[f"{name}.running_var"][1]


def load_model(path) -> tuple[Model, dict]:
    arrays, meta = load_checkpoint(path)
    if "model_config" not in meta:
        raise ConfigurationError(f"{path}: checkpoint carries no model config")
    model = build_model(ModelConfig.from_dict(meta["model_config"]))
    load_state(model, arrays)
    return model, meta
