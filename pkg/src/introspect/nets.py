"""Architecture presets, parameter initialization, and network evaluation.

Presets are compact strings usable from the CLI and config files:

  cnn64           the 64x64x3 image scorer (conv pairs with 2x2 average
                  pooling between, layer norm after every conv except the
                  first, swish activations, final dense scalar head)
  cnn64x8         same structure, first conv has 8 channels instead of 32
  cnn32, cnn16, cnn8   reduced-resolution variants (one conv block fewer
                  per halving, always ending at 4x4 before the head)
  digits8         small 4-conv net for 8x8 grayscale digits
  mlp2d, mlp2dx32 two-hidden-layer MLP on 2-vectors (default width 64)

Passing n_classes > 0 adds a K-way linear head next to the scalar score
head; both share the convolutional trunk.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError

WEIGHT_STD = 0.02  # conv/dense init scale; normalization params start at 1/0


@dataclass(frozen=True)
class Layer:
    kind: str               # conv | pool | upsample | flatten | dense
    out_channels: int = 0   # conv/dense only
    kernel: int = 3
    norm: bool = False      # layer norm after the op
    act: str = "none"       # swish | none
    dropout: float = 0.0


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    input_shape: tuple      # (C, H, W) for images, (D,) for flat inputs
    layers: tuple
    n_classes: int = 0      # 0 = scalar score head only

    def shape_chain(self):
        """Per-layer output shapes, validating consistency as it goes."""
        shape = self.input_shape
        chain = [shape]
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ConfigurationError(f"{self.name}: conv layer {i} needs CHW input, has {shape}")
                c, h, w = shape
                shape = (layer.out_channels, h, w)
            elif layer.kind == "pool":
                c, h, w = shape
                if h % 2 or w % 2:
                    raise ConfigurationError(f"{self.name}: pool layer {i} needs even spatial dims, has {shape}")
                shape = (c, h // 2, w // 2)
            elif layer.kind == "upsample":
                c, h, w = shape
                shape = (c, h * 2, w * 2)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise ConfigurationError(f"{self.name}: dense layer {i} needs flat input, has {shape}")
                shape = (layer.out_channels,)
            else:
                raise ConfigurationError(f"{self.name}: unknown layer kind {layer.kind!r}")
            chain.append(shape)
        return chain

    @property
    def feature_dim(self):
        return int(np.prod(self.shape_chain()[-1]))


class ModelParams:
    """Named, ordered parameter tensors plus role tags.

    Roles distinguish the shared trunk ("internal") from the scalar score
    head and the class-logit head ("top").
    """

    def __init__(self):
        self.entries: dict[str, ad.Tensor] = {}
        self.roles: dict[str, str] = {}

    def add(self, name, value, role="internal"):
        if name in self.entries:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        self.entries[name] = ad.tensor(value)
        self.roles[name] = role

    def __getitem__(self, name) -> ad.Tensor:
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def names(self):
        return list(self.entries)

    def tensors(self):
        return list(self.entries.values())

    def replace(self, name, data):
        """Swap in a new leaf tensor; tensors themselves stay immutable."""
        self.entries[name] = ad.tensor(data)

    def state_arrays(self):
        return {k: v.data for k, v in self.entries.items()}

    def load_state_arrays(self, arrays):
        for k in self.entries:
            if k not in arrays:
                raise ConfigurationError(f"missing parameter {k!r} in state")
            if arrays[k].shape != self.entries[k].shape:
                raise ConfigurationError(f"shape mismatch for {k!r}")
            self.entries[k] = ad.tensor(arrays[k])

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for k, v in self.entries.items():
            out.add(k, v.data, self.roles[k])
        return out

    def n_values(self):
        return sum(v.size for v in self.entries.values())


# ---------------------------------------------------------------------------
# Preset construction
# ---------------------------------------------------------------------------

def _conv_blocks(input_size, base_channels):
    """Conv-pair blocks halving resolution down to 4x4.

    Block i holds convs with base*2^(i-1) and base*2^i channels followed
    by a 2x2 average pool.  The first conv of the network skips layer
    norm; every other conv is followed by layer norm, all use swish.
    """
    n_blocks = int(np.log2(input_size)) - 2
    if 2 ** (n_blocks + 2) != input_size or n_blocks < 1:
        raise ConfigurationError(f"input size {input_size} not a power of two >= 8")
    layers = []
    first = True
    for i in range(1, n_blocks + 1):
        for ch in (base_channels * 2 ** (i - 1), base_channels * 2 ** i):
            layers.append(Layer("conv", ch, 3, norm=not first, act="swish"))
            first = False
        layers.append(Layer("pool"))
    layers.append(Layer("flatten"))
    return layers


_PRESET_RE = re.compile(r"^(cnn)(\d+)(?:x(\d+))?$|^(mlp2d)(?:x(\d+))?$|^(digits8)$")


def parse_preset(name, in_channels=None, n_classes=0):
    m = _PRESET_RE.match(name)
    if not m:
        raise ConfigurationError(f"unknown architecture preset {name!r}")
    if m.group(1) == "cnn":
        size = int(m.group(2))
        base = int(m.group(3)) if m.group(3) else 32
        cin = 3 if in_channels is None else in_channels
        layers = _conv_blocks(size, base)
        return ArchitectureSpec(name, (cin, size, size), tuple(layers), n_classes)
    if m.group(4) == "mlp2d":
        h = int(m.group(5)) if m.group(5) else 64
        if h < 1:
            raise ConfigurationError("mlp2d width must be >= 1")
        layers = (
            Layer("dense", h, act="swish"),
            Layer("dense", h, act="swish"),
        )
        return ArchitectureSpec(name, (2,), layers, n_classes)
    # digits8: 8x8 grayscale, two conv blocks ending at 2x2
    cin = 1 if in_channels is None else in_channels
    layers = (
        Layer("conv", 16, 3, norm=False, act="swish"),
        Layer("conv", 32, 3, norm=True, act="swish"),
        Layer("pool"),
        Layer("conv", 32, 3, norm=True, act="swish"),
        Layer("conv", 64, 3, norm=True, act="swish"),
        Layer("pool"),
        Layer("flatten"),
    )
    return ArchitectureSpec("digits8", (cin, 8, 8), layers, n_classes)


def init_params(spec: ArchitectureSpec, seed) -> ModelParams:
    rng = np.random.default_rng(seed)
    params = ModelParams()
    chain = spec.shape_chain()
    for i, layer in enumerate(spec.layers):
        shape_in = chain[i]
        if layer.kind == "conv":
            k = layer.kernel
            params.add(f"conv{i}.w", WEIGHT_STD * rng.standard_normal((layer.out_channels, shape_in[0], k, k)))
            params.add(f"conv{i}.b", np.zeros((layer.out_channels, 1, 1)))
        elif layer.kind == "dense":
            params.add(f"dense{i}.w", WEIGHT_STD * rng.standard_normal((shape_in[0], layer.out_channels)))
            params.add(f"dense{i}.b", np.zeros(layer.out_channels))
        if layer.kind in ("conv", "dense") and layer.norm:
            nshape = (layer.out_channels, 1, 1) if layer.kind == "conv" else (layer.out_channels,)
            params.add(f"ln{i}.gain", np.ones(nshape), role="norm")
            params.add(f"ln{i}.bias", np.zeros(nshape), role="norm")
    d = spec.feature_dim
    params.add("score.w", WEIGHT_STD * rng.standard_normal((d, 1)), role="top")
    params.add("score.b", np.zeros(1), role="top")
    if spec.n_classes:
        if spec.n_classes < 2:
            raise ConfigurationError("n_classes must be 0 or >= 2")
        params.add("logits.w", WEIGHT_STD * rng.standard_normal((d, spec.n_classes)), role="top")
        params.add("logits.b", np.zeros(spec.n_classes), role="top")
    return params


def build_preset(name, seed, in_channels=None, n_classes=0):
    """Preset spec plus deterministically initialized parameters."""
    spec = parse_preset(name, in_channels=in_channels, n_classes=n_classes)
    spec.shape_chain()  # validate end-to-end before allocating
    return init_params(spec, seed), spec


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _check_batch_shape(spec, batch_shape):
    if tuple(batch_shape[1:]) != tuple(spec.input_shape):
        raise ConfigurationError(
            f"{spec.name}: batch sample shape {tuple(batch_shape[1:])} != expected {spec.input_shape}"
        )


def trunk_features(params: ModelParams, spec: ArchitectureSpec, x: ad.Tensor,
                   train=False, dropout_rng=None) -> ad.Tensor:
    """Shared feature stack below the heads; returns (N, feature_dim)."""
    _check_batch_shape(spec, x.shape)
    h = x
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            h = ad.conv2d(h, params[f"conv{i}.w"], pad=layer.kernel // 2) + params[f"conv{i}.b"]
        elif layer.kind == "dense":
            h = ad.affine(h, params[f"dense{i}.w"], params[f"dense{i}.b"])
        elif layer.kind == "pool":
            h = ad.avg_pool2(h)
        elif layer.kind == "upsample":
            h = ad.upsample2(h)
        elif layer.kind == "flatten":
            h = ad.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
        if layer.kind in ("conv", "dense"):
            if layer.norm:
                h = ad.layer_norm(h, params[f"ln{i}.gain"], params[f"ln{i}.bias"])
            if layer.act == "swish":
                h = ad.swish(h)
            if layer.dropout > 0.0:
                if train and dropout_rng is None:
                    raise ConfigurationError("dropout requires an rng in train mode")
                h = ad.dropout(h, layer.dropout, dropout_rng, train)
    if len(h.shape) != 2:
        h = ad.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
    return h


def eval_f(params, spec, x: ad.Tensor, train=False, dropout_rng=None) -> ad.Tensor:
    """Per-sample scalar scores, no output nonlinearity; shape (N,)."""
    feats = trunk_features(params, spec, x, train, dropout_rng)
    out = ad.affine(feats, params["score.w"], params["score.b"])
    return ad.reshape(out, (out.shape[0],))


def eval_logits(params, spec, x: ad.Tensor, train=False, dropout_rng=None) -> ad.Tensor:
    """Class logits (N, K) from the shared trunk."""
    if not spec.n_classes:
        raise ConfigurationError(f"{spec.name} has no class head")
    feats = trunk_features(params, spec, x, train, dropout_rng)
    return ad.affine(feats, params["logits.w"], params["logits.b"])


def score_batch(params, spec, batch: np.ndarray, train=False, dropout_rng=None) -> np.ndarray:
    """Numpy-in, numpy-out scoring convenience."""
    return eval_f(params, spec, ad.constant(batch), train, dropout_rng).data


# ---------------------------------------------------------------------------
# Frozen random initializer network (4x4x512 codes -> 64x64x3 images)
# ---------------------------------------------------------------------------

FROZEN_INIT_STD = 0.1
FROZEN_CODE_SHAPE = (512, 4, 4)


@dataclass(frozen=True)
class FrozenInitializer:
    """Fixed-weight linear decoder used to diversify synthesis starts.

    Four 5x5 conv stages with nearest-neighbor upsampling between, layer
    norm after every conv except the last, and no nonlinearities anywhere.
    Weights are Gaussian(0, 0.1^2) drawn once from the seed.
    """

    seed: int
    weights: tuple = field(repr=False, default=())

    CHANNELS = (256, 128, 64, 3)

    @classmethod
    def build(cls, seed) -> "FrozenInitializer":
        rng = np.random.default_rng(seed)
        ws = []
        cin = FROZEN_CODE_SHAPE[0]
        for cout in cls.CHANNELS:
            ws.append(FROZEN_INIT_STD * rng.standard_normal((cout, cin, 5, 5)))
            cin = cout
        return cls(seed=seed, weights=tuple(ws))

    def generate(self, codes: np.ndarray) -> np.ndarray:
        """Push (N, 512, 4, 4) codes through; returns (N, 3, 64, 64)."""
        if codes.ndim != 4 or codes.shape[1:] != FROZEN_CODE_SHAPE:
            raise ConfigurationError(f"initializer codes must be (N,)+{FROZEN_CODE_SHAPE}")
        h = ad.constant(codes)
        last = len(self.weights) - 1
        ones_gain = [ad.constant(np.ones((c, 1, 1))) for c in self.CHANNELS]
        zero_bias = [ad.constant(np.zeros((c, 1, 1))) for c in self.CHANNELS]
        for i, w in enumerate(self.weights):
            h = ad.conv2d(h, ad.constant(w), pad=2)
            if i != last:
                h = ad.layer_norm(h, ones_gain[i], zero_bias[i])
            h = ad.upsample2(h)
        return h.data

    def shape_chain(self):
        chain = [FROZEN_CODE_SHAPE]
        c, h, w = FROZEN_CODE_SHAPE
        for cout in self.CHANNELS:
            chain.append((cout, h, w))
            h, w = h * 2, w * 2
            chain.append((cout, h, w))
        return chain


def build_frozen_initializer(seed) -> FrozenInitializer:
    return FrozenInitializer.build(seed)
