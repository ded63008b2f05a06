"""
MILD-Net and MILD-Net+ computation graphs.

The building blocks (:func:`residual_unit`, :func:`mil_unit`,
:func:`dilated_residual_unit`, :func:`aspp`, :func:`decoder_block`) are plain
functions over :class:`~mildnet.ops.ConvParams`; :class:`MILDNet` owns the
named weights and wires the blocks together.

Encoder layout (``L = level_channels``)::

    image -> conv3x3(base) -> conv3x3(L0)                      [skip0, /1]
          -> maxpool -> MIL -> residual units (L1)             [skip1, /2]
          -> maxpool -> MIL -> residual units (L2)             [skip2, /4]
          -> maxpool -> MIL -> residual units (L3)
          -> dilated residual units                            [aux tap, /8]
          -> ASPP -> decoder(skip2) -> decoder(skip1) -> decoder(skip0)
          -> dropout -> one 1x1 conv per output branch -> softmax
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, NumericError
from .ops import ConvParams
from .tensor import Tensor

STANDARD = "standard"
PLUS = "plus"

BRANCHES = {
    STANDARD: ("gland", "contour"),
    PLUS: ("gland", "contour", "lumen", "lumen_contour"),
}
AUX_BRANCHES = {
    STANDARD: ("aux_gland", "aux_contour"),
    PLUS: ("aux_gland", "aux_lumen"),
}


class AsppDegenerateWarning(UserWarning):
    """A dilation rate meets or exceeds the feature-map extent."""


@dataclass
class ModelConfig:
    base_channels: int = 16
    level_channels: Sequence[int] = (16, 32, 64, 128)
    aspp_rates: Sequence[int] = (6, 12, 18)
    aspp_out_channels: int = 32
    variant: str = STANDARD
    dropout_rate: float = 0.5
    input_size: int = 464
    in_channels: int = 3
    residual_units_per_stage: int = 1
    dilated_rates: Sequence[int] = (2, 2)
    aux_tap: int = 1

    def __post_init__(self):
        self.level_channels = tuple(int(c) for c in self.level_channels)
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)
        self.dilated_rates = tuple(int(r) for r in self.dilated_rates)
        self.validate()

    def validate(self) -> None:
        if len(self.level_channels) != 4 or min(self.level_channels) < 1:
            raise ConfigError(f"level_channels must be 4 positive ints, got {self.level_channels}")
        if self.base_channels < 1 or self.aspp_out_channels < 1 or self.in_channels < 1:
            raise ConfigError("base_channels, aspp_out_channels and in_channels must be positive")
        if not self.aspp_rates or min(self.aspp_rates) < 1:
            raise ConfigError(f"aspp_rates must be non-empty and >= 1, got {self.aspp_rates}")
        if not self.dilated_rates or min(self.dilated_rates) < 1:
            raise ConfigError(f"dilated_rates must be non-empty and >= 1, got {self.dilated_rates}")
        if not 0 <= self.aux_tap < len(self.dilated_rates):
            raise ConfigError(f"aux_tap {self.aux_tap} outside the {len(self.dilated_rates)} dilated units")
        if self.variant not in BRANCHES:
            raise ConfigError(f"variant must be one of {sorted(BRANCHES)}, got {self.variant!r}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.input_size < 8 or self.input_size % 8:
            raise ConfigError(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if self.residual_units_per_stage < 1:
            raise ConfigError("residual_units_per_stage must be >= 1")

    @property
    def branches(self) -> tuple:
        return BRANCHES[self.variant]

    @property
    def aux_branches(self) -> tuple:
        return AUX_BRANCHES[self.variant]

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("level_channels", "aspp_rates", "dilated_rates"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class SegmentationOutput:
    """Branch logits of one forward pass; probabilities are softmax over channels."""

    logits: Dict[str, Tensor]
    variant: str = STANDARD
    _probs: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def prob(self, name: str) -> np.ndarray:
        if name not in self.logits:
            raise KeyError(f"no {name!r} output for the {self.variant} variant")
        if name not in self._probs:
            self._probs[name] = ops.softmax(self.logits[name].data, axis=1)
        return self._probs[name]

    def probs(self) -> Dict[str, np.ndarray]:
        return {name: self.prob(name) for name in self.logits}

    @property
    def names(self) -> tuple:
        return tuple(self.logits)

    gland_prob = property(lambda self: self.prob("gland"))
    contour_prob = property(lambda self: self.prob("contour"))
    lumen_prob = property(lambda self: self.prob("lumen"))
    lumen_contour_prob = property(lambda self: self.prob("lumen_contour"))
    aux_gland_prob = property(lambda self: self.prob("aux_gland"))
    aux_contour_prob = property(lambda self: self.prob("aux_contour"))
    aux_lumen_prob = property(lambda self: self.prob("aux_lumen"))


# ----------------------------------------------------------------------
# building blocks
# ----------------------------------------------------------------------
def _with_dilation(p: ConvParams, rate: int) -> ConvParams:
    return ConvParams(p.weight, p.bias, stride=p.stride, dilation=rate)


def residual_unit(x: Tensor, conv1: ConvParams, conv2: ConvParams, shortcut: Optional[ConvParams] = None) -> Tensor:
    """y = W2(relu(W1 x)) + x, with a 1x1 projection on x when channels change."""
    f = ops.conv2d(ops.relu(ops.conv2d(x, conv1)), conv2)
    if shortcut is not None:
        return ops.add(f, ops.conv2d(x, shortcut))
    if f.shape != x.shape:
        raise ConfigError(
            f"residual unit changes channels {x.shape[1]} -> {f.shape[1]} without a projection shortcut"
        )
    return ops.add(f, x)


def dilated_residual_unit(
    x: Tensor, conv1: ConvParams, conv2: ConvParams, rate: int, shortcut: Optional[ConvParams] = None
) -> Tensor:
    """Residual unit whose two 3x3 convolutions are dilated by ``rate``."""
    if rate < 1:
        raise ConfigError(f"dilation rate must be >= 1, got {rate}")
    return residual_unit(x, _with_dilation(conv1, rate), _with_dilation(conv2, rate), shortcut)


def mil_unit(
    x: Tensor,
    image: Tensor,
    conv1: ConvParams,
    conv2: ConvParams,
    image_conv: ConvParams,
    fuse_conv: ConvParams,
) -> Tensor:
    """Minimal-information-loss unit: F(x) + M2(relu(M1 v) || x).

    ``v`` is ``image`` bicubically resized to the extents of ``x``. The
    output keeps the channel count of ``x``.
    """
    h, w = x.shape[2:]
    v = ops.bicubic_resize(image, h, w)
    assert v.shape[2:] == x.shape[2:], "resized image does not match feature extents"
    f = ops.conv2d(ops.relu(ops.conv2d(x, conv1)), conv2)
    g = ops.conv2d(ops.concat_channels(ops.relu(ops.conv2d(v, image_conv)), x), fuse_conv)
    return ops.add(f, g)


@dataclass
class AsppBranch:
    """One pyramid branch; ``conv`` is None for the global-pooling branch."""

    conv: Optional[ConvParams]
    proj1: ConvParams
    proj2: ConvParams
    rate: int = 0


def aspp(
    x: Tensor,
    branches: Sequence[AsppBranch],
    dropout_rate: float = 0.5,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Atrous spatial pyramid pooling.

    Each dilated branch is conv3x3(rate) -> relu -> 1x1 -> relu -> dropout -> 1x1;
    the pooling branch swaps the dilated conv for global average pooling and is
    broadcast back to the input extents. Branch outputs are concatenated.
    """
    h, w = x.shape[2:]
    outs = []
    for br in branches:
        if br.conv is None:
            z = ops.global_avg_pool(x)
        else:
            if br.rate >= min(h, w):
                warnings.warn(
                    f"ASPP rate {br.rate} >= feature extent {min(h, w)}; the dilated kernel degenerates",
                    AsppDegenerateWarning,
                    stacklevel=2,
                )
            z = ops.relu(ops.conv2d(x, _with_dilation(br.conv, br.rate)))
        z = ops.relu(ops.conv2d(z, br.proj1))
        z = ops.dropout(z, dropout_rate, training, rng)
        z = ops.conv2d(z, br.proj2)
        if br.conv is None:
            z = ops.broadcast_spatial(z, h, w)
        outs.append(z)
    return outs[0] if len(outs) == 1 else ops.concat_channels(*outs)


def decoder_block(x: Tensor, skip: Tensor, skip_proj: ConvParams, fuse: ConvParams) -> Tensor:
    """upsample2x(x) || conv1x1(skip) -> conv3x3 -> relu."""
    if skip.shape[2] != 2 * x.shape[2] or skip.shape[3] != 2 * x.shape[3]:
        raise ConfigError(f"decoder: skip extents {skip.shape[2:]} are not twice {x.shape[2:]}")
    up = ops.upsample2x(x)
    s = ops.conv2d(skip, skip_proj)
    return ops.relu(ops.conv2d(ops.concat_channels(up, s), fuse))


# ----------------------------------------------------------------------
# parameter layout
# ----------------------------------------------------------------------
def parameter_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Name -> shape of every trainable tensor, in a fixed order."""
    shapes: Dict[str, tuple] = {}

    def conv(name, cin, cout, k):
        shapes[name + ".weight"] = (cout, cin, k, k)
        shapes[name + ".bias"] = (cout,)

    L = cfg.level_channels
    conv("stem.conv1", cfg.in_channels, cfg.base_channels, 3)
    conv("stem.conv2", cfg.base_channels, L[0], 3)
    for k in (1, 2, 3):
        c = L[k - 1]
        conv(f"enc{k}.mil.conv1", c, c, 3)
        conv(f"enc{k}.mil.conv2", c, c, 3)
        conv(f"enc{k}.mil.image_conv", cfg.in_channels, c, 3)
        conv(f"enc{k}.mil.fuse_conv", 2 * c, c, 3)
        for u in range(cfg.residual_units_per_stage):
            cin = c if u == 0 else L[k]
            conv(f"enc{k}.res{u}.conv1", cin, L[k], 3)
            conv(f"enc{k}.res{u}.conv2", L[k], L[k], 3)
            if cin != L[k]:
                conv(f"enc{k}.res{u}.shortcut", cin, L[k], 1)
    for i in range(len(cfg.dilated_rates)):
        conv(f"dil{i}.conv1", L[3], L[3], 3)
        conv(f"dil{i}.conv2", L[3], L[3], 3)
    a = cfg.aspp_out_channels
    for i in range(len(cfg.aspp_rates)):
        conv(f"aspp.rate{i}.conv", L[3], a, 3)
        conv(f"aspp.rate{i}.proj1", a, a, 1)
        conv(f"aspp.rate{i}.proj2", a, a, 1)
    conv("aspp.pool.proj1", L[3], a, 1)
    conv("aspp.pool.proj2", a, a, 1)
    c_in = (len(cfg.aspp_rates) + 1) * a
    for name, skip_ch, out_ch in (("dec3", L[2], L[2]), ("dec2", L[1], L[1]), ("dec1", L[0], L[0])):
        conv(f"{name}.skip_proj", skip_ch, c_in, 1)
        conv(f"{name}.fuse", 2 * c_in, out_ch, 3)
        c_in = out_ch
    for b in cfg.branches:
        conv(f"head.{b}", L[0], 2, 1)
    for b in cfg.aux_branches:
        conv(f"head.{b}", L[3], 2, 1)
    return shapes


def fan_in(shape: tuple) -> int:
    """Number of input neurons feeding one output of a weight tensor."""
    if len(shape) == 4:
        return int(shape[1] * shape[2] * shape[3])
    if len(shape) == 2:
        return int(shape[1])
    return int(shape[0])


def xavier_init(shape: tuple, seed, fan: Optional[int] = None) -> Tensor:
    """Gaussian init with mean 0 and variance 1/fan_in."""
    rng = np.random.default_rng(seed)
    n = fan if fan is not None else fan_in(shape)
    data = rng.standard_normal(shape) / np.sqrt(n)
    return Tensor(data.astype(np.float32), requires_grad=True)


def init_parameters(cfg: ModelConfig, seed: int = 0) -> Dict[str, Tensor]:
    """Xavier-Gaussian weights and zero biases, each tensor from its own seeded stream."""
    params: Dict[str, Tensor] = {}
    for i, (name, shape) in enumerate(parameter_shapes(cfg).items()):
        if name.endswith(".bias"):
            t = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
        else:
            t = xavier_init(shape, [seed, i])
        t.name = name
        params[name] = t
    return params


# ----------------------------------------------------------------------
# the network
# ----------------------------------------------------------------------
@contextmanager
def _layer(name: str):
    try:
        yield
    except NumericError as exc:
        raise NumericError(f"[{name}] {exc}") from exc


class MILDNet:
    """A configured network plus its named weights.

    Inference (``training=False``) is deterministic and does not mutate the
    model, so one instance can be shared between concurrent forward calls.
    """

    def __init__(self, cfg: ModelConfig, params: Optional[Dict[str, Tensor]] = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg, seed)
        missing = set(parameter_shapes(cfg)) - set(self.params)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)[:5]}...")
        for name, shape in parameter_shapes(cfg).items():
            if self.params[name].shape != tuple(shape):
                raise ConfigError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    # parameters ---------------------------------------------------------
    def conv(self, name: str, dilation: int = 1) -> ConvParams:
        return ConvParams(self.params[name + ".weight"], self.params[name + ".bias"], dilation=dilation)

    def _maybe(self, name: str) -> Optional[ConvParams]:
        return self.conv(name) if name + ".weight" in self.params else None

    def weight_tensors(self) -> List[Tensor]:
        """Kernels subject to weight decay (biases excluded)."""
        return [t for n, t in self.params.items() if n.endswith(".weight")]

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def aspp_branches(self) -> List[AsppBranch]:
        brs = [
            AsppBranch(self.conv(f"aspp.rate{i}.conv"), self.conv(f"aspp.rate{i}.proj1"), self.conv(f"aspp.rate{i}.proj2"), r)
            for i, r in enumerate(self.cfg.aspp_rates)
        ]
        brs.append(AsppBranch(None, self.conv("aspp.pool.proj1"), self.conv("aspp.pool.proj2")))
        return brs

    # forward ------------------------------------------------------------
    def encode(self, image: Tensor, training: bool = False, rng=None):
        """Shared encoder; returns (aspp features, [skip0, skip1, skip2], aux tap)."""
        cfg = self.cfg
        with _layer("stem"):
            h = ops.relu(ops.conv2d(image, self.conv("stem.conv1")))
            h = ops.relu(ops.conv2d(h, self.conv("stem.conv2")))
        skips = [h]
        for k in (1, 2, 3):
            with _layer(f"enc{k}"):
                h = ops.maxpool2x(h)
                h = mil_unit(
                    h,
                    image,
                    self.conv(f"enc{k}.mil.conv1"),
                    self.conv(f"enc{k}.mil.conv2"),
                    self.conv(f"enc{k}.mil.image_conv"),
                    self.conv(f"enc{k}.mil.fuse_conv"),
                )
                for u in range(cfg.residual_units_per_stage):
                    h = residual_unit(
                        h,
                        self.conv(f"enc{k}.res{u}.conv1"),
                        self.conv(f"enc{k}.res{u}.conv2"),
                        self._maybe(f"enc{k}.res{u}.shortcut"),
                    )
            if k < 3:
                skips.append(h)
        tap = None
        for i, rate in enumerate(cfg.dilated_rates):
            with _layer(f"dil{i}"):
                h = dilated_residual_unit(h, self.conv(f"dil{i}.conv1"), self.conv(f"dil{i}.conv2"), rate)
            if i == cfg.aux_tap:
                tap = h
        with _layer("aspp"):
            h = aspp(h, self.aspp_branches(), cfg.dropout_rate, training, rng)
        return h, skips, tap

    def forward(self, image, training: bool = False, rng: Optional[np.random.Generator] = None) -> SegmentationOutput:
        """Run the network on a (batch, in_channels, H, W) image tensor.

        H and W must be multiples of 8. ``training=True`` enables dropout and
        requires ``rng``.
        """
        if not isinstance(image, Tensor):
            image = Tensor(image)
        if image.ndim != 4 or image.shape[1] != self.cfg.in_channels:
            raise ConfigError(
                f"expected image of shape (batch, {self.cfg.in_channels}, H, W), got {image.shape}"
            )
        hh, ww = image.shape[2:]
        if hh % 8 or ww % 8:
            raise ConfigError(f"image extents {hh}x{ww} must be divisible by 8")
        if training and rng is None:
            raise ConfigError("training-mode forward needs a random generator for dropout")

        h, skips, tap = self.encode(image, training, rng)
        for name, skip in (("dec3", skips[2]), ("dec2", skips[1]), ("dec1", skips[0])):
            with _layer(name):
                h = decoder_block(h, skip, self.conv(f"{name}.skip_proj"), self.conv(f"{name}.fuse"))
        logits: Dict[str, Tensor] = {}
        with _layer("head"):
            feats = ops.dropout(h, self.cfg.dropout_rate, training, rng)
            for b in self.cfg.branches:
                logits[b] = ops.conv2d(feats, self.conv(f"head.{b}"))
            for b in self.cfg.aux_branches:
                z = ops.conv2d(tap, self.conv(f"head.{b}"))
                for _ in range(3):
                    z = ops.upsample2x(z)
                logits[b] = z
        return SegmentationOutput(logits, self.cfg.variant)

    __call__ = forward

    def predict(self, image: np.ndarray) -> Dict[str, np.ndarray]:
        """Inference-mode probabilities for an (N, C, H, W) float array."""
        return self.forward(Tensor(image), training=False).probs()
