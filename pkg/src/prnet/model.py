"""Progressive recurrent shadow-removal network.

A stride-1 residual extractor turns the shadow image and its mask into the
initial hidden state h_0. Each iteration then fuses the previous prediction,
the mask and the previous hidden state (re-integration), advances the hidden
state with a convolutional GRU, and decodes an RGB image from it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import tensor as tn
from .tensor import Tensor

Probe = Callable[[str, Tensor], None]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    ``widths`` are the extractor's three layer widths; the last one is also
    the hidden-state width. ``iterations`` only matters when
    ``shared_update`` is False: it is the number of independent blocks.
    """

    in_channels: int = 4
    widths: tuple[int, int, int] = (64, 96, 128)
    image_features: int = 192
    hidden_features: int = 64
    tail_width: int = 256
    stem_kernel: int = 7
    kernel: int = 3
    hidden_kernel: int = 1
    projection_kernel: int = 1
    norm_eps: float = 1e-5
    shared_update: bool = True
    iterations: int = 8
    residual_output: bool = False
    use_reintegration: bool = True
    use_update: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ValueError(f"widths must be three positive ints, got {self.widths}")
        for k in (self.stem_kernel, self.kernel, self.hidden_kernel, self.projection_kernel):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and positive, got {k}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @property
    def hidden(self) -> int:
        return self.widths[-1]

    @property
    def blocks(self) -> int:
        return 1 if self.shared_update else self.iterations

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Channel widths 8/12/16 with every other width scaled by 1/8."""
        base = dict(widths=(8, 12, 16), image_features=24, hidden_features=8, tail_width=32)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**d)

    def digest(self) -> int:
        """64-bit hash of everything that determines the parameter layout."""
        d = self.to_dict()
        if self.shared_update:
            d["iterations"] = 0
        blob = json.dumps(d, sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor

    @property
    def kernel(self) -> int:
        return self.weight.shape[-1]

    def __call__(self, x: Tensor) -> Tensor:
        return tn.conv2d(x, self.weight, self.bias, stride=1, padding=self.kernel // 2)


@dataclass
class Norm:
    scale: Tensor
    shift: Tensor
    eps: float = field(default=1e-5, metadata={"static": True})

    def __call__(self, x: Tensor) -> Tensor:
        return tn.instance_norm(x, self.scale, self.shift, self.eps)


@dataclass
class ConvNorm:
    """conv -> instance norm; the caller decides on the activation."""

    conv: Conv
    norm: Norm

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(self.conv(x))


@dataclass
class ResBlock:
    conv_a: ConvNorm
    conv_b: ConvNorm
    projection: ConvNorm | None = None

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv_b(tn.relu(self.conv_a(x)))
        skip = x if self.projection is None else self.projection(x)
        return tn.relu(tn.add(y, skip))


@dataclass
class ExtractorParams:
    conv1: ConvNorm
    layers: list[list[ResBlock]]
    conv2: ConvNorm


@dataclass
class ReintegrationParams:
    conv_s: ConvNorm
    conv_l: ConvNorm
    conv_r: ConvNorm


@dataclass
class GruParams:
    w_z: Conv
    w_r: Conv
    w_h: Conv


@dataclass
class TailParams:
    conv_a: Conv
    conv_b: Conv


@dataclass
class IterationBlock:
    """Everything applied once per iteration; shared across iterations by default."""

    reintegration: ReintegrationParams | None
    gru: GruParams | None
    tail: TailParams


@dataclass
class ModelParams:
    config: ModelConfig
    extractor: ExtractorParams
    blocks: list[IterationBlock]

    @property
    def reintegration(self) -> ReintegrationParams | None:
        return self.blocks[0].reintegration

    @property
    def gru(self) -> GruParams | None:
        return self.blocks[0].gru

    @property
    def tail(self) -> TailParams:
        return self.blocks[0].tail

    def block(self, k: int) -> IterationBlock:
        """Parameters used at iteration k (1-based); past the last block, the last is reused."""
        return self.blocks[min(k, len(self.blocks)) - 1]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(_walk("extractor", self.extractor)) + [
            item for i, b in enumerate(self.blocks) for item in _walk(f"blocks.{i}", b)]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def astype(self, dtype) -> "ModelParams":
        """Deep copy with every tensor cast to ``dtype``."""
        return _map_tensors(self, lambda t: t.astype(dtype))

    def copy(self) -> "ModelParams":
        return _map_tensors(self, lambda t: Tensor(t.data.copy(), dtype=t.dtype, requires_grad=t.requires_grad))


def _walk(prefix: str, obj) -> Iterator[tuple[str, Tensor]]:
    if obj is None:
        return
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from _walk(f"{prefix}.{i}", item)
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.metadata.get("static") or f.name == "config":
                continue
            yield from _walk(f"{prefix}.{f.name}", getattr(obj, f.name))


def _map_tensors(obj, fn):
    if isinstance(obj, Tensor):
        return fn(obj)
    if isinstance(obj, list):
        return [_map_tensors(o, fn) for o in obj]
    if dataclasses.is_dataclass(obj) and not isinstance(obj, ModelConfig):
        return dataclasses.replace(obj, **{
            f.name: _map_tensors(getattr(obj, f.name), fn)
            for f in dataclasses.fields(obj) if f.init and not f.metadata.get("static")})
    return obj


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _conv(rng: np.random.Generator, cin: int, cout: int, k: int) -> Conv:
    bound = np.sqrt(1.0 / (cin * k * k))
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
    b = rng.uniform(-bound, bound, size=(cout,)).astype(np.float32)
    return Conv(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


def _norm(c: int, eps: float) -> Norm:
    return Norm(Tensor(np.ones(c, np.float32), requires_grad=True),
                Tensor(np.zeros(c, np.float32), requires_grad=True), eps)


def _conv_norm(rng, cin, cout, k, eps) -> ConvNorm:
    return ConvNorm(_conv(rng, cin, cout, k), _norm(cout, eps))


def _iteration_block(rng, cfg: ModelConfig) -> IterationBlock:
    c, eps = cfg.hidden, cfg.norm_eps
    reint = None
    if cfg.use_reintegration:
        reint = ReintegrationParams(
            conv_s=_conv_norm(rng, 4, cfg.image_features, cfg.kernel, eps),
            conv_l=_conv_norm(rng, c, cfg.hidden_features, cfg.hidden_kernel, eps),
            conv_r=_conv_norm(rng, cfg.image_features + cfg.hidden_features, c, cfg.kernel, eps),
        )
    gru = None
    if cfg.use_update:
        gru = GruParams(*(_conv(rng, 2 * c, c, cfg.kernel) for _ in range(3)))
    tail = TailParams(_conv(rng, c, cfg.tail_width, cfg.kernel), _conv(rng, cfg.tail_width, 3, cfg.kernel))
    return IterationBlock(reint, gru, tail)


def init_params(cfg: ModelConfig | None = None, seed: int = 0) -> ModelParams:
    """Fan-in uniform conv init, unit norm scale, zero norm shift."""
    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(seed)
    eps = cfg.norm_eps
    conv1 = _conv_norm(rng, cfg.in_channels, cfg.widths[0], cfg.stem_kernel, eps)
    layers = []
    prev = cfg.widths[0]
    for width in cfg.widths:
        blocks = []
        for b in range(2):
            cin = prev if b == 0 else width
            proj = _conv_norm(rng, cin, width, cfg.projection_kernel, eps) if cin != width else None
            blocks.append(ResBlock(_conv_norm(rng, cin, width, cfg.kernel, eps),
                                   _conv_norm(rng, width, width, cfg.kernel, eps), proj))
        layers.append(blocks)
        prev = width
    conv2 = _conv_norm(rng, cfg.hidden, cfg.hidden, 1, eps)
    extractor = ExtractorParams(conv1, layers, conv2)
    blocks = [_iteration_block(rng, cfg) for _ in range(cfg.blocks)]
    return ModelParams(cfg, extractor, blocks)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


@dataclass
class IterationTrace:
    predictions: list[Tensor]
    hiddens: list[Tensor]

    @property
    def final(self) -> Tensor:
        return self.predictions[-1]


def _check_inputs(image: Tensor, mask: Tensor) -> None:
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise tn.DimensionError(f"image must be (N, 3, H, W), got {image.shape}")
    if mask.data.ndim != 4 or mask.shape[1] != 1:
        raise tn.DimensionError(f"mask must be (N, 1, H, W), got {mask.shape}")
    if image.shape[0] != mask.shape[0] or image.shape[2:] != mask.shape[2:]:
        raise tn.DimensionError(f"image {image.shape} and mask {mask.shape} are not aligned")


def extract_features(image: Tensor, mask: Tensor, p: ExtractorParams) -> Tensor:
    """h_0 from the 4-channel (image, mask) stack; spatial size is preserved."""
    _check_inputs(image, mask)
    x = tn.relu(p.conv1(tn.concat_channels([image, mask])))
    for layer in p.layers:
        for block in layer:
            x = block(x)
    return tn.relu(p.conv2(x))


def reintegrate(prev_image: Tensor, mask: Tensor, prev_hidden: Tensor,
                p: ReintegrationParams, probe: Probe | None = None) -> Tensor:
    f_s = tn.relu(p.conv_s(tn.concat_channels([prev_image, mask])))
    f_l = tn.relu(p.conv_l(prev_hidden))
    if probe is not None:
        probe("F_s", f_s)
        probe("F_l", f_l)
    f_r = tn.relu(p.conv_r(tn.concat_channels([f_s, f_l])))
    if probe is not None:
        probe("F_r", f_r)
    return f_r


def gru_step(h_prev: Tensor, x: Tensor, p: GruParams, probe: Probe | None = None) -> Tensor:
    """One ConvGRU update; inputs are concatenated in (hidden, input) order."""
    if h_prev.shape != x.shape:
        raise tn.DimensionError(f"gru_step: hidden {h_prev.shape} vs input {x.shape}")
    hx = tn.concat_channels([h_prev, x])
    z = tn.sigmoid(p.w_z(hx))
    r = tn.sigmoid(p.w_r(hx))
    h_cand = tn.tanh(p.w_h(tn.concat_channels([tn.mul(r, h_prev), x])))
    if probe is not None:
        probe("z", z)
        probe("r", r)
        probe("h_cand", h_cand)
    return tn.add(tn.mul(1.0 - z, h_prev), tn.mul(z, h_cand))


def predict_tail(h: Tensor, p: TailParams, residual_base: Tensor | None = None) -> Tensor:
    out = p.conv_b(tn.relu(p.conv_a(h)))
    return out if residual_base is None else tn.add(out, residual_base)


def forward(image: Tensor, mask: Tensor, params: ModelParams, T: int,
            probe: Probe | None = None) -> IterationTrace:
    """Run T progressive iterations and record every prediction and hidden state.

    Ablation configurations: without re-integration the GRU input is h_0 at
    every step; without the update module the re-integrated features become
    the next hidden state directly; with neither, h_0 is decoded once and the
    same image is reported for every iteration.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    cfg = params.config
    h0 = extract_features(image, mask, params.extractor)
    residual = image if cfg.residual_output else None
    hiddens = [h0]
    predictions: list[Tensor] = []

    if not cfg.use_reintegration and not cfg.use_update:
        out = predict_tail(h0, params.tail, residual)
        return IterationTrace([out] * T, [h0] * (T + 1))

    prev_image, h = image, h0
    for k in range(1, T + 1):
        blk = params.block(k)
        if blk.reintegration is not None:
            x = reintegrate(prev_image, mask, h, blk.reintegration, probe)
        else:
            x = h0
        h = gru_step(h, x, blk.gru, probe) if blk.gru is not None else x
        prev_image = predict_tail(h, blk.tail, residual)
        hiddens.append(h)
        predictions.append(prev_image)
    return IterationTrace(predictions, hiddens)


# ---------------------------------------------------------------------------
# Cost accounting
# ---------------------------------------------------------------------------


def _tensors_in(obj) -> int:
    return sum(t.size for _, t in _walk("", obj))


def count_params(params: ModelParams) -> int:
    """Number of learnable scalars: conv weights and biases, norm scales and shifts."""
    return sum(t.size for t in params.parameters())


def param_breakdown(params: ModelParams) -> dict[str, int]:
    out = {"extractor": _tensors_in(params.extractor)}
    for name in ("reintegration", "gru", "tail"):
        out[name] = sum(_tensors_in(getattr(b, name)) for b in params.blocks)
    return out


def _conv_macs(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k


def flop_terms(H: int, W: int, cfg: ModelConfig | None = None,
               flops_per_mac: int = 1) -> tuple[float, float]:
    """(iteration-independent, per-iteration) convolution cost at H x W.

    Only convolution multiply-accumulates are counted; every conv is stride 1
    and same-padded so each costs C_in * C_out * k^2 MACs per pixel.
    """
    cfg = cfg or ModelConfig()
    w0, c = cfg.widths[0], cfg.hidden
    fixed = _conv_macs(cfg.in_channels, w0, cfg.stem_kernel)
    prev = w0
    for width in cfg.widths:
        for b in range(2):
            cin = prev if b == 0 else width
            fixed += _conv_macs(cin, width, cfg.kernel) + _conv_macs(width, width, cfg.kernel)
            if cin != width:
                fixed += _conv_macs(cin, width, cfg.projection_kernel)
        prev = width
    fixed += _conv_macs(c, c, 1)

    per_iter = _conv_macs(c, cfg.tail_width, cfg.kernel) + _conv_macs(cfg.tail_width, 3, cfg.kernel)
    if cfg.use_reintegration:
        per_iter += (_conv_macs(4, cfg.image_features, cfg.kernel)
                     + _conv_macs(c, cfg.hidden_features, cfg.hidden_kernel)
                     + _conv_macs(cfg.image_features + cfg.hidden_features, c, cfg.kernel))
    if cfg.use_update:
        per_iter += 3 * _conv_macs(2 * c, c, cfg.kernel)
    if not cfg.use_reintegration and not cfg.use_update:
        fixed += per_iter
        per_iter = 0
    pixels = H * W * flops_per_mac
    return float(fixed * pixels), float(per_iter * pixels)


def count_flops(H: int, W: int, T: int, cfg: ModelConfig | None = None,
                flops_per_mac: int = 1) -> float:
    if H < 1 or W < 1 or T < 1:
        raise ValueError("H, W and T must be positive")
    fixed, per_iter = flop_terms(H, W, cfg, flops_per_mac)
    return fixed + T * per_iter
