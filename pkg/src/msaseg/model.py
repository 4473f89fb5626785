"""Multi-scale segmentation network with a two-branch attention head.

Every scale stream runs the same backbone weights on a resized copy of the
image. Stage features are fused hypercolumn-style at the 1/4 resolution,
passed through a per-scale dilated convolution, and the streams rejoin in an
attention head that emits location-attention logits (one channel per scale)
and a per-class recalibration map. Score maps from all streams are then
merged, either by the attention head or by elementwise max/mean pooling.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Node, Tape
from .tensor import Conv2dSpec, ShapeError, Tensor

FUSION_MODES = ("attention", "maxpool", "avgpool")
RECALIB_MODES = ("multiply", "bias")


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    n_class: int = 5
    in_channels: int = 3
    # stage 3 keeps the 1/4 resolution and widens its view with dilation instead
    stage3_dilation: int = 2

    def __post_init__(self):
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ValueError(f"backbone needs three positive stage widths, got {self.widths}")
        if self.n_class < 2:
            raise ValueError("n_class must be at least 2")


@dataclass(frozen=True)
class ScaleStreamConfig:
    scales: tuple[float, ...] = (1.0, 0.5)
    # dilation of the scale-specific conv, one entry per scale (same order)
    dilations: tuple[int, ...] = (2, 12)
    scale_channels: int = 32
    head_hidden: int = 64

    def __post_init__(self):
        if len(set(self.scales)) != len(self.scales):
            raise ValueError(f"scale factors must be distinct, got {self.scales}")
        if any(not 0 < s <= 1 for s in self.scales):
            raise ValueError(f"scale factors must lie in (0, 1], got {self.scales}")
        if 1.0 not in self.scales:
            raise ValueError("scale 1.0 must be one of the streams")
        if len(self.dilations) != len(self.scales) or min(self.dilations) < 1:
            raise ValueError("need one positive dilation per scale")

    def dilation_for(self, scale: float) -> int:
        try:
            return self.dilations[self.scales.index(scale)]
        except ValueError:
            raise KeyError(f"scale {scale} is not a configured stream (have {self.scales})") from None


@dataclass(frozen=True)
class Ablation:
    multi_stage: bool = True
    diverse_dilations: bool = True
    fusion: str = "attention"
    extra_branch: bool = True
    recalib_mode: str = "multiply"

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.recalib_mode not in RECALIB_MODES:
            raise ValueError(f"recalib_mode must be one of {RECALIB_MODES}, got {self.recalib_mode!r}")
        if self.fusion != "attention" and self.extra_branch:
            raise ValueError("pooling merges have no attention head; extra_branch must be off")

    @property
    def stream_conv(self) -> str | None:
        """Which per-stream conv sits between the features and the head."""
        if self.fusion != "attention":
            return None
        if self.diverse_dilations:
            return "per_scale"
        if self.multi_stage:
            return "shared"
        return None


ATTENTION_TO_SCALE = Ablation(multi_stage=False, diverse_dilations=False, fusion="attention", extra_branch=False)
FULL_METHOD = Ablation()


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    streams: ScaleStreamConfig = field(default_factory=ScaleStreamConfig)

    @property
    def n_class(self) -> int:
        return self.backbone.n_class

    @property
    def n_scales(self) -> int:
        return len(self.streams.scales)


@dataclass
class StreamOutputs:
    tape: Tape
    scores: list[Node]              # P^s per scale, resized to the common resolution
    final: Node                     # fused prediction
    wl_logits: Node | None = None   # location-attention logits, pre-softmax
    location: Node | None = None    # softmax(wl_logits)
    wr: Node | None = None          # recalibration map after the sigmoid
    wr_raw: Node | None = None      # recalibration map before the sigmoid
    head_inputs: list[Node] = field(default_factory=list)


def param_group(name: str) -> str:
    """'encoder' for backbone weights, 'decoder' for everything that produces
    or reweights score maps (score conv, stream convs, attention head)."""
    return "encoder" if name.startswith("backbone.") else "decoder"


def _conv_shapes(config: ModelConfig, ablation: Ablation) -> list[tuple[str, tuple]]:
    bb, st = config.backbone, config.streams
    w1, w2, w3 = bb.widths
    shapes = [
        ("backbone.conv1", (w1, bb.in_channels, 3, 3)),
        ("backbone.conv2", (w2, w1, 3, 3)),
        ("backbone.conv3", (w3, w2, 3, 3)),
        ("decoder.score", (bb.n_class, w3, 1, 1)),
    ]
    if ablation.fusion != "attention":
        return shapes
    feat_ch = sum(bb.widths) if ablation.multi_stage else w3
    kind = ablation.stream_conv
    if kind == "per_scale":
        for k in range(len(st.scales)):
            shapes.append((f"stream_conv.{k}", (st.scale_channels, feat_ch, 3, 3)))
    elif kind == "shared":
        shapes.append(("stream_conv.shared", (st.scale_channels, feat_ch, 3, 3)))
    head_in = len(st.scales) * (st.scale_channels if kind else feat_ch)
    shapes += [
        ("head.loc.hidden", (st.head_hidden, head_in, 3, 3)),
        ("head.loc.out", (len(st.scales), st.head_hidden, 1, 1)),
    ]
    if ablation.extra_branch:
        shapes += [
            ("head.rec.hidden", (st.head_hidden, head_in, 3, 3)),
            ("head.rec.out", (bb.n_class, st.head_hidden, 1, 1)),
        ]
    return shapes


def init_params(config: ModelConfig, ablation: Ablation = FULL_METHOD, seed: int = 0,
                dtype=np.float32) -> dict[str, Tensor]:
    """Fan-in scaled normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _conv_shapes(config, ablation):
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[f"{name}.weight"] = Tensor(w, dtype=dtype)
        params[f"{name}.bias"] = Tensor(np.zeros(shape[0]), dtype=dtype)
    return params


def register_params(tape: Tape, params: dict[str, Tensor]) -> dict[str, Node]:
    return {name: tape.param(name, params[name]) for name in sorted(params)}


def _conv(tape: Tape, nodes: dict[str, Node], name: str, x: Node, padding: int = 0, dilation: int = 1) -> Node:
    w = nodes[f"{name}.weight"]
    cout, cin, kh, kw = w.shape
    spec = Conv2dSpec(cin, cout, (kh, kw), (1, 1), (padding, padding), (dilation, dilation))
    return tape.conv2d(x, w, nodes[f"{name}.bias"], spec)


def backbone_forward(tape: Tape, nodes: dict[str, Node], image: Node, config: ModelConfig) -> list[Node]:
    """Three conv+ReLU stages; stages 1 and 2 end in a stride-2 max pool."""
    h, w = image.shape[2:]
    if h % 4 or w % 4:
        raise ShapeError(f"backbone input {h}x{w} is not divisible by 4; pad the image first")
    x = tape.relu(_conv(tape, nodes, "backbone.conv1", image, padding=1))
    f1 = tape.maxpool2d(x, 2)
    x = tape.relu(_conv(tape, nodes, "backbone.conv2", f1, padding=1))
    f2 = tape.maxpool2d(x, 2)
    d = config.backbone.stage3_dilation
    f3 = tape.relu(_conv(tape, nodes, "backbone.conv3", f2, padding=d, dilation=d))
    return [f1, f2, f3]


def hypercolumn_fuse(tape: Tape, stage_features: Sequence[Node]) -> Node:
    """Resize every stage to the second stage's resolution and concatenate."""
    if len(stage_features) == 1:
        return stage_features[0]
    h, w = stage_features[1].shape[2:]
    resized = [tape.bilinear_resize(f, h, w) if f.shape[2:] != (h, w) else f for f in stage_features]
    return tape.concat_channels(resized)


def scale_specific_conv(tape: Tape, nodes: dict[str, Node], fused: Node, scale: float,
                        config: ModelConfig) -> Node:
    """3x3 conv with this scale's own weights and dilation; padding keeps the size."""
    k = config.streams.scales.index(scale) if scale in config.streams.scales else None
    if k is None:
        raise KeyError(f"scale {scale} is not a configured stream (have {config.streams.scales})")
    d = config.streams.dilations[k]
    return tape.relu(_conv(tape, nodes, f"stream_conv.{k}", fused, padding=d, dilation=d))


def attention_head(tape: Tape, nodes: dict[str, Node], per_scale: Sequence[Node],
                   extra_branch: bool = True) -> tuple[Node, Node | None, Node | None]:
    """Return (location logits, recalibration map, pre-sigmoid recalibration map).

    The recalibration entries are None when ``extra_branch`` is off.
    """
    shape = per_scale[0].shape
    for k, f in enumerate(per_scale):
        if f.shape != shape:
            raise ShapeError(f"attention_head input {k} has shape {f.shape}, expected {shape}")
    joined = tape.concat_channels(list(per_scale)) if len(per_scale) > 1 else per_scale[0]
    hidden = tape.relu(_conv(tape, nodes, "head.loc.hidden", joined, padding=1))
    wl = _conv(tape, nodes, "head.loc.out", hidden)
    if wl.shape[1] != len(per_scale):
        raise ShapeError(f"location branch emits {wl.shape[1]} channels for {len(per_scale)} scales")
    if not extra_branch:
        return wl, None, None
    hidden = tape.relu(_conv(tape, nodes, "head.rec.hidden", joined, padding=1))
    wr_raw = _conv(tape, nodes, "head.rec.out", hidden)
    return wl, tape.sigmoid(wr_raw), wr_raw


def fuse_attention(tape: Tape, scores: Sequence[Node], wl_logits: Node, recal: Node | None = None,
                   mode: str = "multiply") -> tuple[Node, Node]:
    """Attention-weighted sum of the stream score maps.

    ``recal`` is the sigmoid map for ``mode='multiply'`` and the raw map for
    ``mode='bias'``; None disables recalibration. Returns (fused, weights).
    """
    n_scales = len(scores)
    if n_scales == 0 or wl_logits.shape[1] != n_scales:
        raise ShapeError(f"{n_scales} score maps but {wl_logits.shape[1]} attention channels")
    shape = scores[0].shape
    for k, p in enumerate(scores):
        if p.shape != shape:
            raise ShapeError(f"score map {k} has shape {p.shape}, expected {shape}")
    if wl_logits.shape[2:] != shape[2:] or (recal is not None and recal.shape != shape):
        raise ShapeError("attention maps do not match the score map resolution")
    if mode not in RECALIB_MODES:
        raise ValueError(f"unknown recalibration mode {mode!r}")
    weights = tape.softmax_channels(wl_logits)
    fused = None
    for s, p in enumerate(scores):
        if recal is not None:
            p = tape.mul(p, recal) if mode == "multiply" else tape.add(p, recal)
        w = tape.broadcast_channels(tape.slice_channels(weights, s, s + 1), shape[1])
        term = tape.mul(w, p)
        fused = term if fused is None else tape.add(fused, term)
    return fused, weights


def fuse_pooling(tape: Tape, scores: Sequence[Node], mode: str) -> Node:
    """Elementwise max or mean across the stream score maps."""
    if not scores:
        raise ValueError("fuse_pooling needs at least one score map")
    if mode not in ("max", "avg"):
        raise ValueError(f"pooling mode must be 'max' or 'avg', got {mode!r}")
    out = scores[0]
    for p in scores[1:]:
        out = tape.maximum(out, p) if mode == "max" else tape.add(out, p)
    if mode == "avg" and len(scores) > 1:
        out = tape.scale(out, 1.0 / len(scores))
    return out


def _scaled_size(h: int, w: int, scale: float) -> tuple[int, int]:
    out = []
    for size in (h, w):
        v = size * scale
        iv = int(round(v))
        if abs(v - iv) > 1e-9 or iv % 4 or iv < 4:
            raise ShapeError(
                f"image size {h}x{w} at scale {scale} gives {v:g}, which is not a positive multiple of 4; "
                "pad the image so every stream divides evenly"
            )
        out.append(iv)
    return tuple(out)


def model_forward(params: dict[str, Tensor], image: Tensor, config: ModelConfig,
                  ablation: Ablation = FULL_METHOD, tape: Tape | None = None) -> StreamOutputs:
    if image.dtype != next(iter(params.values())).dtype:
        image = image.astype(next(iter(params.values())).dtype)
    if len(image.shape) != 4 or image.shape[1] != config.backbone.in_channels:
        raise ShapeError(f"image must be N x {config.backbone.in_channels} x H x W, got {image.shape}")
    tape = Tape() if tape is None else tape
    nodes = register_params(tape, params)
    img = tape.constant(image, name="image")
    h, w = image.shape[2:]
    sizes = [_scaled_size(h, w, s) for s in config.streams.scales]
    common = (h // 4, w // 4)

    scores, feats = [], []
    for k, (scale, (hs, ws)) in enumerate(zip(config.streams.scales, sizes)):
        x = img if (hs, ws) == (h, w) else tape.bilinear_resize(img, hs, ws)
        stages = backbone_forward(tape, nodes, x, config)
        p = _conv(tape, nodes, "decoder.score", stages[-1])
        if p.shape[2:] != common:
            p = tape.bilinear_resize(p, *common)
        scores.append(p)
        if ablation.fusion != "attention":
            continue
        f = hypercolumn_fuse(tape, stages) if ablation.multi_stage else stages[-1]
        if ablation.stream_conv == "per_scale":
            f = scale_specific_conv(tape, nodes, f, scale, config)
        elif ablation.stream_conv == "shared":
            f = tape.relu(_conv(tape, nodes, "stream_conv.shared", f, padding=1))
        if f.shape[2:] != common:
            f = tape.bilinear_resize(f, *common)
        feats.append(f)

    if ablation.fusion == "maxpool":
        return StreamOutputs(tape, scores, fuse_pooling(tape, scores, "max"))
    if ablation.fusion == "avgpool":
        return StreamOutputs(tape, scores, fuse_pooling(tape, scores, "avg"))

    wl, wr, wr_raw = attention_head(tape, nodes, feats, ablation.extra_branch)
    recal = None
    if ablation.extra_branch:
        recal = wr if ablation.recalib_mode == "multiply" else wr_raw
    final, weights = fuse_attention(tape, scores, wl, recal, ablation.recalib_mode)
    return StreamOutputs(tape, scores, final, wl, weights, wr, wr_raw, feats)
