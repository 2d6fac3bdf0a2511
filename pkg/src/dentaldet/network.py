"""Anchor-free multi-attribute detector.

Backbone convolutions are coordinate convolutions (input concatenated with
normalized x/y maps). The pyramid fuses top-down and bottom-up; with the
extra upsampling stage enabled it reaches down to the stride-4 backbone
feature, so the three output levels sit at strides 4/8/16 instead of 8/16/32.
Every output location predicts a distance distribution per box side, 32 FDI
class logits and 4 attribute logits.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .core import NUM_ATTRIBUTES, NUM_CLASSES
from .errors import MalformedFile, ShapeMismatch

BACKBONE_WIDTHS = (16, 32, 64, 128, 256)  # stem, strides 4, 8, 16, 32
BACKBONE_DEPTHS = (1, 2, 2, 1)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 256
    width_mult: float = 0.5
    depth_mult: float = 0.34
    reg_max: int = 16
    num_classes: int = NUM_CLASSES
    num_attributes: int = NUM_ATTRIBUTES
    coordconv_enabled: bool = True
    extra_upsample_enabled: bool = True
    head_width: Optional[int] = None  # hidden channels of the head branches; derived when None

    def __post_init__(self):
        if self.input_size <= 0 or self.input_size % 32:
            raise ShapeMismatch(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.reg_max < 1:
            raise ValueError(f"reg_max must be >= 1, got {self.reg_max}")
        if self.width_mult <= 0 or self.depth_mult < 0:
            raise ValueError("width_mult must be > 0 and depth_mult >= 0")
        if self.num_classes != NUM_CLASSES or self.num_attributes != NUM_ATTRIBUTES:
            raise ValueError("the detector predicts 32 FDI classes and 4 attributes")

    @property
    def strides(self) -> Tuple[int, int, int]:
        return (4, 8, 16) if self.extra_upsample_enabled else (8, 16, 32)

    def widths(self) -> List[int]:
        return [max(4, int(round(c * self.width_mult))) for c in BACKBONE_WIDTHS]

    def depths(self) -> List[int]:
        return [max(1, int(round(d * self.depth_mult))) if self.depth_mult > 0 else 0 for d in BACKBONE_DEPTHS]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def coord_channels(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """2 x H x W map: channel 0 is x in [-1, 1] left to right, channel 1 is y top to bottom."""
    if height < 1 or width < 1:
        raise ValueError("coordinate maps need positive size")

    def axis(n):
        if n == 1:
            return torch.zeros(1, dtype=dtype, device=device)
        return torch.linspace(-1.0, 1.0, n, dtype=dtype, device=device)

    ys, xs = torch.meshgrid(axis(height), axis(width), indexing="ij")
    return torch.stack([xs, ys])


class CoordConv2d(nn.Conv2d):
    """Conv2d over ``[input || x-map || y-map]``; the last two weight slices act on the coordinates."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=True):
        super().__init__(in_channels + 2, out_channels, kernel_size, stride=stride, padding=padding, bias=bias)
        self.data_channels = in_channels

    def forward(self, x):
        n, _, h, w = x.shape
        coords = coord_channels(h, w, dtype=x.dtype, device=x.device).expand(n, -1, -1, -1)
        return super().forward(torch.cat([x, coords], dim=1))


class ConvBlock(nn.Module):
    """Conv -> BatchNorm -> SiLU."""

    def __init__(self, c_in, c_out, k=3, s=1, coord=False):
        super().__init__()
        conv_cls = CoordConv2d if coord else nn.Conv2d
        self.conv = conv_cls(c_in, c_out, k, stride=s, padding=k // 2, bias=False)
        self.bn = nn.BatchNorm2d(c_out)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Bottleneck(nn.Module):
    def __init__(self, c, coord=False):
        super().__init__()
        self.cv1 = ConvBlock(c, c, 3, coord=coord)
        self.cv2 = ConvBlock(c, c, 3, coord=coord)

    def forward(self, x):
        return x + self.cv2(self.cv1(x))


class Stage(nn.Sequential):
    def __init__(self, c_in, c_out, depth, coord):
        super().__init__(ConvBlock(c_in, c_out, 3, 2, coord=coord), *[Bottleneck(c_out, coord) for _ in range(depth)])


class Backbone(nn.Module):
    """Stem plus four stride-2 stages; returns features at strides 4, 8, 16, 32."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w, d = cfg.widths(), cfg.depths()
        coord = cfg.coordconv_enabled
        self.stem = ConvBlock(1, w[0], 3, 2, coord=coord)
        self.stages = nn.ModuleList(Stage(w[i], w[i + 1], d[i], coord) for i in range(4))

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Fuse(nn.Module):
    """Concatenate two maps and mix them back to ``c_out`` channels."""

    def __init__(self, c_a, c_b, c_out, depth):
        super().__init__()
        self.mix = ConvBlock(c_a + c_b, c_out, 1)
        self.blocks = nn.Sequential(*[Bottleneck(c_out) for _ in range(depth)])

    def forward(self, a, b):
        return self.blocks(self.mix(torch.cat([a, b], dim=1)))


class Pyramid(nn.Module):
    """Top-down then bottom-up fusion over the backbone levels in use.

    Vanilla: backbone strides 8/16/32 in, 8/16/32 out. With the extra
    upsampling stage the top-down path continues into the stride-4 feature,
    and the bottom-up path stops at stride 16.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.widths()[1:]  # strides 4, 8, 16, 32
        depth = max(cfg.depths()[-1], 0)
        self.extra = cfg.extra_upsample_enabled
        n_td = 3 if self.extra else 2
        # top-down: level i (coarse) upsampled into level i-1
        self.td = nn.ModuleList()
        c_prev = w[3]
        for i in range(n_td):
            lvl = 2 - i
            self.td.append(Fuse(c_prev, w[lvl], w[lvl], depth))
            c_prev = w[lvl]
        # bottom-up: two downsample+fuse steps
        self.out_levels = (0, 1, 2) if self.extra else (1, 2, 3)
        self.down = nn.ModuleList()
        self.bu = nn.ModuleList()
        for lvl in self.out_levels[1:]:
            c_fine = w[lvl - 1]
            self.down.append(ConvBlock(c_fine, c_fine, 3, 2))
            self.bu.append(Fuse(c_fine, w[lvl], w[lvl], depth))
        self.out_channels = [w[lvl] for lvl in self.out_levels]

    def forward(self, feats):
        c2, c3, c4, c5 = feats
        backbone = [c2, c3, c4, c5]
        td = {3: c5}
        x = c5
        for i, fuse in enumerate(self.td):
            lvl = 2 - i
            x = fuse(F.interpolate(x, scale_factor=2.0, mode="nearest"), backbone[lvl])
            td[lvl] = x
        outs = [td[self.out_levels[0]]]
        x = outs[0]
        for down, fuse, lvl in zip(self.down, self.bu, self.out_levels[1:]):
            x = fuse(down(x), td[lvl])
            outs.append(x)
        return outs


class HeadLevel(nn.Module):
    """Decoupled box / class / attribute branches for one pyramid level."""

    def __init__(self, c_in, reg_max, hidden_box, hidden_cls, hidden_attr):
        super().__init__()
        self.box = nn.Sequential(ConvBlock(c_in, hidden_box), ConvBlock(hidden_box, hidden_box), nn.Conv2d(hidden_box, 4 * (reg_max + 1), 1))
        self.cls = nn.Sequential(ConvBlock(c_in, hidden_cls), ConvBlock(hidden_cls, hidden_cls), nn.Conv2d(hidden_cls, NUM_CLASSES, 1))
        self.attr = nn.Sequential(ConvBlock(c_in, hidden_attr), nn.Conv2d(hidden_attr, NUM_ATTRIBUTES, 1))


@dataclass
class RawPredictions:
    """Dense head outputs, channel-last.

    Per level: ``dfl_logits`` [B, H, W, 4, reg_max+1] (sides left, top,
    right, bottom), ``class_logits`` [B, H, W, 32], ``attribute_logits``
    [B, H, W, 4]. Class and attribute logits are pre-sigmoid.
    """

    dfl_logits: List[torch.Tensor]
    class_logits: List[torch.Tensor]
    attribute_logits: List[torch.Tensor]
    strides: Tuple[int, ...]
    input_size: int

    @property
    def reg_max(self) -> int:
        return self.dfl_logits[0].shape[-1] - 1

    @property
    def batch_size(self) -> int:
        return self.class_logits[0].shape[0]

    def grid_sizes(self) -> List[Tuple[int, int]]:
        return [tuple(t.shape[1:3]) for t in self.class_logits]

    def flat(self):
        """Concatenate levels: dfl [B, N, 4, R+1], cls [B, N, 32], attr [B, N, 4]."""
        b = self.batch_size
        dfl = torch.cat([t.reshape(b, -1, 4, t.shape[-1]) for t in self.dfl_logits], 1)
        cls = torch.cat([t.reshape(b, -1, NUM_CLASSES) for t in self.class_logits], 1)
        attr = torch.cat([t.reshape(b, -1, NUM_ATTRIBUTES) for t in self.attribute_logits], 1)
        return dfl, cls, attr

    def select(self, index) -> "RawPredictions":
        """Sub-batch view (``index`` is an int, slice or index tensor)."""
        if isinstance(index, int):
            index = slice(index, index + 1)
        return RawPredictions(
            [t[index] for t in self.dfl_logits],
            [t[index] for t in self.class_logits],
            [t[index] for t in self.attribute_logits],
            self.strides,
            self.input_size,
        )


class Detector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.neck = Pyramid(cfg)
        c0 = self.neck.out_channels[0]
        if cfg.head_width is not None:
            hb = hc = ha = cfg.head_width
        else:
            hb = max(16, c0 // 4, 4 * (cfg.reg_max + 1) // 4)
            hc = max(c0, 32)
            ha = max(c0 // 2, 16)
        self.head = nn.ModuleList(HeadLevel(c, cfg.reg_max, hb, hc, ha) for c in self.neck.out_channels)
        self.reset_head_bias()

    @property
    def strides(self):
        return self.cfg.strides

    def reset_head_bias(self):
        # low initial class/attribute prior keeps the early background BCE small
        for level, s in zip(self.head, self.cfg.strides):
            nn.init.constant_(level.box[-1].bias, 1.0)
            nn.init.constant_(level.cls[-1].bias, math.log(5 / NUM_CLASSES / (self.cfg.input_size / s) ** 2))
            nn.init.constant_(level.attr[-1].bias, -2.0)

    def attribute_parameters(self):
        for level in self.head:
            yield from level.attr.parameters()

    def forward(self, images: torch.Tensor) -> RawPredictions:
        if images.ndim != 4 or images.shape[1] != 1:
            raise ShapeMismatch(f"expected [B, 1, H, W] input, got {tuple(images.shape)}")
        size = self.cfg.input_size
        if images.shape[2] != size or images.shape[3] != size:
            raise ShapeMismatch(f"expected {size}x{size} input, got {images.shape[2]}x{images.shape[3]}")
        feats = self.neck(self.backbone(images))
        dfl, cls, attr = [], [], []
        r = self.cfg.reg_max + 1
        for level, x in zip(self.head, feats):
            b, _, h, w = x.shape
            dfl.append(level.box(x).permute(0, 2, 3, 1).reshape(b, h, w, 4, r))
            cls.append(level.cls(x).permute(0, 2, 3, 1))
            attr.append(level.attr(x).permute(0, 2, 3, 1))
        return RawPredictions(dfl, cls, attr, self.cfg.strides, size)


def cell_centers(grid_sizes: Sequence[Tuple[int, int]], strides: Sequence[int], dtype=torch.float32, device=None):
    """Pixel centres of every cell, levels concatenated: ([N, 2] xy, [N] stride)."""
    centers, strd = [], []
    for (h, w), s in zip(grid_sizes, strides):
        ys, xs = torch.meshgrid(
            torch.arange(h, dtype=dtype, device=device), torch.arange(w, dtype=dtype, device=device), indexing="ij"
        )
        centers.append(torch.stack([(xs + 0.5) * s, (ys + 0.5) * s], -1).reshape(-1, 2))
        strd.append(torch.full((h * w,), float(s), dtype=dtype, device=device))
    return torch.cat(centers), torch.cat(strd)


def expected_distance(dfl_logits: torch.Tensor) -> torch.Tensor:
    """Mean bin index under softmax over the last axis (units of stride)."""
    bins = torch.arange(dfl_logits.shape[-1], dtype=dfl_logits.dtype, device=dfl_logits.device)
    return (dfl_logits.softmax(-1) * bins).sum(-1)


def distances_to_boxes(dist: torch.Tensor, centers: torch.Tensor, image_size=None) -> torch.Tensor:
    """(left, top, right, bottom) pixel distances around centres -> corner boxes, optionally clipped."""
    lt = centers - dist[..., :2]
    rb = centers + dist[..., 2:]
    boxes = torch.cat([lt, rb], -1)
    if image_size is not None:
        boxes = boxes.clamp(0.0, float(image_size))
    return boxes


def decode_boxes(dfl_logits: torch.Tensor, stride: int, image_size=None) -> torch.Tensor:
    """Decode one level's ``[..., H, W, 4, R+1]`` logits to ``[..., H, W, 4]`` corner boxes."""
    h, w = dfl_logits.shape[-4], dfl_logits.shape[-3]
    centers, _ = cell_centers([(h, w)], [stride], dtype=dfl_logits.dtype, device=dfl_logits.device)
    centers = centers.reshape(h, w, 2)
    dist = expected_distance(dfl_logits) * stride
    return distances_to_boxes(dist, centers, image_size)


def decode_all(raw: RawPredictions, clip: bool = True) -> torch.Tensor:
    """Decoded boxes for every cell of every level: [B, N, 4]."""
    dfl, _, _ = raw.flat()
    centers, strides = cell_centers(raw.grid_sizes(), raw.strides, dtype=dfl.dtype, device=dfl.device)
    dist = expected_distance(dfl) * strides[:, None]
    return distances_to_boxes(dist, centers, raw.input_size if clip else None)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: Detector, path, extra: Optional[Dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"config": model.cfg.to_json(), "state_dict": model.state_dict(), "extra": extra or {}}
    torch.save(payload, path)


def load_checkpoint(path, map_location="cpu") -> Tuple[Detector, Dict]:
    """Rebuild a detector from a checkpoint, checking every tensor shape against its config."""
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
        cfg = ModelConfig.from_json(payload["config"])
        state = payload["state_dict"]
    except (OSError, RuntimeError, KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"{path}: unreadable checkpoint: {exc}") from exc
    model = Detector(cfg)
    expected = model.state_dict()
    missing = sorted(set(expected) - set(state))
    unexpected = sorted(set(state) - set(expected))
    if missing or unexpected:
        raise ShapeMismatch(f"{path}: checkpoint keys disagree with config (missing {missing[:3]}, unexpected {unexpected[:3]})")
    for k, t in expected.items():
        if tuple(state[k].shape) != tuple(t.shape):
            raise ShapeMismatch(f"{path}: {k} has shape {tuple(state[k].shape)}, config implies {tuple(t.shape)}")
    model.load_state_dict(state)
    first = next(iter(state.values()))
    if first.is_floating_point():
        model.to(first.dtype)
    return model, payload.get("extra", {})


def strip_coord_weights(state_dict: Dict[str, torch.Tensor], plain: Detector) -> Dict[str, torch.Tensor]:
    """Convert a CoordConv detector's weights for a plain-convolution twin by dropping the coordinate slices."""
    target = plain.state_dict()
    out = {}
    for k, v in state_dict.items():
        t = target[k]
        if v.shape != t.shape:
            if v.ndim != 4 or v.shape[1] != t.shape[1] + 2:
                raise ShapeMismatch(f"{k}: cannot map {tuple(v.shape)} onto {tuple(t.shape)}")
            v = v[:, : t.shape[1]]
        out[k] = v.clone()
    return out


def zero_coord_weights(model: nn.Module) -> None:
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, CoordConv2d):
                m.weight[:, m.data_channels:] = 0.0
