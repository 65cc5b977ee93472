"""Wide ResNet encoder with selective kernels, projection head and atrous head.

Tensors inside the modules are NCHW as usual for torch. The functional entry
points (``encoder_forward``, ``atrous_forward``) take and return channels-last
tensors, matching how images and label masks are stored.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

EXPANSION = 4


class ArchitectureError(ValueError):
    pass


@dataclass
class EncoderConfig:
    stage_blocks: tuple[int, ...] = (3, 4, 6, 3)
    width_multiplier: float = 2.0
    base_width: int = 64
    selective_kernels: bool = True
    input_channels: int = 3
    output_stride: int = 32
    sk_reduction: int = 16
    sk_min_dim: int = 32
    zero_init_residual: bool = True

    def __post_init__(self):
        self.stage_blocks = tuple(int(b) for b in self.stage_blocks)

    def _scaled(self, w: float, what: str) -> int:
        c = w * self.width_multiplier
        if abs(c - round(c)) > 1e-9 or round(c) < 1:
            raise ArchitectureError(f"{what}: width {w} x multiplier {self.width_multiplier} is not a positive integer")
        return int(round(c))

    @property
    def stem_width(self) -> int:
        return self._scaled(self.base_width, "stem")

    def stage_widths(self) -> list[int]:
        """Bottleneck (inner) widths per stage; stage outputs are 4x these."""
        return [self._scaled(self.base_width * 2 ** i, f"layer{i + 1}") for i in range(len(self.stage_blocks))]

    @property
    def out_channels(self) -> int:
        return self.stage_widths()[-1] * EXPANSION

    def strides_and_dilations(self) -> list[tuple[int, int]]:
        n = len(self.stage_blocks)
        full = 4 * 2 ** (n - 1)
        if self.output_stride > full or full % self.output_stride:
            raise ArchitectureError(f"output_stride {self.output_stride} incompatible with {n} stages (max {full})")
        plan, stride, dilation = [], 4, 1
        for i in range(n):
            s = 1 if i == 0 else 2
            if stride * s > self.output_stride:
                dilation *= s
                s = 1
            stride *= s
            plan.append((s, dilation))
        return plan

    def validate(self) -> None:
        if not self.stage_blocks or any(b < 1 for b in self.stage_blocks):
            raise ArchitectureError(f"stage_blocks must be positive counts, got {self.stage_blocks}")
        if self.width_multiplier <= 0:
            raise ArchitectureError("width_multiplier must be positive")
        self.stage_widths()
        self.strides_and_dilations()


@dataclass
class ProjectionConfig:
    layers: int = 3
    hidden_width: Optional[int] = None  # None: same as encoder output channels
    output_dim: int = 128
    attach_layer: int = 1

    def validate(self) -> None:
        if self.layers < 1:
            raise ArchitectureError("projection head needs at least one layer")
        if not 0 <= self.attach_layer < self.layers:
            raise ArchitectureError(f"attach_layer must lie in [0, {self.layers}), got {self.attach_layer}")


@dataclass
class AtrousConfig:
    dilation_rates: tuple[int, ...] = (6, 12, 18)
    filters_per_branch: int = 256
    kernel_size: int = 3
    num_classes: int = 6
    output_size: tuple[int, int] = (512, 512)

    def __post_init__(self):
        self.dilation_rates = tuple(int(d) for d in self.dilation_rates)
        self.output_size = tuple(int(s) for s in self.output_size)

    def validate(self) -> None:
        if len(self.dilation_rates) != 3:
            raise ArchitectureError(f"atrous block expects 3 dilation rates, got {self.dilation_rates}")
        if self.kernel_size % 2 == 0:
            raise ArchitectureError("atrous kernel_size must be odd")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    atrous: AtrousConfig = field(default_factory=AtrousConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(EncoderConfig(**d.get("encoder", {})), ProjectionConfig(**d.get("projection", {})),
                   AtrousConfig(**d.get("atrous", {})))


# --------------------------------------------------------------------------
# selective kernels
# --------------------------------------------------------------------------

def sk_attention(logits: torch.Tensor) -> torch.Tensor:
    """Softmax across the branch axis (dim 1) of (B, branches, C) logits."""
    return torch.softmax(logits, dim=1)


def sk_fuse(branches: Sequence[torch.Tensor], logits: torch.Tensor) -> torch.Tensor:
    """Channel-wise convex combination of branch outputs.

    ``branches`` are (B, C, H, W) tensors of identical shape; ``logits`` is
    (B, len(branches), C).
    """
    if not branches:
        raise ValueError("need at least one branch")
    shape = branches[0].shape
    for b in branches[1:]:
        if b.shape != shape:
            raise ValueError(f"branch shape mismatch: {tuple(b.shape)} vs {tuple(shape)}")
    if logits.shape != (shape[0], len(branches), shape[1]):
        raise ValueError(f"attention logits shape {tuple(logits.shape)} != {(shape[0], len(branches), shape[1])}")
    w = sk_attention(logits)
    return sum(w[:, i, :, None, None] * b for i, b in enumerate(branches))


class SKConv(nn.Module):
    """Two 3x3 branches (dilation d and 2d) mixed by per-channel softmax attention."""

    def __init__(self, in_ch, out_ch, stride=1, dilation=1, reduction=16, min_dim=32):
        super().__init__()
        self.branches = nn.ModuleList()
        for d in (dilation, 2 * dilation):
            self.branches.append(nn.Sequential(OrderedDict([
                ("conv", nn.Conv2d(in_ch, out_ch, 3, stride, padding=d, dilation=d, bias=False)),
                ("bn", nn.BatchNorm2d(out_ch)),
                ("relu", nn.ReLU(inplace=True)),
            ])))
        mid = max(out_ch // reduction, min_dim)
        self.squeeze = nn.Sequential(OrderedDict([
            ("fc", nn.Linear(out_ch, mid, bias=False)),
            ("bn", nn.BatchNorm1d(mid)),
            ("relu", nn.ReLU(inplace=True)),
        ]))
        self.select = nn.Linear(mid, len(self.branches) * out_ch, bias=False)
        self.out_ch = out_ch

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        pooled = sum(outs).mean(dim=(2, 3))
        logits = self.select(self.squeeze(pooled)).view(x.shape[0], len(outs), self.out_ch)
        return sk_fuse(outs, logits)


# --------------------------------------------------------------------------
# encoder
# --------------------------------------------------------------------------

class Bottleneck(nn.Module):
    def __init__(self, in_ch, width, stride, dilation, cfg: EncoderConfig):
        super().__init__()
        out_ch = width * EXPANSION
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        if cfg.selective_kernels:
            self.conv2 = SKConv(width, width, stride, dilation, cfg.sk_reduction, cfg.sk_min_dim)
            self.bn2 = None
        else:
            self.conv2 = nn.Conv2d(width, width, 3, stride, padding=dilation, dilation=dilation, bias=False)
            self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.conv2(out)
        if self.bn2 is not None:
            out = F.relu(self.bn2(out))
        out = self.bn3(self.conv3(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        stem = cfg.stem_width
        self.stem = nn.Sequential(OrderedDict([
            ("conv", nn.Conv2d(cfg.input_channels, stem, 7, 2, padding=3, bias=False)),
            ("bn", nn.BatchNorm2d(stem)),
            ("relu", nn.ReLU(inplace=True)),
            ("pool", nn.MaxPool2d(3, 2, padding=1)),
        ]))
        in_ch = stem
        for i, (n_blocks, width, (stride, dilation)) in enumerate(
                zip(cfg.stage_blocks, cfg.stage_widths(), cfg.strides_and_dilations())):
            blocks = []
            for j in range(n_blocks):
                blocks.append(Bottleneck(in_ch, width, stride if j == 0 else 1, dilation, cfg))
                in_ch = width * EXPANSION
            self.add_module(f"layer{i + 1}", nn.Sequential(*blocks))
        self.out_channels = in_ch

    def stages(self):
        return [getattr(self, f"layer{i + 1}") for i in range(len(self.cfg.stage_blocks))]

    def forward(self, x):
        x = self.stem(x)
        for stage in self.stages():
            x = stage(x)
        return x


# --------------------------------------------------------------------------
# heads
# --------------------------------------------------------------------------

class ProjectionHead(nn.Module):
    """MLP g(.); every layer but the last ends in ReLU."""

    def __init__(self, in_ch: int, cfg: ProjectionConfig):
        super().__init__()
        cfg.validate()
        hidden = cfg.hidden_width or in_ch
        self.layers = nn.ModuleList()
        for i in range(cfg.layers):
            last = i == cfg.layers - 1
            d_in = in_ch if i == 0 else hidden
            d_out = cfg.output_dim if last else hidden
            mods = OrderedDict([("fc", nn.Linear(d_in, d_out, bias=False)), ("bn", nn.BatchNorm1d(d_out))])
            if not last:
                mods["relu"] = nn.ReLU(inplace=True)
            self.layers.append(nn.Sequential(mods))
        self.cfg = cfg

    def width_after(self, k: int, in_ch: int) -> int:
        return in_ch if k == 0 else self.layers[k - 1].fc.out_features

    def forward(self, x, upto: Optional[int] = None):
        for layer in self.layers[: upto if upto is not None else len(self.layers)]:
            x = layer(x)
        return x

    def forward_spatial(self, x, upto: int):
        """Apply the first ``upto`` layers at every spatial location of an NCHW map."""
        if upto == 0:
            return x
        b, c, h, w = x.shape
        flat = x.permute(0, 2, 3, 1).reshape(b * h * w, c)
        flat = self.forward(flat, upto)
        return flat.view(b, h, w, -1).permute(0, 3, 1, 2)


class AtrousHead(nn.Module):
    """Three parallel dilated convs -> concat -> bilinear resize -> 1x1 conv."""

    def __init__(self, in_ch: int, cfg: AtrousConfig):
        super().__init__()
        cfg.validate()
        k = cfg.kernel_size
        self.branches = nn.ModuleList(
            nn.Conv2d(in_ch, cfg.filters_per_branch, k, padding=d * (k - 1) // 2, dilation=d)
            for d in cfg.dilation_rates)
        self.classifier = nn.Conv2d(len(cfg.dilation_rates) * cfg.filters_per_branch, cfg.num_classes, 1)
        self.cfg = cfg

    def forward(self, x, output_size: Optional[tuple[int, int]] = None):
        size = tuple(output_size or self.cfg.output_size)
        x = torch.cat([F.relu(b(x)) for b in self.branches], dim=1)
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return self.classifier(x)


class SegModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder)
        enc_ch = self.encoder.out_channels
        self.projection = ProjectionHead(enc_ch, cfg.projection)
        attach = cfg.projection.attach_layer
        self.atrous = AtrousHead(self.projection.width_after(attach, enc_ch), cfg.atrous)

    @property
    def output_stride(self) -> int:
        return self.cfg.encoder.output_stride

    def parameter_table(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict(self.named_parameters())

    def features(self, x):
        s = self.output_stride
        if x.shape[-2] % s or x.shape[-1] % s:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible by output stride {s}")
        return self.encoder(x)

    def embed(self, x):
        """Unit-norm projection embeddings for NCHW images."""
        return normalize_rows(self.projection(self.features(x).mean(dim=(2, 3))))

    def segment(self, x, output_size: Optional[tuple[int, int]] = None):
        """NCHW images -> NCHW logits at ``output_size`` (default: input size)."""
        feats = self.features(x)
        feats = self.projection.forward_spatial(feats, self.cfg.projection.attach_layer)
        return self.atrous(feats, output_size or tuple(x.shape[-2:]))

    forward = segment


# --------------------------------------------------------------------------
# construction and functional API
# --------------------------------------------------------------------------

def _init_weights(model: nn.Module, zero_init_residual: bool) -> None:
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    if zero_init_residual:
        for m in model.modules():
            if isinstance(m, Bottleneck):
                nn.init.zeros_(m.bn3.weight)


def build_model(cfg: Optional[ModelConfig] = None, seed: int = 0, device=None) -> SegModel:
    """Construct a SegModel with a deterministic fan-in-scaled initialization.

    The model is returned in inference mode; training loops switch it to
    ``train()`` themselves.

    Pass ``device="meta"`` to build full-size models for parameter accounting
    without allocating weights.
    """
    cfg = cfg or ModelConfig()
    for part in (cfg.encoder, cfg.projection, cfg.atrous):
        part.validate()
    with torch.device(device or "cpu"):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = SegModel(cfg)
            _init_weights(model, cfg.encoder.zero_init_residual)
    return model.eval()


def normalize_rows(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True)
    if x.device.type != "meta" and bool((norms <= eps).any()):
        raise ValueError("degenerate embedding: zero vector cannot be normalized")
    return x / norms


def _nhwc_to_nchw(x):
    if x.ndim != 4:
        raise ValueError(f"expected (B, H, W, C) tensor, got shape {tuple(x.shape)}")
    return x.permute(0, 3, 1, 2)


def encoder_forward(model: SegModel, batch: torch.Tensor) -> torch.Tensor:
    """(B, H, W, 3) images -> (B, H/s, W/s, C) features."""
    return model.features(_nhwc_to_nchw(batch)).permute(0, 2, 3, 1)


def projection_forward(model: SegModel, features: torch.Tensor) -> torch.Tensor:
    """Encoder features ((B, h, w, C) map or (B, C) pooled) -> unit-norm embeddings."""
    if features.ndim == 4:
        features = features.mean(dim=(1, 2))
    return normalize_rows(model.projection(features))


def atrous_forward(model: SegModel, features: torch.Tensor,
                   output_size: Optional[tuple[int, int]] = None) -> torch.Tensor:
    """(B, h, w, C) encoder features -> (B, H, W, num_classes) logits."""
    size = tuple(output_size or model.cfg.atrous.output_size)
    feats = _nhwc_to_nchw(features)
    feats = model.projection.forward_spatial(feats, model.cfg.projection.attach_layer)
    return model.atrous(feats, size).permute(0, 2, 3, 1)


def segment_nhwc(model: SegModel, images: torch.Tensor) -> torch.Tensor:
    return model.segment(_nhwc_to_nchw(images)).permute(0, 2, 3, 1)


# --------------------------------------------------------------------------
# parameter accounting
# --------------------------------------------------------------------------

REFERENCE_PARAMETER_COUNT = 171_172_160


def _count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_breakdown(model: SegModel) -> "OrderedDict[str, int]":
    rows: "OrderedDict[str, int]" = OrderedDict()
    rows["encoder.stem"] = _count(model.encoder.stem)
    for i, stage in enumerate(model.encoder.stages()):
        rows[f"encoder.layer{i + 1}"] = _count(stage)
    for i, layer in enumerate(model.projection.layers):
        rows[f"projection.layer{i}"] = _count(layer)
    rows["atrous.branches"] = _count(model.atrous.branches)
    rows["atrous.classifier"] = _count(model.atrous.classifier)
    return rows


def parameter_report(model: SegModel, reference: int = REFERENCE_PARAMETER_COUNT) -> str:
    """Plain-text table of parameter counts with totals compared to ``reference``."""
    rows = parameter_breakdown(model)
    enc = sum(v for k, v in rows.items() if k.startswith("encoder."))
    head = rows["atrous.branches"] + rows["atrous.classifier"]
    attach = model.cfg.projection.attach_layer
    prefix = sum(rows[f"projection.layer{i}"] for i in range(attach))
    totals = OrderedDict([
        ("encoder", enc),
        ("encoder + atrous head", enc + head),
        (f"segmentation graph (encoder + projection[:{attach}] + atrous)", enc + prefix + head),
        ("all parameters (incl. full projection head)", _count(model)),
    ])
    width = max(len(k) for k in list(rows) + list(totals)) + 2
    lines = [f"{'component':<{width}}{'parameters':>14}", "-" * (width + 14)]
    lines += [f"{k:<{width}}{v:>14,}" for k, v in rows.items()]
    lines.append("-" * (width + 14))
    for k, v in totals.items():
        delta = v - reference
        lines.append(f"{k:<{width}}{v:>14,}   delta vs {reference:,}: {delta:+,} ({100 * delta / reference:+.2f}%)")
    return "\n".join(lines)


def total_parameters(model: nn.Module) -> int:
    return _count(model)


def config_channel_table(cfg: EncoderConfig) -> list[int]:
    """Output channels of stem and each stage, computed from config alone."""
    return [cfg.stem_width] + [w * EXPANSION for w in cfg.stage_widths()]
