"""Backbone -> neck -> head detector with an optional auxiliary (PGI) branch.

Raw prediction layout, per head stride ``s``: a tensor of shape
``(batch, 5 + C [+ 4 * dfl_bins], input_size / s, input_size / s)`` whose
channels are ``box(4) | objectness(1) | class logits(C) | dfl logits``. One
predictor per grid cell. The box channels are logits: the cell-relative center
offset is ``sigmoid(tx)``, ``sigmoid(ty)`` and the image-normalized size is
``sigmoid(tw) ** 2``, ``sigmoid(th) ** 2``.
"""

from __future__ import annotations

import copy
import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from goelan.blocks import ADown, BlockKind, BlockSpec, CBLinear, ConvBNAct, GoELAN, SPPELAN, cb_fuse, make_block
from goelan.config import ConfigError, ModelConfig

RawPrediction = list[Tensor]

OBJ_PRIOR = 0.01


def backbone_specs(cfg: ModelConfig) -> list[BlockSpec]:
    """Layer table of the main backbone, P1/2 through SPPELAN at P5/32."""
    c1, c2 = cfg.stem_widths
    e2, e3, e4, e5 = cfg.stage_widths
    w2, w3, w4, w5 = (list(w) for w in cfg.elan_widths)
    return [
        BlockSpec(BlockKind.CONV, c1, 3, 2, name="P1/2 conv"),
        BlockSpec(BlockKind.CONV, c2, 3, 2, name="P2/4 conv"),
        BlockSpec(BlockKind.GOELAN, e2, internal_widths=w2, name="P2 ELAN-1"),
        BlockSpec(BlockKind.ADOWN, e2, name="P3/8 ADown"),
        BlockSpec(BlockKind.GOELAN, e3, internal_widths=w3, name="P3 ELAN-2"),
        BlockSpec(BlockKind.ADOWN, e3, name="P4/16 ADown"),
        BlockSpec(BlockKind.GOELAN, e4, internal_widths=w4, name="P4 ELAN-2"),
        BlockSpec(BlockKind.ADOWN, e4, name="P5/32 ADown"),
        BlockSpec(BlockKind.GOELAN, e5, internal_widths=w5, name="P5 ELAN-2"),
        BlockSpec(BlockKind.SPPELAN, e5, pool_sizes=list(cfg.pool_sizes), name="SPPELAN"),
    ]


# indices of backbone_specs outputs that feed the neck (P3, P4, P5)
BACKBONE_TAPS = (4, 6, 9)


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers = []
        ch = 3
        for spec in backbone_specs(cfg):
            layers.append(make_block(spec, ch))
            ch = spec.out_channels
        self.layers = nn.ModuleList(layers)

    def forward(self, x: Tensor) -> list[Tensor]:
        taps = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in BACKBONE_TAPS:
                taps.append(x)
        return taps


def _elan(cin: int, cout: int, name: str) -> GoELAN:
    width = max(2, cout // 4)
    return GoELAN(cin, cout, [width, width], name=name)


class Neck(nn.Module):
    """PAN aggregation: top-down to stride 8, then bottom-up back to stride 32."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        _, e3, e4, e5 = cfg.stage_widths
        n4, n3, m4, m5 = cfg.neck_widths
        self.td4 = _elan(e5 + e4, n4, "neck td P4")
        self.td3 = _elan(n4 + e3, n3, "neck td P3")
        self.down3 = ADown(n3, n3, name="neck ADown P3->P4")
        self.bu4 = _elan(n3 + n4, m4, "neck bu P4")
        self.down4 = ADown(m4, m4, name="neck ADown P4->P5")
        self.bu5 = _elan(m4 + e5, m5, "neck bu P5")
        self.out_channels = (n3, m4, m5)

    def forward(self, feats: Sequence[Tensor]) -> list[Tensor]:
        p3, p4, p5 = feats
        n4 = self.td4(torch.cat([_upsample_to(p5, p4), p4], 1))
        n3 = self.td3(torch.cat([_upsample_to(n4, p3), p3], 1))
        m4 = self.bu4(torch.cat([self.down3(n3), n4], 1))
        m5 = self.bu5(torch.cat([self.down4(m4), p5], 1))
        return [n3, m4, m5]


def _upsample_to(x: Tensor, ref: Tensor) -> Tensor:
    return F.interpolate(x, size=ref.shape[2:], mode="nearest")


class DetectHead(nn.Module):
    """Decoupled per-scale head: a box branch and an objectness+class branch."""

    def __init__(self, in_channels: Sequence[int], class_count: int, width: int, dfl_bins: int = 0):
        super().__init__()
        self.class_count = class_count
        self.dfl_bins = dfl_bins
        box_out = 4 + 4 * dfl_bins
        cls_width = max(width, class_count)
        self.box_branches = nn.ModuleList(
            nn.Sequential(ConvBNAct(c, width, 3), ConvBNAct(width, width, 3), nn.Conv2d(width, box_out, 1))
            for c in in_channels
        )
        self.cls_branches = nn.ModuleList(
            nn.Sequential(ConvBNAct(c, cls_width, 3), ConvBNAct(cls_width, cls_width, 3), nn.Conv2d(cls_width, 1 + class_count, 1))
            for c in in_channels
        )
        self.reset_bias()

    def reset_bias(self) -> None:
        for branch in self.cls_branches:
            last = branch[-1]
            nn.init.zeros_(last.bias)
            with torch.no_grad():
                last.bias[0] = -math.log((1 - OBJ_PRIOR) / OBJ_PRIOR)

    def forward(self, feats: Sequence[Tensor]) -> RawPrediction:
        outs = []
        for x, box_branch, cls_branch in zip(feats, self.box_branches, self.cls_branches):
            box = box_branch(x)
            cls = cls_branch(x)
            parts = [box[:, :4], cls]
            if self.dfl_bins:
                parts.append(box[:, 4:])
            outs.append(torch.cat(parts, 1))
        return outs


class AuxiliaryBranch(nn.Module):
    """Training-only branch fed by the image and by CBLinear taps on the main backbone.

    Its own stem mirrors the backbone at reduced width. At strides 8, 16 and 32
    the main backbone features are projected (CBLinear) and summed in (CBFuse),
    so auxiliary losses send gradients into the main backbone. Auxiliary heads
    predict at the same three strides as the main head.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        a1, a2 = cfg.aux_stem_widths
        s2, s3, s4, s5 = cfg.aux_stage_widths
        w2, w3, w4, w5 = (list(w) for w in cfg.aux_elan_widths)
        _, e3, e4, e5 = cfg.stage_widths
        self.stem = nn.Sequential(
            ConvBNAct(3, a1, 3, 2, name="aux P1/2 conv"),
            ConvBNAct(a1, a2, 3, 2, name="aux P2/4 conv"),
            GoELAN(a2, s2, w2, name="aux P2 ELAN"),
        )
        self.cb3 = CBLinear(e3, [s2], name="aux CBLinear P3")
        self.cb4 = CBLinear(e4, [s2, s3], name="aux CBLinear P4")
        self.cb5 = CBLinear(e5, [s2, s3, s4], name="aux CBLinear P5")
        self.down3 = ADown(s2, s2, name="aux ADown P3")
        self.elan3 = GoELAN(s2, s3, w3, name="aux P3 ELAN")
        self.down4 = ADown(s3, s3, name="aux ADown P4")
        self.elan4 = GoELAN(s3, s4, w4, name="aux P4 ELAN")
        self.down5 = ADown(s4, s4, name="aux ADown P5")
        self.elan5 = GoELAN(s4, s5, w5, name="aux P5 ELAN")
        self.head = DetectHead((s3, s4, s5), cfg.class_count, cfg.head_width, cfg.dfl_bins if cfg.dfl_enabled else 0)

    def forward(self, images: Tensor, taps: Sequence[Tensor]) -> RawPrediction:
        p3, p4, p5 = taps
        (t3a,) = self.cb3(p3)
        t4a, t4b = self.cb4(p4)
        t5a, t5b, t5c = self.cb5(p5)
        x = self.stem(images)
        x = cb_fuse([t3a, t4a, t5a], self.down3(x))
        f3 = self.elan3(x)
        x = cb_fuse([t4b, t5b], self.down4(f3))
        f4 = self.elan4(x)
        x = cb_fuse([t5c], self.down5(f4))
        f5 = self.elan5(x)
        return self.head([f3, f4, f5])


class Detector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.backbone = Backbone(cfg)
        self.neck = Neck(cfg)
        dfl = cfg.dfl_bins if cfg.dfl_enabled else 0
        self.head = DetectHead(self.neck.out_channels, cfg.class_count, cfg.head_width, dfl)
        self.aux_branch = AuxiliaryBranch(cfg) if cfg.aux_enabled else None

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(self.config.head_strides)

    def check_input(self, images: Tensor) -> None:
        s = self.config.input_size
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[2] != s or images.shape[3] != s:
            raise ValueError(f"expected images of shape (B, 3, {s}, {s}), got {tuple(images.shape)}")

    def forward(self, images: Tensor) -> tuple[RawPrediction, RawPrediction]:
        self.check_input(images)
        taps = self.backbone(images)
        main = self.head(self.neck(taps))
        aux = self.aux_branch(images, taps) if self.aux_branch is not None else []
        return main, aux

    def infer(self, images: Tensor) -> RawPrediction:
        self.check_input(images)
        return self.head(self.neck(self.backbone(images)))


def build_model(config: ModelConfig) -> Detector:
    config.validate()
    dtype = torch.float64 if config.double_precision else torch.float32
    return Detector(config).to(dtype)


def forward_train(model: Detector, images: Tensor) -> tuple[RawPrediction, RawPrediction]:
    return model(images)


@torch.no_grad()
def forward_infer(model: Detector, images: Tensor) -> RawPrediction:
    """Main-branch inference with batch-norm running statistics."""
    was_training = model.training
    model.eval()
    try:
        return model.infer(images)
    finally:
        model.train(was_training)


def strip_auxiliary(model: Detector) -> Detector:
    """Return a copy without the auxiliary branch; the input model is untouched."""
    stripped = copy.deepcopy(model)
    stripped.aux_branch = None
    stripped.config = stripped.config.replace(aux_enabled=False)
    return stripped


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def conv_flops(conv: nn.Conv2d, out_h: int, out_w: int) -> int:
    """2 FLOPs per multiply-accumulate; bias adds are not counted."""
    kh, kw = conv.kernel_size
    macs = kh * kw * (conv.in_channels // conv.groups) * conv.out_channels * out_h * out_w
    return 2 * macs


def estimate_flops(model: nn.Module, input_size: int, batch: int = 1) -> float:
    """FLOPs of one forward pass, counting convolutions only (MAC = 2 FLOPs).

    Runs the model on the ``meta`` device so no arithmetic happens. The count
    covers everything the model's ``forward`` executes, which for a
    :class:`Detector` includes the auxiliary branch when present.
    """
    if input_size <= 0:
        raise ConfigError(f"input_size must be positive, got {input_size}")
    meta_model = copy.deepcopy(model).to("meta")
    if isinstance(meta_model, Detector):
        meta_model.config = meta_model.config.replace(input_size=input_size)
    total = 0

    def hook(module: nn.Conv2d, inputs, output):
        nonlocal total
        total += conv_flops(module, output.shape[2], output.shape[3]) * output.shape[0] // batch

    handles = [m.register_forward_hook(hook) for m in meta_model.modules() if isinstance(m, nn.Conv2d)]
    try:
        dtype = next(meta_model.parameters()).dtype
        in_ch = 3
        for m in meta_model.modules():
            if isinstance(m, nn.Conv2d):
                in_ch = m.in_channels
                break
        x = torch.empty(batch, in_ch, input_size, input_size, device="meta", dtype=dtype)
        meta_model(x)
    finally:
        for h in handles:
            h.remove()
    return float(total)


def layer_table(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    """(name, output channels, output stride) for each backbone layer."""
    rows = []
    stride = 1
    for spec in backbone_specs(cfg):
        stride *= spec.stride if spec.kind is BlockKind.CONV else (2 if spec.kind is BlockKind.ADOWN else 1)
        rows.append((spec.name, spec.out_channels, stride))
    return rows
