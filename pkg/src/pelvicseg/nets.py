"""Network builders: 2D localizer, per-organ 3D encoder-decoders with
structure-specific block families, the anatomy-guided multi-task target
network, and a seeded DropBlock layer for Monte-Carlo sampling.

Forward passes are deterministic unless DropBlock is switched to stochastic
mode, in which case equal rng states give bit-identical outputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .volcore import StructureId


class BlockKind(str, Enum):
    PlainConv = "plain_conv"
    Residual = "residual"
    GroupedResidual = "grouped_residual"
    MultiBranch = "multi_branch"
    SqueezeExcite = "squeeze_excite"


ORGAN_BLOCKS: dict[StructureId, tuple[BlockKind, ...]] = {
    StructureId.Bladder: (BlockKind.GroupedResidual,),
    StructureId.FemoralHeadL: (BlockKind.GroupedResidual,),
    StructureId.FemoralHeadR: (BlockKind.GroupedResidual,),
    StructureId.Rectum: (BlockKind.Residual, BlockKind.MultiBranch),  # alternating
    StructureId.PenileBulb: (BlockKind.SqueezeExcite,),
}


@dataclass
class DropBlockConfig:
    keep_prob: float = 0.9
    block_size_2d: int = 5
    block_size_3d: int = 3


@dataclass
class NetConfig:
    kind: str  # localizer2d | organ3d | agmtn
    in_channels: int = 1
    out_channels: int = 1
    depth: int = 4
    base_width: int = 16
    encoder_blocks: tuple[str, ...] = (BlockKind.PlainConv.value,)
    dropblock: DropBlockConfig = field(default_factory=DropBlockConfig)
    anatomy_guided: bool = False
    multi_task: bool = False
    structure: str | None = None

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "depth": self.depth,
            "base_width": self.base_width,
            "encoder_blocks": list(self.encoder_blocks),
            "dropblock": {
                "keep_prob": self.dropblock.keep_prob,
                "block_size_2d": self.dropblock.block_size_2d,
                "block_size_3d": self.dropblock.block_size_3d,
            },
            "anatomy_guided": self.anatomy_guided,
            "multi_task": self.multi_task,
            "structure": self.structure,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        db = d.get("dropblock", {})
        return cls(
            kind=d["kind"],
            in_channels=d["in_channels"],
            out_channels=d["out_channels"],
            depth=d["depth"],
            base_width=d["base_width"],
            encoder_blocks=tuple(d["encoder_blocks"]),
            dropblock=DropBlockConfig(**db) if db else DropBlockConfig(),
            anatomy_guided=d.get("anatomy_guided", False),
            multi_task=d.get("multi_task", False),
            structure=d.get("structure"),
        )


def config_hash(cfg: NetConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


# --- DropBlock --------------------------------------------------------------


def dropblock(x: torch.Tensor, keep_prob: float, block_size: int, mode: str = "stochastic",
              generator: torch.Generator | None = None) -> torch.Tensor:
    """Zero contiguous spatial blocks; survivors are rescaled so the expected
    activation sum is preserved. `mode="off"` or keep_prob >= 1 is identity."""
    if mode == "off" or keep_prob >= 1.0:
        return x
    spatial = x.shape[2:]
    if block_size % 2 != 1 or block_size > min(spatial):
        raise ValueError(f"block_size {block_size} invalid for feature map {tuple(spatial)}")
    d = len(spatial)
    valid = [s - block_size + 1 for s in spatial]
    feat_prod = float(np.prod(spatial))
    valid_prod = float(np.prod(valid))
    gamma = (1.0 - keep_prob) / (block_size**d) * feat_prod / valid_prod

    seeds = torch.rand((x.shape[0], x.shape[1], *valid), generator=generator, device=x.device)
    centers = (seeds < gamma).to(x.dtype)
    pad = block_size // 2
    centers = F.pad(centers, (pad, pad) * d)
    pool = F.max_pool2d if d == 2 else F.max_pool3d
    block_mask = pool(centers, kernel_size=block_size, stride=1, padding=pad)
    kept = 1.0 - block_mask
    n_kept = kept.sum()
    if n_kept == 0:
        return torch.zeros_like(x)
    return x * kept * (kept.numel() / n_kept)


class DropBlock(nn.Module):
    """Layer form with an owned generator; mode and seed are set externally
    (set_stochastic) so repeated sampling is reproducible per rng state."""

    def __init__(self, keep_prob: float, block_size: int):
        super().__init__()
        self.keep_prob = keep_prob
        self.block_size = block_size
        self.mode = "off"
        self.generator = torch.Generator(device="cpu")

    def forward(self, x):
        return dropblock(x, self.keep_prob, self.block_size, self.mode, self.generator)


def set_stochastic(model: nn.Module, stochastic: bool, rng_state: int = 0):
    """Flip every DropBlock layer; per-layer seeds derive from rng_state."""
    layers = [m for m in model.modules() if isinstance(m, DropBlock)]
    if stochastic and not layers:
        raise ValueError("model has no stochastic layers")
    for i, layer in enumerate(layers):
        layer.mode = "stochastic" if stochastic else "off"
        layer.generator.manual_seed((int(rng_state) * 1000003 + i * 7919) % (2**63 - 1))


# --- blocks -----------------------------------------------------------------


def _conv_nd(dim):
    return nn.Conv2d if dim == 2 else nn.Conv3d


def _norm_nd(dim, ch):
    return nn.BatchNorm2d(ch) if dim == 2 else nn.InstanceNorm3d(ch, affine=True)


class ConvNormAct(nn.Module):
    def __init__(self, dim, cin, cout, k=3, groups=1):
        super().__init__()
        self.conv = _conv_nd(dim)(cin, cout, k, padding=k // 2, groups=groups, bias=False)
        self.norm = _norm_nd(dim, cout)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class PlainConvBlock(nn.Module):
    kind = BlockKind.PlainConv

    def __init__(self, dim, cin, cout):
        super().__init__()
        self.body = nn.Sequential(ConvNormAct(dim, cin, cout), ConvNormAct(dim, cout, cout))

    def forward(self, x):
        return self.body(x)


class ResidualBlock(nn.Module):
    kind = BlockKind.Residual

    def __init__(self, dim, cin, cout):
        super().__init__()
        conv = _conv_nd(dim)
        self.conv1 = ConvNormAct(dim, cin, cout)
        self.conv2 = conv(cout, cout, 3, padding=1, bias=False)
        self.norm2 = _norm_nd(dim, cout)
        self.proj = conv(cin, cout, 1, bias=False) if cin != cout else nn.Identity()
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        y = self.norm2(self.conv2(self.conv1(x)))
        return self.act(y + self.proj(x))


class GroupedResidualBlock(nn.Module):
    """Aggregated-transform residual unit: 1x1 reduce, grouped 3x3
    (cardinality 8), 1x1 expand, identity shortcut."""

    kind = BlockKind.GroupedResidual
    cardinality = 8

    def __init__(self, dim, cin, cout):
        super().__init__()
        conv = _conv_nd(dim)
        mid = max(self.cardinality, cout // 2)
        self.reduce = ConvNormAct(dim, cin, mid, k=1)
        self.grouped = ConvNormAct(dim, mid, mid, k=3, groups=self.cardinality)
        self.expand = conv(mid, cout, 1, bias=False)
        self.norm = _norm_nd(dim, cout)
        self.proj = conv(cin, cout, 1, bias=False) if cin != cout else nn.Identity()
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        y = self.norm(self.expand(self.grouped(self.reduce(x))))
        return self.act(y + self.proj(x))


class MultiBranchBlock(nn.Module):
    """Four parallel paths (1x1, 3x3, factorized 5x5, pooled 1x1) whose
    concatenation restores the stage width."""

    kind = BlockKind.MultiBranch

    def __init__(self, dim, cin, cout):
        super().__init__()
        if cout % 4:
            raise ValueError("multi-branch width must divide by 4")
        b = cout // 4
        self.b1 = ConvNormAct(dim, cin, b, k=1)
        self.b3 = nn.Sequential(ConvNormAct(dim, cin, b, k=1), ConvNormAct(dim, b, b, k=3))
        self.b5 = nn.Sequential(
            ConvNormAct(dim, cin, b, k=1), ConvNormAct(dim, b, b, k=3), ConvNormAct(dim, b, b, k=3)
        )
        pool = nn.MaxPool2d if dim == 2 else nn.MaxPool3d
        self.bp = nn.Sequential(pool(3, stride=1, padding=1), ConvNormAct(dim, cin, b, k=1))

    def forward(self, x):
        return torch.cat([self.b1(x), self.b3(x), self.b5(x), self.bp(x)], dim=1)


class SqueezeExciteBlock(nn.Module):
    """Double conv followed by channel recalibration (reduction ratio 8)."""

    kind = BlockKind.SqueezeExcite
    reduction = 8

    def __init__(self, dim, cin, cout):
        super().__init__()
        self.body = PlainConvBlock(dim, cin, cout)
        hidden = max(1, cout // self.reduction)
        self.fc1 = nn.Linear(cout, hidden)
        self.fc2 = nn.Linear(hidden, cout)

    def forward(self, x):
        y = self.body(x)
        s = y.mean(dim=tuple(range(2, y.ndim)))
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return y * s.reshape(*s.shape, *([1] * (y.ndim - 2)))


_BLOCKS = {
    BlockKind.PlainConv: PlainConvBlock,
    BlockKind.Residual: ResidualBlock,
    BlockKind.GroupedResidual: GroupedResidualBlock,
    BlockKind.MultiBranch: MultiBranchBlock,
    BlockKind.SqueezeExcite: SqueezeExciteBlock,
}


def _make_block(dim, kind: BlockKind, cin, cout) -> nn.Module:
    return _BLOCKS[kind](dim, cin, cout)


# --- encoder/decoder scaffolding ---------------------------------------------


class Encoder(nn.Module):
    def __init__(self, dim, in_ch, base, depth, kinds: tuple[BlockKind, ...]):
        super().__init__()
        self.stages = nn.ModuleList()
        self.manifest: list[tuple[str, str]] = []
        ch = in_ch
        w = base
        for d in range(depth):
            kind = kinds[d % len(kinds)]
            self.stages.append(_make_block(dim, kind, ch, w))
            self.manifest.append((f"enc{d}", kind.value))
            ch, w = w, w * 2
        self.bottleneck = _make_block(dim, kinds[depth % len(kinds)], ch, w)
        self.manifest.append(("bottleneck", kinds[depth % len(kinds)].value))
        self.pool = (nn.MaxPool2d if dim == 2 else nn.MaxPool3d)(2)
        self.out_width = w

    def forward(self, x):
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
            x = self.pool(x)
        return self.bottleneck(x), skips


class Decoder(nn.Module):
    """Plain-conv decoding path with DropBlock after each stage; optionally
    reports the two deepest stage outputs for deep supervision."""

    def __init__(self, dim, bottom_width, depth, dropblock_cfg: DropBlockConfig):
        super().__init__()
        upconv = nn.ConvTranspose2d if dim == 2 else nn.ConvTranspose3d
        bs = dropblock_cfg.block_size_2d if dim == 2 else dropblock_cfg.block_size_3d
        self.ups = nn.ModuleList()
        self.stages = nn.ModuleList()
        self.drops = nn.ModuleList()
        w = bottom_width
        self.widths = []
        for _ in range(depth):
            self.ups.append(upconv(w, w // 2, 2, stride=2))
            self.stages.append(PlainConvBlock(dim, w, w // 2))
            self.drops.append(DropBlock(dropblock_cfg.keep_prob, bs))
            w //= 2
            self.widths.append(w)

    def forward(self, x, skips):
        feats = []
        for up, stage, drop, skip in zip(self.ups, self.stages, self.drops, reversed(skips)):
            x = up(x)
            x = stage(torch.cat([x, skip], dim=1))
            x = drop(x)
            feats.append(x)
        return x, feats


def _zero_bias_head(conv: nn.Module) -> nn.Module:
    nn.init.zeros_(conv.bias)
    return conv


# --- concrete nets -----------------------------------------------------------


class UNet2D(nn.Module):
    """Slice-wise localizer emitting per-structure coarse probability maps."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        kinds = tuple(BlockKind(k) for k in cfg.encoder_blocks)
        self.encoder = Encoder(2, cfg.in_channels, cfg.base_width, cfg.depth, kinds)
        self.decoder = Decoder(2, self.encoder.out_width, cfg.depth, cfg.dropblock)
        self.head = _zero_bias_head(nn.Conv2d(cfg.base_width, cfg.out_channels, 1))
        self.block_manifest = list(self.encoder.manifest)

    def forward(self, x):
        bottom, skips = self.encoder(x)
        top, _ = self.decoder(bottom, skips)
        return torch.sigmoid(self.head(top))


class UNet3D(nn.Module):
    """Single-structure volumetric segmenter; encoder block family varies by
    structure (grouped-residual / residual+multi-branch / squeeze-excite)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        kinds = tuple(BlockKind(k) for k in cfg.encoder_blocks)
        self.encoder = Encoder(3, cfg.in_channels, cfg.base_width, cfg.depth, kinds)
        self.decoder = Decoder(3, self.encoder.out_width, cfg.depth, cfg.dropblock)
        self.head = _zero_bias_head(nn.Conv3d(cfg.base_width, cfg.out_channels, 1))
        self.block_manifest = list(self.encoder.manifest)

    def forward(self, x):
        bottom, skips = self.encoder(x)
        top, _ = self.decoder(bottom, skips)
        return torch.sigmoid(self.head(top))


@dataclass
class AgmtnOutputs:
    """All grids share the input VOI shape after upsampling."""

    main_seg: object
    aux_seg_1: object
    aux_seg_2: object
    dist: object | None


class AgmtnNet(nn.Module):
    """Shared encoder with two structurally similar decoders: segmentation
    (always, with deep-supervision taps at the two deepest stages) and
    distance regression (iff multi_task). anatomy_guided only changes the
    input channel count; (False, False) reduces to a plain 3D U-Net."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.anatomy_guided = cfg.anatomy_guided
        self.multi_task = cfg.multi_task
        kinds = tuple(BlockKind(k) for k in cfg.encoder_blocks)
        self.encoder = Encoder(3, cfg.in_channels, cfg.base_width, cfg.depth, kinds)
        self.seg_decoder = Decoder(3, self.encoder.out_width, cfg.depth, cfg.dropblock)
        self.seg_head = _zero_bias_head(nn.Conv3d(cfg.base_width, 1, 1))
        # deep supervision: taps at the two deepest decoder stages
        self.aux_head_1 = _zero_bias_head(nn.Conv3d(self.seg_decoder.widths[0], 1, 1))
        self.aux_head_2 = _zero_bias_head(nn.Conv3d(self.seg_decoder.widths[1], 1, 1))
        if cfg.multi_task:
            self.dist_decoder = Decoder(3, self.encoder.out_width, cfg.depth, cfg.dropblock)
            self.dist_head = _zero_bias_head(nn.Conv3d(cfg.base_width, 1, 1))
        self.block_manifest = list(self.encoder.manifest)

    def forward(self, x) -> AgmtnOutputs:
        full_size = x.shape[2:]
        bottom, skips = self.encoder(x)
        seg_top, seg_feats = self.seg_decoder(bottom, skips)
        main = torch.sigmoid(self.seg_head(seg_top))
        aux1 = torch.sigmoid(
            F.interpolate(self.aux_head_1(seg_feats[0]), size=full_size, mode="trilinear", align_corners=False)
        )
        aux2 = torch.sigmoid(
            F.interpolate(self.aux_head_2(seg_feats[1]), size=full_size, mode="trilinear", align_corners=False)
        )
        dist = None
        if self.multi_task:
            dist_top, _ = self.dist_decoder(bottom, skips)
            dist = self.dist_head(dist_top)
        return AgmtnOutputs(main, aux1, aux2, dist)


# --- builders ----------------------------------------------------------------


def build_localizer(dropblock_cfg: DropBlockConfig | None = None) -> UNet2D:
    """2D encoder-decoder over one CT slice, five sigmoid channels
    (target, bladder, rectum, merged femoral heads, penile bulb)."""
    cfg = NetConfig(
        kind="localizer2d",
        in_channels=1,
        out_channels=5,
        base_width=32,
        encoder_blocks=(BlockKind.PlainConv.value,),
        dropblock=dropblock_cfg or DropBlockConfig(),
    )
    return UNet2D(cfg)


def build_organ_net(structure: StructureId, dropblock_cfg: DropBlockConfig | None = None) -> UNet3D:
    if structure is StructureId.CTV:
        raise ValueError("the target volume uses build_agmtn, not a per-organ net")
    kinds = ORGAN_BLOCKS[structure]
    cfg = NetConfig(
        kind="organ3d",
        in_channels=1,
        out_channels=1,
        base_width=16,
        encoder_blocks=tuple(k.value for k in kinds),
        dropblock=dropblock_cfg or DropBlockConfig(),
        structure=structure.value,
    )
    return UNet3D(cfg)


def build_agmtn(
    anatomy_guided: bool, multi_task: bool, dropblock_cfg: DropBlockConfig | None = None
) -> AgmtnNet:
    cfg = NetConfig(
        kind="agmtn",
        in_channels=3 if anatomy_guided else 1,
        out_channels=1,
        base_width=16,
        encoder_blocks=(BlockKind.PlainConv.value,),
        dropblock=dropblock_cfg or DropBlockConfig(),
        anatomy_guided=anatomy_guided,
        multi_task=multi_task,
        structure=StructureId.CTV.value,
    )
    return AgmtnNet(cfg)


def build_from_config(cfg: NetConfig) -> nn.Module:
    if cfg.kind == "localizer2d":
        return UNet2D(cfg)
    if cfg.kind == "organ3d":
        return UNet3D(cfg)
    if cfg.kind == "agmtn":
        return AgmtnNet(cfg)
    raise ValueError(f"unknown net kind {cfg.kind!r}")


# --- inference + checkpoints ---------------------------------------------------


def _to_tensor(arr: np.ndarray, dims: int) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    while t.ndim < dims:
        t = t.unsqueeze(0)
    return t


def forward(model: nn.Module, inp: np.ndarray, stochastic: bool = False, rng_state: int = 0):
    """Single-input inference. Deterministic when stochastic is off; equal
    rng states reproduce the same stochastic sample."""
    set_stochastic(model, stochastic, rng_state)
    model.eval()
    with torch.no_grad():
        if isinstance(model, UNet2D):
            t = _to_tensor(inp, 4)
            out = model(t)
            return out[0].numpy()
        if isinstance(model, UNet3D):
            t = _to_tensor(inp, 5)
            return model(t)[0, 0].numpy()
        if isinstance(model, AgmtnNet):
            t = _to_tensor(inp, 5)
            o = model(t)
            return AgmtnOutputs(
                o.main_seg[0, 0].numpy(),
                o.aux_seg_1[0, 0].numpy(),
                o.aux_seg_2[0, 0].numpy(),
                None if o.dist is None else o.dist[0, 0].numpy(),
            )
    raise ValueError(f"unsupported model type {type(model)}")


def save_checkpoint(model: nn.Module, path: str | Path, **extra):
    path = Path(path)
    torch.save(model.state_dict(), path)
    sidecar = {
        "config_hash": config_hash(model.cfg),
        "net_config": model.cfg.to_dict(),
        **extra,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    cfg = NetConfig.from_dict(sidecar["net_config"])
    if config_hash(cfg) != sidecar["config_hash"]:
        raise ValueError(f"checkpoint config hash mismatch for {path}")
    model = build_from_config(cfg)
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model, sidecar
