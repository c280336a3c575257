"""
Vision backbone: patch embedding, VMamba-style blocks with four-direction
cross-scan (SS2D), patch merging between stages, and the two read-outs used by
the report model: the pooled global feature v_G and the sequential tokens v_S.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import InvalidParameterError, StageError
from .ssm_core import SelectiveSSM

logger = logging.getLogger(__name__)


@dataclass
class FeatureMap:
    """A batch of Ĥ x Ŵ x Ĉ grids plus the patch geometry that produced them."""

    grid: torch.Tensor  # (batch, H, W, C)
    patch_size: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.grid.ndim != 4:
            raise InvalidParameterError(f"feature grid must be (batch, H, W, C), got {tuple(self.grid.shape)}")
        if min(self.grid.shape[1:]) < 1:
            raise InvalidParameterError(f"empty feature grid {tuple(self.grid.shape)}")

    @property
    def height(self) -> int:
        return self.grid.shape[1]

    @property
    def width(self) -> int:
        return self.grid.shape[2]

    @property
    def channels(self) -> int:
        return self.grid.shape[3]

    def with_grid(self, grid: torch.Tensor) -> "FeatureMap":
        return replace(self, grid=grid)


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (batch, L, E)

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] < 1:
            raise InvalidParameterError(f"token sequence must be (batch, L>=1, E), got {tuple(self.tokens.shape)}")

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


GLOBAL_STAGES = ("raw", "projected")


@dataclass
class GlobalFeature:
    vector: torch.Tensor  # (batch, C) raw or (batch, E) projected
    stage: str = "raw"

    def __post_init__(self):
        if self.stage not in GLOBAL_STAGES:
            raise StageError(f"unknown feature stage '{self.stage}'")


@dataclass
class BackboneConfig:
    in_chans: int = 1
    image_size: int = 32
    patch_size: int = 4
    dims: Tuple[int, ...] = (16, 32)
    depths: Tuple[int, ...] = (2, 2)
    d_state: int = 4
    expand: int = 2
    d_conv: int = 3
    num_heads: int = 2
    block_kind: str = "vmamba"  # or "attention"
    scan_mode: str = "parallel"

    def __post_init__(self):
        self.dims = tuple(self.dims)
        self.depths = tuple(self.depths)
        if len(self.dims) != len(self.depths) or not self.dims:
            raise InvalidParameterError("dims and depths must be non-empty and of equal length")
        if self.block_kind not in ("vmamba", "attention"):
            raise InvalidParameterError(f"unknown block kind '{self.block_kind}'")
        reduction = self.patch_size * 2 ** (len(self.dims) - 1)
        if self.image_size % reduction != 0:
            raise InvalidParameterError(
                f"image size {self.image_size} is not divisible by the total reduction {reduction}"
            )

    @property
    def out_channels(self) -> int:
        return self.dims[-1]

    @property
    def num_tokens(self) -> int:
        """Length of v_s: cells of the last stage's grid."""
        side = self.image_size // (self.patch_size * 2 ** (len(self.dims) - 1))
        return side * side


# Scale presets. Tiny/small/base follow the usual VMamba widths; miniature is the desk-scale default.
BACKBONE_PRESETS: Dict[str, Dict] = {
    "miniature": dict(patch_size=4, dims=(16, 32), depths=(2, 2), d_state=4),
    "tiny": dict(patch_size=4, dims=(96, 192, 384, 768), depths=(2, 2, 9, 2), d_state=16),
    "small": dict(patch_size=4, dims=(96, 192, 384, 768), depths=(2, 2, 27, 2), d_state=16),
    "base": dict(patch_size=4, dims=(128, 256, 512, 1024), depths=(2, 2, 27, 2), d_state=16),
}


def backbone_config(preset: str = "miniature", **overrides) -> BackboneConfig:
    if preset not in BACKBONE_PRESETS:
        raise InvalidParameterError(f"unknown backbone preset '{preset}'")
    return BackboneConfig(**{**BACKBONE_PRESETS[preset], **overrides})


def patch_embed(image: torch.Tensor, patch: int, proj: nn.Linear) -> FeatureMap:
    """Cut (batch, C, H, W) images into non-overlapping patches and project each one."""
    if image.ndim == 3:
        image = image.unsqueeze(0)
    batch, chans, height, width = image.shape
    if patch < 1 or height % patch or width % patch:
        raise InvalidParameterError(f"image {height}x{width} is not divisible by patch size {patch}")
    patches = image.reshape(batch, chans, height // patch, patch, width // patch, patch)
    patches = patches.permute(0, 2, 4, 1, 3, 5).reshape(batch, height // patch, width // patch, -1)
    return FeatureMap(grid=proj(patches), patch_size=patch, stride=patch)


def cross_scan_orders(height: int, width: int, device=None) -> List[torch.Tensor]:
    """Row-major forward/backward and column-major forward/backward traversals of a grid."""
    rows = torch.arange(height * width, device=device)
    cols = rows.reshape(height, width).t().reshape(-1)
    return [rows, rows.flip(0), cols, cols.flip(0)]


def ss2d_cross_scan(fm: FeatureMap, ssm: SelectiveSSM) -> FeatureMap:
    """Run one selective scan along each of the four traversals and average the results."""
    batch, height, width, chans = fm.grid.shape
    tokens = fm.grid.reshape(batch, height * width, chans)
    orders = cross_scan_orders(height, width, device=tokens.device)
    scanned = ssm(torch.cat([tokens[:, order] for order in orders], dim=0))
    directions = [
        y[:, torch.argsort(order)] for y, order in zip(scanned.split(batch, dim=0), orders)
    ]
    merged = torch.stack(directions).mean(0)
    return fm.with_grid(merged.reshape(batch, height, width, chans))


class VMambaBlock(nn.Module):
    """x + out_proj(LN(SS2D(SiLU(DWConv(Linear(LN(x)))))) * SiLU(gate))."""

    def __init__(self, dim: int, d_state: int = 4, expand: int = 2, d_conv: int = 3, scan_mode: str = "parallel"):
        super().__init__()
        d_inner = expand * dim
        self.dim = dim
        self.norm = nn.LayerNorm(dim)
        self.in_proj = nn.Linear(dim, 2 * d_inner)
        self.conv = nn.Conv2d(d_inner, d_inner, d_conv, padding=d_conv // 2, groups=d_inner)
        self.ssm = SelectiveSSM(d_inner, d_state, scan_mode=scan_mode)
        self.out_norm = nn.LayerNorm(d_inner)
        self.out_proj = nn.Linear(d_inner, dim)

    def forward(self, fm: FeatureMap) -> FeatureMap:
        if fm.channels != self.dim:
            raise InvalidParameterError(f"block expects {self.dim} channels, got {fm.channels}")
        x = fm.grid
        xs, gate = self.in_proj(self.norm(x)).chunk(2, dim=-1)
        xs = self.conv(xs.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        y = ss2d_cross_scan(fm.with_grid(F.silu(xs)), self.ssm).grid
        y = self.out_norm(y) * F.silu(gate)
        return fm.with_grid(x + self.out_proj(y))


class AttentionBlock(nn.Module):
    """Pre-norm global self-attention block used when the state-space backbone is switched off."""

    def __init__(self, dim: int, num_heads: int = 2, mlp_ratio: int = 2):
        super().__init__()
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, fm: FeatureMap) -> FeatureMap:
        if fm.channels != self.dim:
            raise InvalidParameterError(f"block expects {self.dim} channels, got {fm.channels}")
        batch, height, width, chans = fm.grid.shape
        x = fm.grid.reshape(batch, height * width, chans)
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return fm.with_grid(x.reshape(batch, height, width, chans))


class PatchMerging(nn.Module):
    """2x2 neighbourhood merge: halves the grid and maps 4*C_in -> C_out."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * in_dim)
        self.reduction = nn.Linear(4 * in_dim, out_dim, bias=False)

    def forward(self, fm: FeatureMap) -> FeatureMap:
        if fm.height % 2 or fm.width % 2:
            raise InvalidParameterError(f"cannot merge an odd grid {fm.height}x{fm.width}")
        x = fm.grid
        merged = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return FeatureMap(
            grid=self.reduction(self.norm(merged)),
            patch_size=fm.patch_size * 2,
            stride=fm.stride * 2,
        )


def downsample(fm: FeatureMap, merger: PatchMerging) -> FeatureMap:
    return merger(fm)


def global_pool(fm: FeatureMap) -> GlobalFeature:
    """v_G: spatial mean of the grid, one vector per image."""
    return GlobalFeature(vector=fm.grid.mean(dim=(1, 2)), stage="raw")


def sequential_tokens(fm: FeatureMap, proj: nn.Module, norm: nn.Module) -> TokenSequence:
    """v_S = LN(Proj(Flatten(v))) with row-major flattening."""
    batch, height, width, chans = fm.grid.shape
    return TokenSequence(tokens=norm(proj(fm.grid.reshape(batch, height * width, chans))))


class VisionBackbone(nn.Module):
    def __init__(self, config: Optional[BackboneConfig] = None):
        super().__init__()
        self.config = config or BackboneConfig()
        cfg = self.config
        self.patch_proj = nn.Linear(cfg.in_chans * cfg.patch_size**2, cfg.dims[0])
        self.stages = nn.ModuleList()
        self.mergers = nn.ModuleList()
        for i, (dim, depth) in enumerate(zip(cfg.dims, cfg.depths)):
            if i > 0:
                self.mergers.append(PatchMerging(cfg.dims[i - 1], dim))
            self.stages.append(nn.ModuleList([self._make_block(dim) for _ in range(depth)]))
        logger.debug(
            f"VisionBackbone {cfg.block_kind}: dims={cfg.dims} depths={cfg.depths} "
            f"params={sum(p.numel() for p in self.parameters())}"
        )

    def _make_block(self, dim: int) -> nn.Module:
        cfg = self.config
        if cfg.block_kind == "attention":
            return AttentionBlock(dim, num_heads=cfg.num_heads)
        return VMambaBlock(dim, d_state=cfg.d_state, expand=cfg.expand, d_conv=cfg.d_conv, scan_mode=cfg.scan_mode)

    @property
    def out_channels(self) -> int:
        return self.config.out_channels

    def forward(self, images: torch.Tensor) -> FeatureMap:
        fm = patch_embed(images, self.config.patch_size, self.patch_proj)
        for i, blocks in enumerate(self.stages):
            if i > 0:
                fm = downsample(fm, self.mergers[i - 1])
            for block in blocks:
                fm = block(fm)
        return fm
