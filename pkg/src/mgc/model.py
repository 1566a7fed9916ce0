"""Patch-token ViT backbone, projection/prediction heads and the momentum pair."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

# Per-channel statistics of the bundled synthetic generator (see mgc.data.dataset_stats);
# callers training on other data recompute and store their own.
DEFAULT_PIXEL_MEAN = (0.5, 0.5, 0.5)
DEFAULT_PIXEL_STD = (0.25, 0.25, 0.25)


@dataclass
class ViTConfig:
    image_side: int = 224
    patch_size: int = 16
    embed_dim: int = 384
    depth: int = 12
    num_heads: int = 6
    mlp_ratio: float = 4.0
    use_class_token: bool = False
    use_pos_embed: bool = True
    pixel_mean: Tuple[float, float, float] = DEFAULT_PIXEL_MEAN
    pixel_std: Tuple[float, float, float] = DEFAULT_PIXEL_STD

    def __post_init__(self):
        if self.image_side % self.patch_size:
            raise ValueError("image_side must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_size

    @classmethod
    def vit_small(cls, **kw) -> "ViTConfig":
        return cls(embed_dim=384, depth=12, num_heads=6, **kw)

    @classmethod
    def desk(cls, **kw) -> "ViTConfig":
        base = dict(embed_dim=64, depth=4, num_heads=4)
        base.update(kw)
        return cls(**base)


@dataclass
class HeadConfig:
    projector: Tuple[int, ...] = (2048, 2048, 128)
    predictor: Tuple[int, ...] = (2048, 128)

    def __post_init__(self):
        if self.projector[-1] != self.predictor[-1]:
            raise ValueError("projector and predictor must end at the same width")

    @classmethod
    def desk(cls) -> "HeadConfig":
        return cls(projector=(256, 256, 128), predictor=(256, 128))


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def qk(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        return qkv[0], qkv[1], qkv[2]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, C = x.shape
        q, k, v = self.qk(x)
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(B, N, C))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    """ViT returning the patch tokens as a (B, U, V, D) grid."""

    def __init__(self, config: ViTConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        n = config.grid_side
        self.patch_embed = nn.Linear(3 * config.patch_size ** 2, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d)) if config.use_class_token else None
        n_tokens = n * n + (1 if config.use_class_token else 0)
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, d)) if config.use_pos_embed else None
        self.blocks = nn.ModuleList(Block(d, config.num_heads, config.mlp_ratio)
                                    for _ in range(config.depth))
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self.apply(_init_weights)
        if self.pos_embed is not None:
            nn.init.trunc_normal_(self.pos_embed, std=0.02)
        if self.cls_token is not None:
            nn.init.trunc_normal_(self.cls_token, std=0.02)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        B, C, H, W = images.shape
        side, p = self.config.image_side, self.config.patch_size
        if C != 3 or H != side or W != side:
            raise ValueError(f"expected (B, 3, {side}, {side}) input, got {tuple(images.shape)}")
        n = side // p
        x = images.reshape(B, C, n, p, n, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(B, n * n, C * p * p)

    def tokens(self, images: torch.Tensor, upto: Optional[int] = None) -> torch.Tensor:
        x = self.patch_embed(self.patchify(images))
        if self.cls_token is not None:
            x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        if self.pos_embed is not None:
            x = x + self.pos_embed
        for blk in self.blocks[:upto]:
            x = blk(x)
        return x

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.norm(self.tokens(images))
        if self.cls_token is not None:
            x = x[:, 1:]
        n = self.config.grid_side
        return x.reshape(x.shape[0], n, n, -1)

    def last_block_qk(self, images: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Query/key tensors (B, heads, N, d) of the last attention block, patch tokens only."""
        x = self.tokens(images, upto=len(self.blocks) - 1)
        blk = self.blocks[-1]
        q, k, _ = blk.attn.qk(blk.norm1(x))
        if self.cls_token is not None:
            q, k = q[:, :, 1:], k[:, :, 1:]
        return q, k


def encode(backbone: VisionTransformer, images: torch.Tensor) -> torch.Tensor:
    return backbone(images)


def prepare_images(images: Sequence[np.ndarray], config: ViTConfig,
                   dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack H x W x 3 arrays in [0, 1] into a normalized (B, 3, H, W) tensor."""
    x = torch.as_tensor(np.stack(images), dtype=dtype).permute(0, 3, 1, 2)
    mean = torch.tensor(config.pixel_mean, dtype=dtype).view(1, 3, 1, 1)
    std = torch.tensor(config.pixel_std, dtype=dtype).view(1, 3, 1, 1)
    return (x - mean) / std


class MLPHead(nn.Module):
    """Bias-free Linear + BN + ReLU layers, ending in Linear + BN without affine parameters."""

    def __init__(self, in_dim: int, widths: Sequence[int]):
        super().__init__()
        layers: List[nn.Module] = []
        d = in_dim
        for i, w in enumerate(widths):
            last = i == len(widths) - 1
            # every Linear feeds a BatchNorm, which would cancel a bias
            layers.append(nn.Linear(d, w, bias=False))
            layers.append(nn.BatchNorm1d(w, affine=not last))
            if not last:
                layers.append(nn.ReLU(inplace=False))
            d = w
        self.net = nn.Sequential(*layers)
        self.out_dim = d
        self.apply(_init_weights)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] < 2:
            raise ValueError("batch normalization needs at least 2 vectors in training mode")
        return self.net(x)


class ModelPair(nn.Module):
    """Base encoder + heads, and the momentum copy of backbone + projector.

    The momentum side never requires gradients; it only moves through
    :meth:`ema_update`.
    """

    def __init__(self, vit: ViTConfig, heads: HeadConfig = HeadConfig(), momentum: float = 0.996):
        super().__init__()
        self.vit_config = vit
        self.head_config = heads
        self.momentum = momentum
        self.backbone = VisionTransformer(vit)
        self.projector = MLPHead(vit.embed_dim, heads.projector)
        self.predictor = MLPHead(heads.projector[-1], heads.predictor)
        self.momentum_backbone = copy.deepcopy(self.backbone)
        self.momentum_projector = copy.deepcopy(self.projector)
        for p in self.momentum_parameters():
            p.requires_grad_(False)
        self.init_momentum_from_base()

    def base_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.backbone.parameters()
        yield from self.projector.parameters()
        yield from self.predictor.parameters()

    def named_base_parameters(self):
        for prefix, mod in (("backbone", self.backbone), ("projector", self.projector),
                            ("predictor", self.predictor)):
            for name, p in mod.named_parameters():
                yield f"{prefix}.{name}", p

    def momentum_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.momentum_backbone.parameters()
        yield from self.momentum_projector.parameters()

    def _aligned(self):
        base = list(self.backbone.parameters()) + list(self.projector.parameters())
        mom = list(self.momentum_parameters())
        if len(base) != len(mom):
            raise ValueError("momentum and base parameter lists differ in length")
        for b, m in zip(base, mom):
            if b.shape != m.shape:
                raise ValueError(f"shape mismatch {tuple(b.shape)} vs {tuple(m.shape)}")
        return zip(base, mom)

    @torch.no_grad()
    def init_momentum_from_base(self) -> "ModelPair":
        for b, m in self._aligned():
            m.copy_(b)
        for src, dst in ((self.backbone, self.momentum_backbone),
                         (self.projector, self.momentum_projector)):
            for bb, mb in zip(src.buffers(), dst.buffers()):
                mb.copy_(bb)
        return self

    @torch.no_grad()
    def ema_update(self, m: Optional[float] = None) -> None:
        """Momentum <- m * momentum + (1 - m) * base, elementwise."""
        m = self.momentum if m is None else m
        for b, xi in self._aligned():
            xi.mul_(m).add_(b, alpha=1.0 - m)

    def queries(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.predictor(self.projector(pooled))

    @torch.no_grad()
    def keys(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.momentum_projector(pooled)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
