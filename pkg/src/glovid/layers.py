"""Shared network building blocks: sinusoidal embeddings, residual blocks,
spatial/temporal attention, zero-initialized convolutions.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

Tensor = torch.Tensor


def sinusoidal_encoding(positions: Tensor, dim: int) -> Tensor:
    """Transformer-style sin/cos encoding of (B,) positions -> (B, dim)."""
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"dim must be even and >= 2, got {dim}")
    half = dim // 2
    pos = positions.float().reshape(-1, 1)
    freqs = torch.exp(
        -torch.arange(half, dtype=torch.float32) * (torch.log(torch.tensor(10000.0)) / (half - 1 if half > 1 else 1))
    ).reshape(1, -1)
    angles = pos * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class ScalarEmbedding(nn.Module):
    """Sinusoidal encoding followed by two linear maps with SiLU between."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, out_dim), nn.SiLU(),
                                 nn.Linear(out_dim, out_dim))

    def forward(self, positions: Tensor) -> Tensor:
        enc = sinusoidal_encoding(positions, self.dim)
        return self.mlp(enc.to(self.mlp[0].weight.dtype))


def zero_conv(in_ch: int, out_ch: int) -> nn.Conv2d:
    """1x1 convolution initialized to zero, so its branch starts silent."""
    conv = nn.Conv2d(in_ch, out_ch, kernel_size=1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


def norm_for(channels: int) -> nn.GroupNorm:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


class ResBlock(nn.Module):
    """GroupNorm/SiLU/conv x2 with an optional embedding added between convs.

    The second conv starts at zero so a fresh stack of blocks is the identity,
    which keeps deep paths trainable from scratch.
    """

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int | None = None):
        super().__init__()
        self.norm1 = norm_for(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch) if emb_dim else None
        self.norm2 = norm_for(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, emb: Tensor | None = None) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb_proj is not None and emb is not None:
            h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialAttention(nn.Module):
    """Self-attention over the H*W positions of a feature map.

    An optional context vector is projected to one extra key/value token, so
    every spatial query can attend to the conditioning signal.
    """

    def __init__(self, channels: int, num_heads: int, ctx_dim: int | None = None):
        super().__init__()
        if channels % num_heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.norm = norm_for(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.ctx_kv = nn.Linear(ctx_dim, channels * 2) if ctx_dim else None
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: Tensor, ctx: Tensor | None = None) -> Tensor:
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x))
        q, k, v = rearrange(qkv, "b (three hd d) h w -> three b hd (h w) d",
                            three=3, hd=self.num_heads)
        if self.ctx_kv is not None and ctx is not None:
            ck, cv = self.ctx_kv(ctx).chunk(2, dim=-1)
            ck = rearrange(ck, "b (hd d) -> b hd 1 d", hd=self.num_heads)
            cv = rearrange(cv, "b (hd d) -> b hd 1 d", hd=self.num_heads)
            k = torch.cat([k, ck], dim=2)
            v = torch.cat([v, cv], dim=2)
        out = F.scaled_dot_product_attention(q, k, v)
        out = rearrange(out, "b hd (h w) d -> b (hd d) h w", h=h, w=w)
        return x + self.proj(out)


class TemporalAttention(nn.Module):
    """Self-attention across the slot axis of (B, S, C, H, W) features.

    The output projection is NOT zero-initialized: in the video encoder this
    is the only path by which keyframe content reaches the embedding slot, so
    starting it silent would make the global feature input-independent.
    """

    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        if channels % num_heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.norm = norm_for(channels)
        self.qkv = nn.Linear(channels, channels * 3)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: Tensor) -> Tensor:
        b, s, c, h, w = x.shape
        tokens = rearrange(self.norm(x.reshape(b * s, c, h, w)).reshape(b, s, c, h, w),
                           "b s c h w -> (b h w) s c")
        q, k, v = rearrange(self.qkv(tokens), "n s (three hd d) -> three n hd s d",
                            three=3, hd=self.num_heads)
        out = F.scaled_dot_product_attention(q, k, v)
        out = self.proj(rearrange(out, "n hd s d -> n s (hd d)"))
        return x + rearrange(out, "(b h w) s c -> b s c h w", b=b, h=h, w=w)


class FullAttention(nn.Module):
    """Joint attention over all slot x space tokens of (B, S, C, H, W)."""

    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        if channels % num_heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.norm = norm_for(channels)
        self.qkv = nn.Linear(channels, channels * 3)
        self.proj = nn.Linear(channels, channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: Tensor) -> Tensor:
        b, s, c, h, w = x.shape
        tokens = rearrange(self.norm(x.reshape(b * s, c, h, w)).reshape(b, s, c, h, w),
                           "b s c h w -> b (s h w) c")
        q, k, v = rearrange(self.qkv(tokens), "b n (three hd d) -> three b hd n d",
                            three=3, hd=self.num_heads)
        out = F.scaled_dot_product_attention(q, k, v)
        out = self.proj(rearrange(out, "b hd n d -> b n (hd d)"))
        return x + rearrange(out, "b (s h w) c -> b s c h w", s=s, h=h, w=w)


class Downsample(nn.Module):
    def __init__(self, channels: int, factor: int = 2):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=factor, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int, factor: int = 2):
        super().__init__()
        self.factor = factor
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=self.factor, mode="nearest"))


