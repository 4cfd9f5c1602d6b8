"""Video encoder: keyframe latents plus a learned embedding slot go through
spatial/temporal attention stages and come out as a global-feature posterior.

The K keyframe latents are concatenated behind a trained embedding feature
(slot 0). The downsample stage shrinks space by f_video; the mapping stage
repeats the block structure but ends with a temporal split that keeps only
the embedding slot, which the output head turns into (mean, std) maps of
shape (C'', H'', W'') with H'' = H' / f_video.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import (ResBlock, SpatialAttention, TemporalAttention, norm_for)

Tensor = torch.Tensor


@dataclass(frozen=True)
class GlobalFeaturePosterior:
    """Elementwise Gaussian over global features; std is strictly positive."""

    mean: Tensor
    std: Tensor


def keyframe_indexes(total_frames: int, k: int) -> list[int]:
    """Equal-interval frame indexes: round(i * (F-1) / (K-1)), or [0] for K=1."""
    if not (1 <= k <= total_frames):
        raise ValueError(f"need 1 <= K <= F, got K={k}, F={total_frames}")
    if k == 1:
        return [0]
    step = (total_frames - 1) / (k - 1)
    return [int(math.floor(i * step + 0.5)) for i in range(k)]


def select_keyframes(frames: Tensor, k: int, codec) -> list[tuple[int, Tensor]]:
    """Pick K equally spaced frames of a (F, C, H, W) clip and encode each."""
    idx = keyframe_indexes(frames.shape[0], k)
    latents = codec.encode(frames[idx])
    return [(q, latents[n]) for n, q in enumerate(idx)]


def sample_global(posterior: GlobalFeaturePosterior, n: Tensor) -> Tensor:
    """Reparameterized draw: mean + std * n."""
    if n.shape != posterior.mean.shape:
        raise ValueError(f"noise shape {tuple(n.shape)} does not match "
                         f"posterior {tuple(posterior.mean.shape)}")
    return posterior.mean + posterior.std * n


def kl_loss(posterior: GlobalFeaturePosterior) -> Tensor:
    """Mean over elements of 0.5 * (mean^2 + std^2 - log std^2 - 1).

    Zero exactly at the standard-normal fixed point, positive elsewhere.
    """
    std = posterior.std
    if bool((std <= 0).any()):
        raise ValueError("posterior std must be strictly positive")
    mean = posterior.mean
    return (0.5 * (mean * mean + std * std - torch.log(std * std) - 1.0)).mean()


class _EncoderStage(nn.Module):
    """Residual block, spatial attention, temporal attention over all slots."""

    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        self.res = ResBlock(channels, channels)
        self.spatial = SpatialAttention(channels, num_heads)
        self.temporal = TemporalAttention(channels, num_heads)

    def forward(self, x: Tensor) -> Tensor:
        b, s, c, h, w = x.shape
        flat = x.reshape(b * s, c, h, w)
        flat = self.spatial(self.res(flat))
        return self.temporal(flat.reshape(b, s, c, h, w))


class VideoEncoder(nn.Module):
    def __init__(self, in_channels: int, latent_size: int, width: int,
                 out_channels: int, f_video: int, keyframes: int,
                 num_heads: int = 4):
        super().__init__()
        if f_video < 1 or latent_size % f_video:
            raise ValueError(f"f_video={f_video} must divide latent size "
                             f"{latent_size}")
        self.keyframes = keyframes
        self.f_video = f_video
        self.out_channels = out_channels
        self.out_size = latent_size // f_video

        self.embed_feature = nn.Parameter(
            torch.randn(in_channels, latent_size, latent_size) * 0.02)
        self.in_conv = nn.Conv2d(in_channels, width, 3, padding=1)
        self.temporal_pos = nn.Parameter(torch.zeros(keyframes + 1, width))

        self.down_stage = _EncoderStage(width, num_heads)
        self.down_conv = nn.Conv2d(width, width, 3, stride=f_video, padding=1)
        self.mapping_stage = _EncoderStage(width, num_heads)
        self.out_head = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1),
            norm_for(width), nn.SiLU(),
            nn.Conv2d(width, 2 * out_channels, 3, padding=1),
        )
        # start the posterior sharp (std ~ e^-3): a unit-std posterior at
        # initialization drowns the mean in sampling noise, teaching the
        # decoder to ignore the global feature before it carries anything
        nn.init.constant_(self.out_head[-1].bias[out_channels:], -3.0)

    def forward(self, keyframe_latents: Tensor) -> GlobalFeaturePosterior:
        """(B, K, C', H', W') keyframe latents -> posterior over (C'', H'', W'')."""
        if keyframe_latents.dim() != 5:
            raise ValueError("expected (B, K, C', H', W') keyframe latents")
        b, k, c, h, w = keyframe_latents.shape
        if k != self.keyframes:
            raise ValueError(f"expected K={self.keyframes} keyframes, got {k}")
        emb = self.embed_feature.expand(b, 1, -1, -1, -1)
        if emb.shape[2:] != (c, h, w):
            raise ValueError(
                f"keyframe latents {(c, h, w)} do not match the embedding "
                f"feature {tuple(self.embed_feature.shape)}")
        seq = torch.cat([emb, keyframe_latents], dim=1)  # embedding first

        x = self.in_conv(seq.reshape(b * (k + 1), c, h, w))
        x = x.reshape(b, k + 1, -1, h, w) + self.temporal_pos[None, :, :, None, None]
        x = self.down_stage(x)
        bs, s, ch, _, _ = x.shape
        x = self.down_conv(x.reshape(bs * s, ch, h, w))
        x = x.reshape(bs, s, ch, *x.shape[-2:])
        x = self.mapping_stage(x)
        embedding_slot = x[:, 0]  # temporal split: keep the embedding part
        stats = self.out_head(embedding_slot)
        mean, log_std = stats.chunk(2, dim=1)
        std = torch.exp(log_std.clamp(-30.0, 20.0))
        return GlobalFeaturePosterior(mean=mean, std=std)
