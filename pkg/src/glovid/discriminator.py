"""Pairwise video discriminator and the coherence/realism adversarial losses.

The discriminator judges an ordered pair of pixel frames. A shared stem maps
each frame to an 8x8 feature map; learned position embeddings tag the first
and second slot (attention alone is order-blind), then a residual block, a
joint space-time attention over both slots, and a pooled head produce one
realness logit. Because the stem is position-free it runs once per distinct
frame and the six/three menu pairs are scored in a single stacked forward.

The pair menus are the module's ground truth: the discriminator consumes
exactly six ordered pairs (one labeled real, five fake - partially or fully
synthesized pairs plus the two order-reversed ones) and the auto-encoder side
consumes exactly the three pairs that contain a synthesized frame, labeled
real. Both objectives are logit-space binary cross-entropies, which keep the
fixed points of the underlying min/max game but stay bounded.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import FullAttention, ResBlock, norm_for

Tensor = torch.Tensor

# (first slot, second slot, discriminator label)
DISCRIMINATOR_PAIRS: tuple[tuple[str, str, float], ...] = (
    ("real_i", "real_j", 1.0),
    ("real_i", "fake_j", 0.0),
    ("fake_i", "real_j", 0.0),
    ("fake_i", "fake_j", 0.0),
    ("real_j", "real_i", 0.0),
    ("fake_j", "fake_i", 0.0),
)

# pairs the auto-encoder wants scored as real; all contain a synthesized frame
GENERATOR_PAIRS: tuple[tuple[str, str], ...] = (
    ("fake_i", "fake_j"),
    ("fake_i", "real_j"),
    ("real_i", "fake_j"),
)

_FEATURE_SIDE = 8


class PairDiscriminator(nn.Module):
    def __init__(self, image_size: int, width: int = 24, num_heads: int = 4,
                 image_channels: int = 3):
        super().__init__()
        if image_size < 2 * _FEATURE_SIDE or image_size % _FEATURE_SIDE:
            raise ValueError(f"image_size must be a multiple of "
                             f"{2 * _FEATURE_SIDE}, got {image_size}")
        self.image_size = image_size

        stem: list[nn.Module] = []
        ch, side = image_channels, image_size
        while side > _FEATURE_SIDE:
            nxt = min(max(width, ch * 2), width * 2)
            stem += [nn.Conv2d(ch, nxt, 3, stride=2, padding=1), nn.SiLU()]
            ch, side = nxt, side // 2
        self.stem = nn.Sequential(*stem)
        self.pos_first = nn.Parameter(torch.randn(ch, side, side) * 0.02)
        self.pos_second = nn.Parameter(torch.randn(ch, side, side) * 0.02)

        self.joint_res = ResBlock(ch, ch)
        self.joint_attn = FullAttention(ch, num_heads)
        self.head_norm = norm_for(ch)
        self.head = nn.Linear(ch, 1)

    def frame_features(self, frames: Tensor) -> Tensor:
        """Position-free stem features, (B, C, 8, 8); shared across pairs."""
        if frames.dim() == 3:
            frames = frames[None]
        if frames.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} "
                             f"frames, got {tuple(frames.shape[-2:])}")
        return self.stem(frames)

    def embed_pair(self, first: Tensor, second: Tensor) -> Tensor:
        """Position-tagged stack (B, 2, C, s, s) for an ordered pixel pair."""
        if first.shape != second.shape:
            raise ValueError("pair frames must share one shape")
        return self._tag(self.frame_features(first), self.frame_features(second))

    def _tag(self, feat_first: Tensor, feat_second: Tensor) -> Tensor:
        return torch.stack([feat_first + self.pos_first,
                            feat_second + self.pos_second], dim=1)

    def _joint_logit(self, pair: Tensor) -> Tensor:
        bsz, s, c, h, w = pair.shape
        x = self.joint_res(pair.reshape(bsz * s, c, h, w))
        x = self.joint_attn(x.reshape(bsz, s, *x.shape[1:]))
        x = F.silu(self.head_norm(x.reshape(bsz * s, *x.shape[2:])))
        pooled = x.reshape(bsz, s, *x.shape[1:]).mean(dim=(1, 3, 4))
        return self.head(pooled).squeeze(-1)

    def logit_from_features(self, feat_first: Tensor, feat_second: Tensor) -> Tensor:
        return self._joint_logit(self._tag(feat_first, feat_second))

    def pair_logit(self, first: Tensor, second: Tensor) -> Tensor:
        return self._joint_logit(self.embed_pair(first, second))

    def discriminate(self, first: Tensor, second: Tensor) -> Tensor:
        """Realness score strictly inside (0, 1)."""
        return torch.sigmoid(self.pair_logit(first, second))


def _menu_loss(disc: PairDiscriminator, frames: dict[str, Tensor],
               menu: tuple[tuple[str, str, float], ...]) -> Tensor:
    """Sum over menu entries of per-pair mean BCE, in one stacked forward."""
    feats = {key: disc.frame_features(f) for key, f in frames.items()}
    first = torch.cat([feats[a] for a, _, _ in menu])
    second = torch.cat([feats[b] for _, b, _ in menu])
    logits = disc.logit_from_features(first, second)
    bsz = next(iter(feats.values())).shape[0]
    labels = torch.cat([torch.full((bsz,), lbl, dtype=logits.dtype)
                        for _, _, lbl in menu])
    return F.binary_cross_entropy_with_logits(logits, labels) * len(menu)


def cra_discriminator_loss(disc: PairDiscriminator, real_i: Tensor,
                           real_j: Tensor, fake_i: Tensor,
                           fake_j: Tensor) -> Tensor:
    """Sum of the six labeled pair terms; synthesized frames are detached."""
    frames = {"real_i": real_i, "real_j": real_j,
              "fake_i": fake_i.detach(), "fake_j": fake_j.detach()}
    return _menu_loss(disc, frames, DISCRIMINATOR_PAIRS)


def cra_generator_loss(disc: PairDiscriminator, real_i: Tensor, real_j: Tensor,
                       fake_i: Tensor, fake_j: Tensor) -> Tensor:
    """Sum of the three real-labeled pair terms; gradients reach only the
    synthesized frames (real frames are detached)."""
    frames = {"real_i": real_i.detach(), "real_j": real_j.detach(),
              "fake_i": fake_i, "fake_j": fake_j}
    menu = tuple((a, b, 1.0) for a, b in GENERATOR_PAIRS)
    return _menu_loss(disc, frames, menu)
