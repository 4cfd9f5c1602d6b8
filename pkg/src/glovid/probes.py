"""Frozen evaluation probes trained once on real sprite data.

- ``VideoFeatureNet``: direction classifier over 4 stacked keyframes; its
  penultimate activations are the feature space for the Frechet metric.
- ``OrderProbe``: antisymmetric pair classifier for frame order. The logit is
  g(a, b) - g(b, a) with one shared trunk, so on signal-free input the
  ordered/reversed decision is a coin flip by construction, while real pairs
  are separable through the sprite-growth cue.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import SpriteDataset, frames_to_unit
from .encoder import keyframe_indexes
from .rng import generator_for

Tensor = torch.Tensor

FEATURE_DIM = 32
_PROBE_FRAMES = 4

# direction class remap under image mirroring (angle -> pi - angle, resp. -angle)
_HFLIP_LABEL = (4, 3, 2, 1, 0, 7, 6, 5)
_VFLIP_LABEL = (0, 7, 6, 5, 4, 3, 2, 1)


def _augment_video(video: np.ndarray, label: int,
                   rng: torch.Generator) -> tuple[np.ndarray, int]:
    """Mirror flips with the matching compass-label remap."""
    if bool(torch.rand((), generator=rng) < 0.5):
        video = video[:, :, ::-1]
        label = _HFLIP_LABEL[label]
    if bool(torch.rand((), generator=rng) < 0.5):
        video = video[:, ::-1, :]
        label = _VFLIP_LABEL[label]
    return np.ascontiguousarray(video), label


def _trunk(in_ch: int, width: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, width, 3, stride=2, padding=1), nn.SiLU(),
        nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.SiLU(),
        nn.Conv2d(width * 2, width * 2, 3, stride=2, padding=1), nn.SiLU(),
        nn.AdaptiveAvgPool2d(1), nn.Flatten(),
    )


class VideoFeatureNet(nn.Module):
    def __init__(self, num_classes: int, width: int = 32):
        super().__init__()
        self.trunk = _trunk(3 * _PROBE_FRAMES, width)
        self.to_feature = nn.Linear(width * 2, FEATURE_DIM)
        self.head = nn.Linear(FEATURE_DIM, num_classes)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        feat = self.to_feature(self.trunk(x))
        return feat, self.head(F.silu(feat))


def video_probe_input(video: np.ndarray) -> Tensor:
    """(F, H, W, C) uint8 -> (12, H, W) float stack of 4 spread frames."""
    idx = keyframe_indexes(video.shape[0], _PROBE_FRAMES)
    frames = frames_to_unit(video[idx])
    return frames.reshape(-1, *frames.shape[-2:])


def extract_features(net: VideoFeatureNet, videos: list[np.ndarray],
                     batch_size: int = 32) -> np.ndarray:
    net.eval()
    feats = []
    with torch.no_grad():
        for lo in range(0, len(videos), batch_size):
            batch = torch.stack([video_probe_input(v)
                                 for v in videos[lo:lo + batch_size]])
            feats.append(net(batch)[0].numpy())
    return np.concatenate(feats)


def train_feature_net(dataset: SpriteDataset, indexes: list[int],
                      num_classes: int, seed: int, steps: int = 1000,
                      batch_size: int = 32, lr: float = 3e-3) -> VideoFeatureNet:
    torch.manual_seed(generator_for(seed, 0x5EA7).initial_seed())
    net = VideoFeatureNet(num_classes)
    rng = generator_for(seed, 0xF00D)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(steps):
        picks = torch.randint(0, len(indexes), (batch_size,), generator=rng)
        inputs, labels = [], []
        for p in picks:
            video, label = dataset[indexes[int(p)]]
            video, label = _augment_video(video, label, rng)
            inputs.append(video_probe_input(video))
            labels.append(label)
        logits = net(torch.stack(inputs))[1]
        loss = F.cross_entropy(logits, torch.tensor(labels))
        opt.zero_grad()
        loss.backward()
        opt.step()
    for p in net.parameters():
        p.requires_grad_(False)
    return net.eval()


def feature_net_accuracy(net: VideoFeatureNet, dataset: SpriteDataset,
                         indexes: list[int]) -> float:
    hits = 0
    with torch.no_grad():
        for i in indexes:
            video, label = dataset[i]
            logits = net(video_probe_input(video)[None])[1]
            hits += int(logits.argmax()) == label
    return hits / len(indexes)


class OrderProbe(nn.Module):
    """P(pair is in correct temporal order) via an antisymmetric logit."""

    def __init__(self, width: int = 24):
        super().__init__()
        self.trunk = _trunk(3, width)
        self.score = nn.Sequential(nn.Linear(width * 4, 64), nn.SiLU(),
                                   nn.Linear(64, 1))

    def _g(self, first: Tensor, second: Tensor) -> Tensor:
        a = self.trunk(first)
        b = self.trunk(second)
        return self.score(torch.cat([a, b], dim=-1)).squeeze(-1)

    def pair_logit(self, first: Tensor, second: Tensor) -> Tensor:
        """Positive when (first, second) looks correctly ordered."""
        if first.dim() == 3:
            first, second = first[None], second[None]
        return self._g(first, second) - self._g(second, first)


def train_order_probe(dataset: SpriteDataset, indexes: list[int], seed: int,
                      steps: int = 700, batch_size: int = 32,
                      lr: float = 2e-3) -> OrderProbe:
    torch.manual_seed(generator_for(seed, 0x0D3E).initial_seed())
    probe = OrderProbe()
    rng = generator_for(seed, 0xBEEF)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    total = dataset.frames
    for _ in range(steps):
        picks = torch.randint(0, len(indexes), (batch_size,), generator=rng)
        firsts, seconds, labels = [], [], []
        for p in picks:
            video, lbl = dataset[indexes[int(p)]]
            video, _ = _augment_video(video, lbl, rng)  # order is flip-invariant
            i, j = _draw_pair(total, rng)
            if bool(torch.rand((), generator=rng) < 0.5):
                i, j = j, i
            firsts.append(frames_to_unit(video[i]))
            seconds.append(frames_to_unit(video[j]))
            labels.append(1.0 if i < j else 0.0)
        logit = probe.pair_logit(torch.stack(firsts), torch.stack(seconds))
        loss = F.binary_cross_entropy_with_logits(logit, torch.tensor(labels))
        opt.zero_grad()
        loss.backward()
        opt.step()
    for p in probe.parameters():
        p.requires_grad_(False)
    return probe.eval()


def _draw_pair(total: int, rng: torch.Generator) -> tuple[int, int]:
    while True:
        ij = torch.randint(0, total, (2,), generator=rng)
        a, b = int(ij[0]), int(ij[1])
        if a != b:
            return (a, b) if a < b else (b, a)


def order_coherence(probe: OrderProbe, videos: list[np.ndarray],
                    pairs_per_video: int = 4, seed: int = 0) -> float:
    """Fraction of sampled i < j pairs classified as correctly ordered."""
    rng = generator_for(seed, 0xACC)
    hits, count = 0, 0
    with torch.no_grad():
        for video in videos:
            for _ in range(pairs_per_video):
                i, j = _draw_pair(video.shape[0], rng)
                logit = probe.pair_logit(frames_to_unit(video[i]),
                                         frames_to_unit(video[j]))
                hits += int(logit.item() > 0)
                count += 1
    return hits / count
