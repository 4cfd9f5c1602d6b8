"""Per-frame pixel/latent codec.

Two interchangeable modes sit behind one interface:

- ``SpaceToDepthCodec``: a bit-exact bijective rearrangement. Each f x f pixel
  block becomes one latent position with C * f^2 channels. Used wherever
  exact-math testing or lossless latents matter.
- ``ConvCodec``: a small convolutional autoencoder with a narrow latent
  (default 4 channels), pretrained on the target data with an L2 objective.
  Deterministic at inference; there is no sampling inside the codec.

Frames are float tensors in [-1, 1] with layout (..., C, H, W); latents are
(..., C', H', W') with H' = H / f_frame.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .layers import norm_for

Tensor = torch.Tensor


class SpaceToDepthCodec:
    """Exactly invertible block rearrangement with C' = C * f_frame**2."""

    mode = "deterministic"
    latent_range = (-1.0, 1.0)  # latents are rearranged unit-range pixels

    def __init__(self, f_frame: int, image_channels: int = 3):
        if f_frame < 1:
            raise ValueError(f"f_frame must be >= 1, got {f_frame}")
        self.f_frame = f_frame
        self.image_channels = image_channels
        self.latent_channels = image_channels * f_frame * f_frame

    def encode(self, frames: Tensor) -> Tensor:
        c, h, w = frames.shape[-3:]
        if c != self.image_channels:
            raise ValueError(f"expected {self.image_channels} channels, got {c}")
        if h % self.f_frame or w % self.f_frame:
            raise ValueError(
                f"frame size {h}x{w} not divisible by f_frame={self.f_frame}")
        return rearrange(frames, "... c (h p) (w q) -> ... (c p q) h w",
                         p=self.f_frame, q=self.f_frame)

    def decode(self, latents: Tensor) -> Tensor:
        if latents.shape[-3] != self.latent_channels:
            raise ValueError(
                f"expected {self.latent_channels} latent channels, "
                f"got {latents.shape[-3]}")
        return rearrange(latents, "... (c p q) h w -> ... c (h p) (w q)",
                         p=self.f_frame, q=self.f_frame)

    def parameters(self):
        return iter(())


class ConvCodec(nn.Module):
    """Strided conv encoder and nearest-upsample decoder around a thin latent."""

    mode = "learned"
    latent_range = None  # unconstrained learned latents

    def __init__(self, f_frame: int, latent_channels: int = 4, width: int = 32,
                 image_channels: int = 3):
        super().__init__()
        levels = (f_frame - 1).bit_length()
        if 2 ** levels != f_frame:
            raise ValueError(f"learned codec needs a power-of-two f_frame, got {f_frame}")
        self.f_frame = f_frame
        self.latent_channels = latent_channels
        self.image_channels = image_channels

        enc: list[nn.Module] = [nn.Conv2d(image_channels, width, 3, padding=1)]
        ch = width
        for _ in range(levels):
            nxt = min(ch * 2, width * 4)
            enc += [nn.SiLU(), nn.Conv2d(ch, nxt, 3, stride=2, padding=1)]
            ch = nxt
        enc += [norm_for(ch), nn.SiLU(), nn.Conv2d(ch, latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(latent_channels, ch, 3, padding=1)]
        for _ in range(levels):
            nxt = max(ch // 2, width)
            dec += [nn.SiLU(), nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(ch, nxt, 3, padding=1)]
            ch = nxt
        dec += [norm_for(ch), nn.SiLU(), nn.Conv2d(ch, image_channels, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def _flat(self, x: Tensor, net: nn.Sequential, out_ch: int) -> Tensor:
        lead = x.shape[:-3]
        y = net(x.reshape(-1, *x.shape[-3:]))
        return y.reshape(*lead, out_ch, *y.shape[-2:])

    def encode(self, frames: Tensor) -> Tensor:
        h, w = frames.shape[-2:]
        if h % self.f_frame or w % self.f_frame:
            raise ValueError(
                f"frame size {h}x{w} not divisible by f_frame={self.f_frame}")
        return self._flat(frames, self.encoder, self.latent_channels)

    def decode(self, latents: Tensor) -> Tensor:
        if latents.shape[-3] != self.latent_channels:
            raise ValueError(
                f"expected {self.latent_channels} latent channels, "
                f"got {latents.shape[-3]}")
        return self._flat(latents, self.decoder, self.image_channels)


Codec = SpaceToDepthCodec | ConvCodec


def build_codec(mode: str, f_frame: int, latent_channels: int = 4,
                width: int = 32) -> Codec:
    if mode == "deterministic":
        return SpaceToDepthCodec(f_frame)
    if mode == "learned":
        return ConvCodec(f_frame, latent_channels=latent_channels, width=width)
    raise ValueError(f"unknown codec mode {mode!r}")


def pretrain_codec(codec: ConvCodec, frames: Tensor, steps: int, lr: float,
                   batch_size: int, rng: torch.Generator,
                   log_every: int = 0) -> list[float]:
    """Fit the learned codec with per-pixel L2 on a pool of frames.

    ``frames`` is a (N, C, H, W) float tensor in [-1, 1]. Returns the loss
    trace. The caller freezes the codec afterwards.
    """
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    losses = []
    for step in range(steps):
        idx = torch.randint(0, frames.shape[0], (batch_size,), generator=rng)
        batch = frames[idx]
        recon = codec.decode(codec.encode(batch))
        loss = F.mse_loss(recon, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))
        if log_every and (step + 1) % log_every == 0:
            print(f"codec step {step + 1}/{steps} loss {losses[-1]:.5f}")
    for p in codec.parameters():
        p.requires_grad_(False)
    return losses
