"""Index-conditioned diffusion decoder for single frame latents.

A UNet backbone (downsample / mapping / upsample stages, each opening with a
residual block and spatial attention) predicts the corruption noise of one
frame latent. Conditioning enters four ways:

- timestep embedding, injected into every residual block (backbone and
  control stack alike);
- a parallel control stack of the same geometry that fuses the normalized
  frame-index embedding with the (upsampled) global feature and adds
  multi-scale residuals to the backbone through zero-initialized 1x1 convs,
  so it contributes exactly nothing at initialization;
- an optional class embedding appended as an extra key/value token inside
  every spatial attention layer (a null row backs classifier-free guidance);
- nothing temporal: frames are decoded independently, which is what makes
  multi-frame synthesis non-autoregressive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import (NoiseSchedule, cfg_combine, ddim_step,
                        ddim_timestep_pairs, predict_x0_from_noise)
from .layers import (Downsample, ResBlock, ScalarEmbedding, SpatialAttention,
                     Upsample, norm_for, zero_conv)
from .rng import generator_for

Tensor = torch.Tensor
INDEX_SCALE = 1000.0  # normalized frame index is stretched to [0, 1000]


@dataclass
class DenoiserConditioning:
    """Everything predict_noise conditions on, besides the noisy latent."""

    t: Union[int, Tensor]
    frame_index: Union[int, Tensor]
    total_frames: int
    v: Tensor
    condition: Optional[Union[int, Tensor]] = None


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 3.0
    eta: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")


def normalized_index(i: Tensor, total_frames: int) -> Tensor:
    """i / (F - 1) scaled to [0, INDEX_SCALE]; 0 when F = 1."""
    if total_frames < 1:
        raise ValueError("total_frames must be >= 1")
    if total_frames == 1:
        return torch.zeros_like(i, dtype=torch.float32)
    return i.float() * (INDEX_SCALE / (total_frames - 1))


def rec_loss(noise_pred: Tensor, noise_true: Tensor) -> Tensor:
    """Mean squared elementwise distance between predicted and true noise."""
    if noise_pred.shape != noise_true.shape:
        raise ValueError(f"shape mismatch: {tuple(noise_pred.shape)} vs "
                         f"{tuple(noise_true.shape)}")
    return F.mse_loss(noise_pred, noise_true)


class _DenoiserStage(nn.Module):
    """Residual block plus optional spatial attention."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, heads: int,
                 with_attn: bool, ctx_dim: int | None):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, emb_dim)
        self.attn = SpatialAttention(out_ch, heads, ctx_dim) if with_attn else None

    def forward(self, x: Tensor, emb: Tensor, ctx: Tensor | None) -> Tensor:
        x = self.res(x, emb)
        if self.attn is not None:
            x = self.attn(x, ctx)
        return x


class FrameDenoiser(nn.Module):
    def __init__(self, in_channels: int, latent_size: int, model_channels: int,
                 channel_mult: Sequence[int] = (1, 2, 4),
                 attn_resolutions: Sequence[int] = (16, 8),
                 num_heads: int = 4, global_channels: int = 16,
                 f_video: int = 2, num_classes: int = 0,
                 num_timesteps: int = 1000):
        super().__init__()
        self.in_channels = in_channels
        self.latent_size = latent_size
        self.num_classes = num_classes
        self.num_timesteps = num_timesteps
        self.f_video = f_video
        mult = tuple(channel_mult)
        emb_dim = model_channels * 4
        self.t_embed = ScalarEmbedding(model_channels, emb_dim)
        self.idx_embed = ScalarEmbedding(model_channels, emb_dim)
        self.class_embed = (nn.Embedding(num_classes + 1, emb_dim)
                            if num_classes > 0 else None)
        ctx_dim = emb_dim if num_classes > 0 else None

        def stage(in_ch, out_ch, res):
            return _DenoiserStage(in_ch, out_ch, emb_dim, num_heads,
                                  res in attn_resolutions, ctx_dim)

        widths = [model_channels * m for m in mult]
        sizes = [latent_size // (2 ** l) for l in range(len(mult))]
        self.level_widths = widths

        def build_path(first_channels):
            in_conv = nn.Conv2d(first_channels, model_channels, 3, padding=1)
            down = nn.ModuleList()
            downsample = nn.ModuleList()
            ch = model_channels
            for l, w in enumerate(widths):
                down.append(stage(ch, w, sizes[l]))
                ch = w
                if l < len(widths) - 1:
                    downsample.append(Downsample(ch))
            mid = stage(ch, ch, sizes[-1])
            up = nn.ModuleList()
            upsample = nn.ModuleList()
            for l in reversed(range(len(widths))):
                up.append(stage(ch + widths[l], widths[l], sizes[l]))
                ch = widths[l]
                if l > 0:
                    upsample.append(Upsample(ch))
            return in_conv, down, downsample, mid, up, upsample

        (self.in_conv, self.down, self.downsample, self.mid, self.up,
         self.upsample) = build_path(in_channels)
        (self.ctrl_in, self.ctrl_down, self.ctrl_downsample, self.ctrl_mid,
         self.ctrl_up, self.ctrl_upsample) = build_path(global_channels)

        # one zero-init joint per down stage, the mapping stage, and each up stage
        joint_widths = widths + [widths[-1]] + widths[::-1]
        self.ctrl_out = nn.ModuleList(zero_conv(w, w) for w in joint_widths)

        out_conv = nn.Conv2d(model_channels, in_channels, 3, padding=1)
        nn.init.zeros_(out_conv.weight)
        nn.init.zeros_(out_conv.bias)
        self.out = nn.Sequential(norm_for(model_channels), nn.SiLU(), out_conv)

    # -- conditioning -----------------------------------------------------

    def _prepare(self, zt: Tensor, cond: DenoiserConditioning):
        if zt.dim() == 3:
            zt = zt[None]
        b = zt.shape[0]
        if zt.shape[1:] != (self.in_channels, self.latent_size, self.latent_size):
            raise ValueError(f"latent shape {tuple(zt.shape[1:])} does not match "
                             f"the configured ({self.in_channels}, "
                             f"{self.latent_size}, {self.latent_size})")

        def per_sample(value, what):
            x = torch.as_tensor(value, dtype=torch.long).reshape(-1)
            if x.numel() == 1:
                return x.expand(b)
            if x.numel() != b:
                raise ValueError(f"{what} batch does not match latents")
            return x

        t = per_sample(cond.t, "timestep")
        if bool((t < 1).any()) or bool((t > self.num_timesteps).any()):
            raise ValueError(f"timestep out of range [1, {self.num_timesteps}]")

        idx = per_sample(cond.frame_index, "frame index")
        if bool((idx < 0).any()) or bool((idx >= cond.total_frames).any()):
            raise ValueError(
                f"frame index out of range [0, {cond.total_frames})")

        v = cond.v
        if v.dim() == 3:
            v = v[None]
        if v.shape[0] == 1 and b > 1:
            v = v.expand(b, -1, -1, -1)
        if v.shape[0] != b:
            raise ValueError("global feature batch does not match latents")

        ctx = None
        if self.class_embed is not None:
            if cond.condition is None:
                c = torch.full((b,), self.num_classes, dtype=torch.long)
            else:
                c = torch.as_tensor(cond.condition, dtype=torch.long).reshape(-1)
                if c.numel() == 1:
                    c = c.expand(b)
                if bool((c < 0).any()) or bool((c > self.num_classes).any()):
                    raise ValueError("condition index out of vocabulary")
            ctx = self.class_embed(c)
        elif cond.condition is not None:
            raise ValueError("model was built without a condition vocabulary")

        t_emb = self.t_embed(t.float())
        i_emb = self.idx_embed(normalized_index(idx, cond.total_frames))
        return zt, t_emb, i_emb, v, ctx

    # -- forward ----------------------------------------------------------

    def forward(self, zt: Tensor, cond: DenoiserConditioning,
                use_control: bool = True,
                control_norms: list | None = None) -> Tensor:
        squeeze = zt.dim() == 3
        zt, t_emb, i_emb, v, ctx = self._prepare(zt, cond)

        hc = None
        if use_control:
            v_up = F.interpolate(v, scale_factor=self.f_video, mode="nearest")
            hc = self.ctrl_in(v_up)
        joint = iter(self.ctrl_out)

        def fuse(h, hc):
            if hc is None:
                return h
            r = next(joint)(hc)
            if control_norms is not None:
                control_norms.append(float(r.detach().norm()))
            return h + r

        # control residual blocks see the timestep too: a noise-level-blind
        # additive correction would be wrong at most timesteps and the
        # optimizer would squash the whole conditioning pathway
        c_emb = t_emb + i_emb

        h = self.in_conv(zt)
        skips, ctrl_skips = [], []
        for l, block in enumerate(self.down):
            h = block(h, t_emb, ctx)
            if hc is not None:
                hc = self.ctrl_down[l](hc, c_emb, ctx)
            h = fuse(h, hc)
            skips.append(h)
            ctrl_skips.append(hc)
            if l < len(self.down) - 1:
                h = self.downsample[l](h)
                if hc is not None:
                    hc = self.ctrl_downsample[l](hc)

        h = self.mid(h, t_emb, ctx)
        if hc is not None:
            hc = self.ctrl_mid(hc, c_emb, ctx)
        h = fuse(h, hc)

        for n, block in enumerate(self.up):
            l = len(self.down) - 1 - n
            h = block(torch.cat([h, skips[l]], dim=1), t_emb, ctx)
            if hc is not None:
                hc = self.ctrl_up[n](torch.cat([hc, ctrl_skips[l]], dim=1),
                                     c_emb, ctx)
            h = fuse(h, hc)
            if l > 0:
                h = self.upsample[n](h)
                if hc is not None:
                    hc = self.ctrl_upsample[n](hc)

        eps = self.out(h)
        return eps[0] if squeeze else eps

    def predict_noise(self, zt: Tensor, cond: DenoiserConditioning) -> Tensor:
        return self(zt, cond)

    def estimate_x0(self, zt: Tensor, cond: DenoiserConditioning,
                    sched: NoiseSchedule) -> Tensor:
        """Single-step clean-latent estimate used by the adversarial branch."""
        eps = self(zt, cond)
        return predict_x0_from_noise(zt, cond.t, eps, sched).to(zt.dtype)

    def control_residual_norm(self, zt: Tensor, cond: DenoiserConditioning) -> float:
        norms: list[float] = []
        self(zt, cond, control_norms=norms)
        return float(sum(norms))


# Frames are decoded in fixed-size chunks (short chunks padded by repeating a
# row). Keeping every forward at one batch shape makes the backend pick one
# kernel per shape, so a frame's bits never depend on how many other frames
# were requested with it; the acceptance suite asserts this.
DECODE_CHUNK = 16


def synth_frames(denoiser: FrameDenoiser, codec, sched: NoiseSchedule,
                 v: Tensor, indexes: Sequence[int], total_frames: int,
                 condition: Optional[int], sampler: SamplerConfig,
                 seed: int, chunk: int = DECODE_CHUNK) -> Tensor:
    """Decode the requested frame indexes from one global feature.

    Every frame runs its own reverse-diffusion chain from a noise stream
    keyed by (seed, index), so the result for an index is bit-identical no
    matter which other indexes are in the request. Returns float frames in
    [-1, 1], shape (len(indexes), C, H, W), in request order.
    """
    indexes = [int(i) for i in indexes]
    for i in indexes:
        if not (0 <= i < total_frames):
            raise ValueError(f"frame index {i} out of range [0, {total_frames})")
    if denoiser.num_classes == 0:
        if condition is not None:
            raise ValueError("model was built without a condition vocabulary")
        if sampler.guidance_scale != 1.0:
            raise ValueError("guidance requested with no condition vocabulary")
    if v.dim() != 3:
        raise ValueError("expected an unbatched (C'', H'', W'') global feature")

    shape = (denoiser.in_channels, denoiser.latent_size, denoiser.latent_size)
    if not indexes:
        return torch.zeros(0, codec.image_channels,
                           denoiser.latent_size * codec.f_frame,
                           denoiser.latent_size * codec.f_frame)

    pieces = []
    with torch.no_grad():
        for lo in range(0, len(indexes), chunk):
            req = indexes[lo:lo + chunk]
            streams = [generator_for(seed, i) for i in req]
            pad = chunk - len(req)
            idx_t = torch.tensor(req + [req[-1]] * pad, dtype=torch.long)

            def padded(draws: list[Tensor]) -> Tensor:
                return torch.stack(draws + [draws[-1]] * pad)

            zt = padded([torch.randn(shape, generator=g) for g in streams])
            for t, t_prev in ddim_timestep_pairs(sched.T, sampler.steps):
                def cond_for(c):
                    return DenoiserConditioning(
                        t=t, frame_index=idx_t, total_frames=total_frames,
                        v=v, condition=c)
                if sampler.guidance_scale == 1.0:
                    eps = denoiser(zt, cond_for(condition))
                elif sampler.guidance_scale == 0.0:
                    eps = denoiser(zt, cond_for(None))
                else:
                    eps = cfg_combine(denoiser(zt, cond_for(None)),
                                      denoiser(zt, cond_for(condition)),
                                      sampler.guidance_scale)
                fresh = None
                if sampler.eta > 0 and t_prev > 0:
                    fresh = padded([torch.randn(shape, generator=g)
                                    for g in streams])
                zt = ddim_step(zt, eps, t, t_prev, sampler.eta, sched, fresh,
                               clip_x0=codec.latent_range).to(torch.float32)
            pieces.append(codec.decode(zt)[:len(req)])
    return torch.cat(pieces)
