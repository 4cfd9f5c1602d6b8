"""Diffusion generator over flattened global features.

The encoder's (C'', H'', W'') global feature flattens row-major into
H''*W'' tokens of width C''. A transformer denoiser with adaptive layer-norm
conditioning (timestep plus optional class embedding, null row for
classifier-free guidance) predicts the corruption noise; sampling runs the
same deterministic implicit loop as the frame decoder, then unflattens.
"""

from __future__ import annotations

from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .decoder import SamplerConfig
from .diffusion import (NoiseSchedule, cfg_combine, ddim_step,
                        ddim_timestep_pairs, q_sample)
from .layers import ScalarEmbedding
from .rng import generator_for

Tensor = torch.Tensor


def flatten_global(v: Tensor) -> Tensor:
    """(..., C, H, W) -> (..., H*W, C), row-major over space."""
    return rearrange(v, "... c h w -> ... (h w) c")


def unflatten_global(tokens: Tensor, spatial: tuple[int, int]) -> Tensor:
    """Inverse of flatten_global given the (H, W) layout."""
    h, w = spatial
    if tokens.shape[-2] != h * w:
        raise ValueError(f"{tokens.shape[-2]} tokens cannot fill {h}x{w}")
    return rearrange(tokens, "... (h w) c -> ... c h w", h=h, w=w)


class _Block(nn.Module):
    """Pre-norm attention/MLP pair gated by adaptive layer-norm (zero-init)."""

    def __init__(self, width: int, num_heads: int, mlp_ratio: int):
        super().__init__()
        self.num_heads = num_heads
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False)
        self.qkv = nn.Linear(width, width * 3)
        self.attn_out = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(width, width * mlp_ratio), nn.GELU(),
                                 nn.Linear(width * mlp_ratio, width))
        self.mod = nn.Linear(width, 6 * width)
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)

    def _attend(self, x: Tensor) -> Tensor:
        q, k, v = rearrange(self.qkv(x), "b n (three hd d) -> three b hd n d",
                            three=3, hd=self.num_heads)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.attn_out(rearrange(out, "b hd n d -> b n (hd d)"))

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        mods = self.mod(F.silu(emb))[:, None, :].chunk(6, dim=-1)
        shift1, scale1, gate1, shift2, scale2, gate2 = mods
        x = x + gate1 * self._attend(self.norm1(x) * (1 + scale1) + shift1)
        x = x + gate2 * self.mlp(self.norm2(x) * (1 + scale2) + shift2)
        return x


class TokenDenoiser(nn.Module):
    def __init__(self, channels: int, seq_len: int, width: int = 256,
                 depth: int = 6, num_heads: int = 4, mlp_ratio: int = 4,
                 num_classes: int = 0, num_timesteps: int = 1000):
        super().__init__()
        self.channels = channels
        self.seq_len = seq_len
        self.num_classes = num_classes
        self.num_timesteps = num_timesteps
        self.in_proj = nn.Linear(channels, width)
        self.pos = nn.Parameter(torch.randn(seq_len, width) * 0.02)
        self.t_embed = ScalarEmbedding(width, width)
        self.class_embed = (nn.Embedding(num_classes + 1, width)
                            if num_classes > 0 else None)
        self.blocks = nn.ModuleList(
            _Block(width, num_heads, mlp_ratio) for _ in range(depth))
        self.final_norm = nn.LayerNorm(width, elementwise_affine=False)
        self.final_mod = nn.Linear(width, 2 * width)
        nn.init.zeros_(self.final_mod.weight)
        nn.init.zeros_(self.final_mod.bias)
        self.out_proj = nn.Linear(width, channels)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, vt: Tensor, t: Union[int, Tensor],
                condition: Optional[Union[int, Tensor]] = None) -> Tensor:
        squeeze = vt.dim() == 2
        if squeeze:
            vt = vt[None]
        if vt.shape[-2:] != (self.seq_len, self.channels):
            raise ValueError(f"expected (*, {self.seq_len}, {self.channels}) "
                             f"tokens, got {tuple(vt.shape)}")
        b = vt.shape[0]

        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        if bool((t < 1).any()) or bool((t > self.num_timesteps).any()):
            raise ValueError(f"timestep out of range [1, {self.num_timesteps}]")
        emb = self.t_embed(t.float())

        if self.class_embed is not None:
            if condition is None:
                c = torch.full((b,), self.num_classes, dtype=torch.long)
            else:
                c = torch.as_tensor(condition, dtype=torch.long).reshape(-1)
                if c.numel() == 1:
                    c = c.expand(b)
                if bool((c < 0).any()) or bool((c > self.num_classes).any()):
                    raise ValueError("condition index out of vocabulary")
            emb = emb + self.class_embed(c)
        elif condition is not None:
            raise ValueError("model was built without a condition vocabulary")

        x = self.in_proj(vt) + self.pos
        for block in self.blocks:
            x = block(x, emb)
        shift, scale = self.final_mod(F.silu(emb))[:, None, :].chunk(2, dim=-1)
        out = self.out_proj(self.final_norm(x) * (1 + scale) + shift)
        return out[0] if squeeze else out


def generator_train_step(v: Tensor, condition: Optional[Tensor],
                         sched: NoiseSchedule, rng: torch.Generator, *,
                         model: TokenDenoiser, cfg_dropout: float = 0.1) -> Tensor:
    """Noise-prediction MSE on flattened global features.

    Per sample: t ~ U[1, T], standard-normal corruption noise, and the class
    condition dropped to the null row with probability ``cfg_dropout``.
    """
    if v.dim() == 3:
        v = v[None]
    tokens = flatten_global(v)
    b = tokens.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=rng)
    noise = torch.randn(tokens.shape, generator=rng, dtype=tokens.dtype)
    vt = q_sample(tokens, t, noise, sched).to(tokens.dtype)

    cond = None
    if model.class_embed is not None and condition is not None:
        cond = torch.as_tensor(condition, dtype=torch.long).reshape(-1).clone()
        if cond.numel() == 1:
            cond = cond.expand(b).clone()
        drop = torch.rand(b, generator=rng) < cfg_dropout
        cond[drop] = model.num_classes

    pred = model(vt, t, cond)
    return F.mse_loss(pred, noise)


def sample_global_feature(condition: Optional[int], sampler: SamplerConfig,
                          seed: int, *, model: TokenDenoiser,
                          sched: NoiseSchedule,
                          spatial: tuple[int, int]) -> Tensor:
    """Deterministic implicit sampling of one global feature (C'', H'', W'')."""
    if model.num_classes == 0:
        if condition is not None:
            raise ValueError("model was built without a condition vocabulary")
        if sampler.guidance_scale != 1.0:
            raise ValueError("guidance requested with no condition vocabulary")
    g = generator_for(seed)
    zt = torch.randn(model.seq_len, model.channels, generator=g)
    with torch.no_grad():
        for t, t_prev in ddim_timestep_pairs(sched.T, sampler.steps):
            if sampler.guidance_scale == 1.0:
                eps = model(zt, t, condition)
            elif sampler.guidance_scale == 0.0:
                eps = model(zt, t, None)
            else:
                eps = cfg_combine(model(zt, t, None), model(zt, t, condition),
                                  sampler.guidance_scale)
            fresh = None
            if sampler.eta > 0 and t_prev > 0:
                fresh = torch.randn(zt.shape, generator=g)
            zt = ddim_step(zt, eps, t, t_prev, sampler.eta, sched,
                           fresh).to(torch.float32)
    return unflatten_global(zt, spatial)
