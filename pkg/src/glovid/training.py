"""Two-stage training orchestration.

Stage 1 trains encoder + decoder jointly against the pair discriminator:
    L = L_rec + lambda1 * L_kl + lambda2 * L_cra_g, with one discriminator
update per auto-encoder update. Stage 2 freezes the whole auto-encoder and
fits the token generator to sampled global features.

All stochastic draws (batch composition, frame pairs, timesteps, corruption
noise, posterior noise, condition dropout) come from one torch.Generator per
state, whose bytes go into checkpoints, so an interrupted run resumes onto
the exact loss trajectory of an uninterrupted one.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .codec import Codec, ConvCodec, build_codec, pretrain_codec
from .config import RunConfig, config_from_dict, config_to_dict
from .data import SpriteDataset, frames_to_unit
from .decoder import DenoiserConditioning, FrameDenoiser, SamplerConfig, rec_loss, synth_frames
from .diffusion import NoiseSchedule, make_linear_schedule, predict_x0_from_noise, q_sample
from .discriminator import PairDiscriminator, cra_discriminator_loss, cra_generator_loss
from .encoder import GlobalFeaturePosterior, VideoEncoder, keyframe_indexes, kl_loss, sample_global
from .generator import TokenDenoiser, generator_train_step
from .rng import generator_for, generator_state_bytes, restore_generator

Tensor = torch.Tensor


# ---------------------------------------------------------------------------
# states


@dataclass
class AutoEncoderState:
    cfg: RunConfig
    sched: NoiseSchedule
    codec: Codec
    encoder: VideoEncoder
    denoiser: FrameDenoiser
    disc: PairDiscriminator
    opt_ae: torch.optim.Adam
    opt_disc: torch.optim.Adam
    rng: torch.Generator
    step: int = 0


@dataclass
class GeneratorState:
    cfg: RunConfig
    sched: NoiseSchedule
    codec: Codec
    encoder: VideoEncoder
    denoiser: FrameDenoiser
    generator: TokenDenoiser
    opt_gen: torch.optim.Adam
    rng: torch.Generator
    step: int = 0
    # posteriors are pure functions of a video once the encoder froze, so the
    # training loop memoizes them per dataset index
    posterior_cache: dict = field(default_factory=dict)


def _f(x: Tensor) -> float:
    return float(x.detach())


def _tuned_step(opt: torch.optim.Adam, step: int, cfg: RunConfig,
                params) -> None:
    """Clip gradients and apply the warmup-scaled learning rate, then step.

    Each param group carries its own ``base_lr``.
    """
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    scale = min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps else 1.0
    for group in opt.param_groups:
        group["lr"] = group["base_lr"] * scale
    opt.step()


def param_fingerprint(module: torch.nn.Module) -> str:
    """Order-independent SHA-256 over all named parameters and buffers."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# construction


def _build_modules(cfg: RunConfig):
    torch.manual_seed(generator_for(cfg.seed, 0xE).initial_seed())
    encoder = VideoEncoder(in_channels=cfg.latent_channels,
                           latent_size=cfg.latent_size, width=cfg.enc_width,
                           out_channels=cfg.C_out, f_video=cfg.f_video,
                           keyframes=cfg.K, num_heads=cfg.enc_heads)
    torch.manual_seed(generator_for(cfg.seed, 0xD).initial_seed())
    denoiser = FrameDenoiser(in_channels=cfg.latent_channels,
                             latent_size=cfg.latent_size,
                             model_channels=cfg.dec_width,
                             channel_mult=cfg.dec_mult,
                             attn_resolutions=cfg.dec_attn,
                             num_heads=cfg.dec_heads,
                             global_channels=cfg.C_out, f_video=cfg.f_video,
                             num_classes=cfg.num_classes, num_timesteps=cfg.T)
    torch.manual_seed(generator_for(cfg.seed, 0xA).initial_seed())
    disc = PairDiscriminator(image_size=cfg.image_size, width=cfg.disc_width,
                             num_heads=cfg.disc_heads)
    return encoder, denoiser, disc


def build_autoencoder_state(cfg: RunConfig,
                            dataset: Optional[SpriteDataset] = None,
                            log_every: int = 0) -> AutoEncoderState:
    cfg.validate()
    torch.manual_seed(generator_for(cfg.seed, 0xC).initial_seed())
    codec = build_codec(cfg.codec_mode, cfg.f_frame,
                        latent_channels=cfg.codec_channels,
                        width=cfg.codec_width)
    if isinstance(codec, ConvCodec):
        if dataset is None:
            raise ValueError("the learned codec needs a dataset to pretrain on")
        pool = _frame_pool(dataset, limit=4000, seed=cfg.seed)
        pretrain_codec(codec, pool, steps=cfg.codec_pretrain_steps,
                       lr=cfg.codec_lr, batch_size=16,
                       rng=generator_for(cfg.seed, 0xB), log_every=log_every)
    encoder, denoiser, disc = _build_modules(cfg)
    sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    opt_ae = torch.optim.Adam([
        {"params": list(encoder.parameters()),
         "lr": cfg.lr * cfg.enc_lr_mult, "base_lr": cfg.lr * cfg.enc_lr_mult},
        {"params": list(denoiser.parameters()),
         "lr": cfg.lr, "base_lr": cfg.lr},
    ])
    opt_disc = torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc)
    for group in opt_disc.param_groups:
        group["base_lr"] = cfg.lr_disc
    return AutoEncoderState(cfg=cfg, sched=sched, codec=codec, encoder=encoder,
                            denoiser=denoiser, disc=disc, opt_ae=opt_ae,
                            opt_disc=opt_disc,
                            rng=generator_for(cfg.seed, 0x1))


def _frame_pool(dataset: SpriteDataset, limit: int, seed: int) -> Tensor:
    """Flatten a dataset into a (N, C, H, W) pool of unit-range frames."""
    rng = np.random.default_rng(seed)
    frames = []
    per_video = max(1, min(dataset.frames, limit // len(dataset)))
    for i in range(len(dataset)):
        video, _ = dataset[i]
        picks = rng.choice(dataset.frames, size=per_video, replace=False)
        frames.append(video[np.sort(picks)])
        if len(frames) * per_video >= limit:
            break
    return frames_to_unit(np.concatenate(frames))


# ---------------------------------------------------------------------------
# stage 1


def encode_keyframes(codec: Codec, encoder: VideoEncoder,
                     clips: Tensor, k: int) -> GlobalFeaturePosterior:
    """(B, F, C, H, W) unit-range clips -> posterior over global features."""
    idx = keyframe_indexes(clips.shape[1], k)
    latents = codec.encode(clips[:, idx])
    return encoder(latents)


def draw_frame_pair(total_frames: int, rng: torch.Generator) -> tuple[int, int]:
    """Uniform unordered pair i < j over [0, total_frames)."""
    if total_frames < 2:
        raise ValueError("need at least two frames to draw an ordered pair")
    while True:
        ij = torch.randint(0, total_frames, (2,), generator=rng)
        a, b = int(ij[0]), int(ij[1])
        if a != b:
            return (a, b) if a < b else (b, a)


def train_autoencoder_step(state: AutoEncoderState,
                           frames: np.ndarray, labels: np.ndarray) -> dict:
    """One joint update on a (B, F, H, W, C) uint8 batch.

    Discriminator first (when the adversarial weight is active), then the
    encoder/decoder on the combined objective.
    """
    cfg = state.cfg
    if frames.shape[1] < 2:
        raise ValueError("stage-1 batches need clips with at least 2 frames")
    x = frames_to_unit(frames)                     # (B, F, C, H, W)
    bsz, total = x.shape[0], x.shape[1]
    rng = state.rng

    posterior = encode_keyframes(state.codec, state.encoder, x, cfg.K)
    n = torch.randn(posterior.mean.shape, generator=rng)
    v = sample_global(posterior, n)
    loss_kl = kl_loss(posterior)

    pairs = [draw_frame_pair(total, rng) for _ in range(bsz)]
    idx_i = torch.tensor([p[0] for p in pairs])
    idx_j = torch.tensor([p[1] for p in pairs])
    batch_arange = torch.arange(bsz)

    cond = torch.as_tensor(labels, dtype=torch.long)
    drop = torch.rand(bsz, generator=rng) < cfg.cfg_dropout
    cond = torch.where(drop, torch.full_like(cond, cfg.num_classes), cond)

    # both sampled frames share one stacked forward; t and noise independent
    idx_both = torch.cat([idx_i, idx_j])
    z0 = state.codec.encode(x[batch_arange.repeat(2), idx_both])
    t = torch.randint(1, cfg.T + 1, (2 * bsz,), generator=rng)
    noise = torch.randn(z0.shape, generator=rng)
    zt = q_sample(z0, t, noise, state.sched).to(torch.float32)
    conditioning = DenoiserConditioning(t=t, frame_index=idx_both,
                                        total_frames=total,
                                        v=torch.cat([v, v]),
                                        condition=torch.cat([cond, cond]))
    eps = state.denoiser(zt, conditioning)
    loss_rec = rec_loss(eps, noise)

    loss_d = torch.zeros(())
    loss_g = torch.zeros(())
    if cfg.lambda2 > 0:
        x0 = predict_x0_from_noise(zt, t, eps, state.sched).to(torch.float32)
        fakes = state.codec.decode(x0)
        fake_i, fake_j = fakes[:bsz], fakes[bsz:]
        real_i = x[batch_arange, idx_i]
        real_j = x[batch_arange, idx_j]

        loss_d = cra_discriminator_loss(state.disc, real_i, real_j,
                                        fake_i, fake_j)
        state.opt_disc.zero_grad()
        loss_d.backward()
        _tuned_step(state.opt_disc, state.step, cfg,
                    state.disc.parameters())

        loss_g = cra_generator_loss(state.disc, real_i, real_j, fake_i, fake_j)

    total_loss = loss_rec + cfg.lambda1 * loss_kl + cfg.lambda2 * loss_g
    state.opt_ae.zero_grad()
    state.opt_disc.zero_grad()  # drop adversarial-path gradients parked on D
    total_loss.backward()
    _tuned_step(state.opt_ae, state.step, cfg,
                [p for g in state.opt_ae.param_groups for p in g["params"]])
    state.step += 1

    return {"rec": _f(loss_rec), "kl": _f(loss_kl), "cra_g": _f(loss_g),
            "cra_d": _f(loss_d), "total": _f(total_loss)}


# ---------------------------------------------------------------------------
# stage 2


def build_generator_state(cfg: RunConfig, ae: AutoEncoderState) -> GeneratorState:
    for module in (ae.encoder, ae.denoiser, ae.disc):
        for p in module.parameters():
            p.requires_grad_(False)
    if isinstance(ae.codec, ConvCodec):
        for p in ae.codec.parameters():
            p.requires_grad_(False)
    torch.manual_seed(generator_for(cfg.seed, 0xF).initial_seed())
    gen = TokenDenoiser(channels=cfg.C_out, seq_len=cfg.global_size ** 2,
                        width=cfg.gen_width, depth=cfg.gen_depth,
                        num_heads=cfg.gen_heads, mlp_ratio=cfg.gen_mlp_ratio,
                        num_classes=cfg.num_classes, num_timesteps=cfg.T)
    opt = torch.optim.Adam(gen.parameters(), lr=cfg.lr)
    for group in opt.param_groups:
        group["base_lr"] = cfg.lr
    return GeneratorState(cfg=cfg, sched=ae.sched, codec=ae.codec,
                          encoder=ae.encoder, denoiser=ae.denoiser,
                          generator=gen, opt_gen=opt,
                          rng=generator_for(cfg.seed, 0x2))


def _generator_update(state: GeneratorState, posterior: GlobalFeaturePosterior,
                      labels: np.ndarray) -> dict:
    if any(p.requires_grad for p in state.encoder.parameters()):
        raise RuntimeError("auto-encoder must be frozen before stage 2")
    n = torch.randn(posterior.mean.shape, generator=state.rng)
    v = sample_global(posterior, n)
    cond = torch.as_tensor(labels, dtype=torch.long)
    loss = generator_train_step(v, cond, state.sched, state.rng,
                                model=state.generator,
                                cfg_dropout=state.cfg.cfg_dropout)
    state.opt_gen.zero_grad()
    loss.backward()
    _tuned_step(state.opt_gen, state.step, state.cfg,
                state.generator.parameters())
    state.step += 1
    return {"gen": _f(loss)}


def train_generator_step(state: GeneratorState, frames: np.ndarray,
                         labels: np.ndarray) -> dict:
    """Fit the generator to freshly sampled global features of one batch."""
    x = frames_to_unit(frames)
    with torch.no_grad():
        posterior = encode_keyframes(state.codec, state.encoder, x, state.cfg.K)
    return _generator_update(state, GlobalFeaturePosterior(
        mean=posterior.mean.detach(), std=posterior.std.detach()), labels)


# ---------------------------------------------------------------------------
# loops


def _draw_batch(dataset: SpriteDataset, indexes: list[int], batch_size: int,
                rng: torch.Generator) -> tuple[np.ndarray, np.ndarray]:
    picks = torch.randint(0, len(indexes), (batch_size,), generator=rng)
    frames, labels = [], []
    for p in picks:
        video, label = dataset[indexes[int(p)]]
        frames.append(video)
        labels.append(label)
    return np.stack(frames), np.array(labels, dtype=np.int64)


def run_autoencoder_training(state: AutoEncoderState, dataset: SpriteDataset,
                             steps: int, train_indexes: Optional[list[int]] = None,
                             log_every: int = 0,
                             on_step: Optional[Callable[[int, dict], None]] = None,
                             ) -> list[dict]:
    idx = train_indexes if train_indexes is not None else list(range(len(dataset)))
    history = []
    for _ in range(steps):
        frames, labels = _draw_batch(dataset, idx, state.cfg.batch_size, state.rng)
        metrics = train_autoencoder_step(state, frames, labels)
        history.append(metrics)
        if on_step is not None:
            on_step(state.step, metrics)
        if log_every and state.step % log_every == 0:
            print(f"[ae {state.step}] " + " ".join(
                f"{k}={v:.4f}" for k, v in metrics.items()))
    return history


def _posterior_for(state: GeneratorState, dataset: SpriteDataset,
                   indexes: list[int]) -> GlobalFeaturePosterior:
    missing = sorted({i for i in indexes if i not in state.posterior_cache})
    if missing:
        clips = frames_to_unit(np.stack([dataset[i][0] for i in missing]))
        with torch.no_grad():
            post = encode_keyframes(state.codec, state.encoder, clips,
                                    state.cfg.K)
        for n, i in enumerate(missing):
            state.posterior_cache[i] = (post.mean[n], post.std[n])
    mean = torch.stack([state.posterior_cache[i][0] for i in indexes])
    std = torch.stack([state.posterior_cache[i][1] for i in indexes])
    return GlobalFeaturePosterior(mean=mean, std=std)


def run_generator_training(state: GeneratorState, dataset: SpriteDataset,
                           steps: int, train_indexes: Optional[list[int]] = None,
                           log_every: int = 0) -> list[dict]:
    idx = train_indexes if train_indexes is not None else list(range(len(dataset)))
    before = param_fingerprint(state.encoder), param_fingerprint(state.denoiser)
    history = []
    for _ in range(steps):
        picks = torch.randint(0, len(idx), (state.cfg.gen_batch_size,),
                              generator=state.rng)
        chosen = [idx[int(p)] for p in picks]
        posterior = _posterior_for(state, dataset, chosen)
        labels = np.array([dataset.entries[i][1] for i in chosen], dtype=np.int64)
        metrics = _generator_update(state, posterior, labels)
        history.append(metrics)
        if log_every and state.step % log_every == 0:
            print(f"[gen {state.step}] gen={metrics['gen']:.4f}")
    after = param_fingerprint(state.encoder), param_fingerprint(state.denoiser)
    if before != after:
        raise RuntimeError("auto-encoder parameters changed during stage 2")
    return history


# ---------------------------------------------------------------------------
# evaluation helpers


def reconstruct_clip(state: AutoEncoderState | GeneratorState,
                     frames: np.ndarray, label: Optional[int],
                     sampler: Optional[SamplerConfig] = None,
                     seed: int = 0) -> Tensor:
    """Encode a clip, then decode every frame from the posterior mean."""
    cfg = state.cfg
    sampler = sampler or SamplerConfig(steps=cfg.ddim_steps,
                                       guidance_scale=cfg.decoder_guidance,
                                       eta=cfg.eta)
    x = frames_to_unit(frames)[None]
    with torch.no_grad():
        posterior = encode_keyframes(state.codec, state.encoder, x, cfg.K)
    total = frames.shape[0]
    return synth_frames(state.denoiser, state.codec, state.sched,
                        posterior.mean[0], list(range(total)), total,
                        label, sampler, seed)


# ---------------------------------------------------------------------------
# persistence


def _module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for name, tensor in module.state_dict().items():
        out[f"{prefix}.{name}"] = tensor.detach().cpu().numpy().copy()
    return out


def _load_module(prefix: str, module: torch.nn.Module,
                 arrays: dict[str, np.ndarray]) -> None:
    state = {}
    for name, tensor in module.state_dict().items():
        key = f"{prefix}.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing array {key!r}")
        state[name] = torch.from_numpy(arrays[key].copy()).to(tensor.dtype)
    module.load_state_dict(state)


def _opt_param_names(modules: list[tuple[str, torch.nn.Module]]) -> list[str]:
    names = []
    for prefix, module in modules:
        names.extend(f"{prefix}.{n}" for n, _ in module.named_parameters())
    return names


def _optimizer_arrays(prefix: str, opt: torch.optim.Adam,
                      names: list[str]) -> dict[str, np.ndarray]:
    out = {}
    sd = opt.state_dict()
    for idx, name in enumerate(names):
        st = sd["state"].get(idx)
        if not st:
            continue
        out[f"{prefix}.{name}.step"] = np.array(float(st["step"]), dtype=np.float64)
        out[f"{prefix}.{name}.exp_avg"] = st["exp_avg"].detach().cpu().numpy().copy()
        out[f"{prefix}.{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy().copy()
    return out


def _load_optimizer(prefix: str, opt: torch.optim.Adam, names: list[str],
                    arrays: dict[str, np.ndarray]) -> None:
    sd = opt.state_dict()
    state = {}
    for idx, name in enumerate(names):
        key = f"{prefix}.{name}"
        if f"{key}.step" not in arrays:
            continue
        state[idx] = {
            "step": torch.tensor(float(arrays[f"{key}.step"])),
            "exp_avg": torch.from_numpy(arrays[f"{key}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"{key}.exp_avg_sq"].copy()),
        }
    opt.load_state_dict({"state": state, "param_groups": sd["param_groups"]})


def _ae_modules(state: AutoEncoderState) -> list[tuple[str, torch.nn.Module]]:
    mods = [("encoder", state.encoder), ("denoiser", state.denoiser),
            ("disc", state.disc)]
    if isinstance(state.codec, ConvCodec):
        mods.append(("codec", state.codec))
    return mods


def save_autoencoder(state: AutoEncoderState, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for prefix, module in _ae_modules(state):
        arrays.update(_module_arrays(prefix, module))
    ae_names = _opt_param_names([("encoder", state.encoder),
                                 ("denoiser", state.denoiser)])
    arrays.update(_optimizer_arrays("opt_ae", state.opt_ae, ae_names))
    disc_names = _opt_param_names([("disc", state.disc)])
    arrays.update(_optimizer_arrays("opt_disc", state.opt_disc, disc_names))
    save_checkpoint(path, kind="autoencoder",
                    config=config_to_dict(state.cfg), step=state.step,
                    rng_state=generator_state_bytes(state.rng), arrays=arrays)


def load_autoencoder(path) -> AutoEncoderState:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "autoencoder":
        raise CheckpointError(f"expected an autoencoder checkpoint, got "
                              f"{ckpt.kind!r}")
    cfg = config_from_dict(ckpt.config)
    sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    codec = build_codec(cfg.codec_mode, cfg.f_frame,
                        latent_channels=cfg.codec_channels, width=cfg.codec_width)
    encoder, denoiser, disc = _build_modules(cfg)
    opt_ae = torch.optim.Adam([
        {"params": list(encoder.parameters()),
         "lr": cfg.lr * cfg.enc_lr_mult, "base_lr": cfg.lr * cfg.enc_lr_mult},
        {"params": list(denoiser.parameters()),
         "lr": cfg.lr, "base_lr": cfg.lr},
    ])
    opt_disc = torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc)
    for group in opt_disc.param_groups:
        group["base_lr"] = cfg.lr_disc
    state = AutoEncoderState(
        cfg=cfg, sched=sched, codec=codec, encoder=encoder, denoiser=denoiser,
        disc=disc, opt_ae=opt_ae, opt_disc=opt_disc,
        rng=restore_generator(ckpt.rng_state), step=ckpt.step)
    for prefix, module in _ae_modules(state):
        _load_module(prefix, module, ckpt.arrays)
    _load_optimizer("opt_ae", state.opt_ae,
                    _opt_param_names([("encoder", encoder),
                                      ("denoiser", denoiser)]), ckpt.arrays)
    _load_optimizer("opt_disc", state.opt_disc,
                    _opt_param_names([("disc", disc)]), ckpt.arrays)
    return state


def save_generator(state: GeneratorState, path) -> None:
    arrays = _module_arrays("generator", state.generator)
    names = _opt_param_names([("generator", state.generator)])
    arrays.update(_optimizer_arrays("opt_gen", state.opt_gen, names))
    save_checkpoint(path, kind="generator", config=config_to_dict(state.cfg),
                    step=state.step,
                    rng_state=generator_state_bytes(state.rng), arrays=arrays)


def load_generator(path, ae: AutoEncoderState) -> GeneratorState:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "generator":
        raise CheckpointError(f"expected a generator checkpoint, got "
                              f"{ckpt.kind!r}")
    cfg = config_from_dict(ckpt.config)
    state = build_generator_state(cfg, ae)
    _load_module("generator", state.generator, ckpt.arrays)
    _load_optimizer("opt_gen", state.opt_gen,
                    _opt_param_names([("generator", state.generator)]),
                    ckpt.arrays)
    state.rng = restore_generator(ckpt.rng_state)
    state.step = ckpt.step
    return state
