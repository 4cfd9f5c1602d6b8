"""Run configuration: one flat dataclass, readable from key = value text files.

Derived sizes (latent resolution, global-feature resolution, latent channel
count) are properties so a config is the single source of truth for shapes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path


@dataclass
class RunConfig:
    # data
    frames: int = 16
    image_size: int = 64
    num_classes: int = 8
    val_fraction: float = 0.1

    # frame codec
    codec_mode: str = "deterministic"   # "deterministic" | "learned"
    f_frame: int = 4
    codec_channels: int = 4             # latent channels in learned mode
    codec_width: int = 32
    codec_pretrain_steps: int = 1500
    codec_lr: float = 2e-3

    # video encoder
    K: int = 4
    f_video: int = 2
    enc_width: int = 64
    C_out: int = 8
    enc_heads: int = 4

    # video decoder; width must cover the latent channel count or noise
    # prediction hits a rank bottleneck at high timesteps
    dec_width: int = 64
    dec_mult: tuple[int, ...] = (1, 2, 4)
    dec_attn: tuple[int, ...] = (8, 4)
    dec_heads: int = 4

    # discriminator
    disc_width: int = 24
    disc_heads: int = 4

    # diffusion schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    # stage-1 training
    lambda1: float = 1e-6
    lambda2: float = 0.1
    lr: float = 1e-3
    lr_disc: float = 1e-3
    # encoder lr multiplier: with adaptive optimizers even a tiny KL weight
    # pulls the posterior head toward a constant at ~lr speed, faster than the
    # zero-initialized conditioning pathway learns to exploit it; a slower
    # encoder wins that race
    enc_lr_mult: float = 0.1
    grad_clip: float = 1.0        # max gradient norm per update; 0 disables
    warmup_steps: int = 100       # linear lr ramp at the start of each stage
    batch_size: int = 8
    cfg_dropout: float = 0.1
    steps_ae: int = 4000

    # stage-2 training
    gen_width: int = 256
    gen_depth: int = 6
    gen_heads: int = 4
    gen_mlp_ratio: int = 4
    gen_batch_size: int = 32
    steps_gen: int = 4000

    # sampling
    ddim_steps: int = 50
    guidance_scale: float = 9.0         # global-feature generator guidance
    decoder_guidance: float = 3.0       # frame decoder guidance
    eta: float = 0.0

    seed: int = 0
    device: str = "cpu"

    @property
    def latent_size(self) -> int:
        return self.image_size // self.f_frame

    @property
    def latent_channels(self) -> int:
        if self.codec_mode == "deterministic":
            return 3 * self.f_frame * self.f_frame
        return self.codec_channels

    @property
    def global_size(self) -> int:
        return self.latent_size // self.f_video

    def validate(self) -> "RunConfig":
        if self.image_size % self.f_frame:
            raise ValueError(f"image_size {self.image_size} not divisible by "
                             f"f_frame {self.f_frame}")
        if self.latent_size % self.f_video:
            raise ValueError(f"latent size {self.latent_size} not divisible "
                             f"by f_video {self.f_video}")
        if not (1 <= self.K <= self.frames):
            raise ValueError(f"need 1 <= K <= frames, got K={self.K}")
        if self.codec_mode not in ("deterministic", "learned"):
            raise ValueError(f"unknown codec_mode {self.codec_mode!r}")
        if self.T < 1 or not (0 < self.beta_start <= self.beta_end < 1):
            raise ValueError("invalid diffusion schedule parameters")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(name: str, raw: str):
    ftype = _FIELD_TYPES[name]
    raw = raw.strip()
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    if ftype == "str":
        return raw
    if ftype.startswith("tuple"):
        return tuple(int(p) for p in raw.split(",") if p.strip())
    raise ValueError(f"unhandled field type for {name}: {ftype}")


def parse_config_file(path: str | Path) -> RunConfig:
    """Read a flat ``key = value`` file; '#' starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (p.strip() for p in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, raw)
    return RunConfig(**values).validate()


def write_config_file(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        for key, value in asdict(cfg).items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            fh.write(f"{key} = {value}\n")


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for key, value in asdict(cfg).items():
        out[key] = list(value) if isinstance(value, tuple) else value
    return out


def config_from_dict(d: dict) -> RunConfig:
    kwargs = {}
    for key, value in d.items():
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    return RunConfig(**kwargs).validate()
