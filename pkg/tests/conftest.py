import numpy as np
import pytest
import torch

from glovid import data
from glovid.config import RunConfig


@pytest.fixture(scope="session")
def tiny_cfg() -> RunConfig:
    """Smallest config that exercises every module: 32x32 clips, 8x8 latents."""
    return RunConfig(
        frames=8, image_size=32, f_frame=4, f_video=2, K=3, C_out=4,
        enc_width=16, enc_heads=2,
        dec_width=16, dec_mult=(1, 2), dec_attn=(4,), dec_heads=2,
        disc_width=16, disc_heads=2,
        T=100, batch_size=2, gen_batch_size=4,
        gen_width=32, gen_depth=2, gen_heads=2,
        num_classes=8, ddim_steps=8, seed=11,
    ).validate()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_cfg):
    root = tmp_path_factory.mktemp("tiny_data")
    data.synth_dataset(root, num_videos=24, frames=tiny_cfg.frames,
                       size=tiny_cfg.image_size, seed=3)
    return data.SpriteDataset(root)


@pytest.fixture()
def rng() -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(1234)
    return g


def random_frames(n: int, size: int, seed: int) -> np.ndarray:
    r = np.random.default_rng(seed)
    return r.integers(0, 256, size=(n, size, size, 3), dtype=np.uint8)
