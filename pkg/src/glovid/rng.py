"""Seed plumbing: substream derivation and generator state round-trips.

Sampling draws per-frame noise from streams keyed by (seed, frame index) so
that a frame's result never depends on which other frames were requested in
the same call.
"""

from __future__ import annotations

import torch

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix_seed(*parts: int) -> int:
    """Deterministically mix integer parts into a 63-bit seed."""
    h = _GOLDEN
    for p in parts:
        h ^= (int(p) + _GOLDEN + ((h << 6) & _MASK64) + (h >> 2)) & _MASK64
        h = (h * 0xBF58476D1CE4E5B9) & _MASK64
        h ^= h >> 31
    return h & ((1 << 63) - 1)


def generator_for(*parts: int) -> torch.Generator:
    """CPU generator seeded by a mixed key, e.g. generator_for(seed, index)."""
    g = torch.Generator(device="cpu")
    g.manual_seed(mix_seed(*parts))
    return g


def generator_state_bytes(g: torch.Generator) -> bytes:
    return bytes(g.get_state().numpy().tobytes())


def restore_generator(state: bytes) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.set_state(torch.frombuffer(bytearray(state), dtype=torch.uint8).clone())
    return g
