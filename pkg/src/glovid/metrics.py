"""Evaluation metrics: PSNR, Frechet feature distance, decode-scaling benchmark."""

from __future__ import annotations

import resource
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import torch

from .decoder import SamplerConfig, synth_frames

PSNR_CAP_DB = 99.0
_COV_JITTER = 1e-6


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 * log10(255^2 / MSE) for arrays in [0, 255]; capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(255.0 ** 2 / mse), PSNR_CAP_DB)


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    Covariances get a 1e-6 diagonal jitter so near-singular sets stay
    well-posed.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must be (N, d) with one d")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 vectors per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False) + _COV_JITTER * np.eye(a.shape[1])
    cov_b = np.cov(b, rowvar=False) + _COV_JITTER * np.eye(b.shape[1])
    covmean = scipy.linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a + cov_b - 2.0 * covmean))


@dataclass(frozen=True)
class BenchRow:
    frames: int
    seconds: float
    peak_rss_mb: float


def _peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def scaling_benchmark(denoiser, codec, sched, v: torch.Tensor,
                      frame_counts: Sequence[int], sampler: SamplerConfig,
                      seed: int = 0, condition: Optional[int] = None,
                      verify_consistency: bool = True) -> list[BenchRow]:
    """Wall time and peak RSS for decoding F frames from one global feature.

    With ``verify_consistency`` the smallest count is decoded a second time
    frame by frame and compared bit-for-bit against the batched result.
    """
    rows = []
    for count in frame_counts:
        t0 = time.perf_counter()
        batched = synth_frames(denoiser, codec, sched, v, list(range(count)),
                               count, condition, sampler, seed)
        rows.append(BenchRow(frames=count,
                             seconds=time.perf_counter() - t0,
                             peak_rss_mb=_peak_rss_mb()))
        if verify_consistency and count == min(frame_counts):
            for j in range(count):
                solo = synth_frames(denoiser, codec, sched, v, [j], count,
                                    condition, sampler, seed)
                if not torch.equal(solo[0], batched[j]):
                    raise AssertionError(
                        f"frame {j} differs between solo and batched decode")
    return rows
