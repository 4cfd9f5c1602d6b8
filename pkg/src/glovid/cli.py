"""Command-line entry points: data synthesis, both training stages, sampling,
evaluation, and the decode-scaling benchmark.

Exit codes: 0 on success, 1 for usage errors, 2 for runtime/IO failures.
Reports are plain text, one ``name<TAB>value`` per line.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from . import data, metrics, probes, training
from .checkpoint import CheckpointError
from .config import RunConfig, parse_config_file
from .decoder import SamplerConfig, synth_frames
from .generator import sample_global_feature


class UsageError(ValueError):
    """Bad flag values or incompatible argument combinations (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_frames(spec: str, total: int) -> list[int]:
    """Accept '0..15' ranges (inclusive) or comma-separated indexes."""
    spec = spec.strip()
    try:
        if ".." in spec:
            lo, hi = spec.split("..", 1)
            idx = list(range(int(lo), int(hi) + 1))
        else:
            idx = [int(p) for p in spec.split(",") if p.strip()]
    except ValueError as err:
        raise UsageError(f"cannot parse frame spec {spec!r}: {err}") from err
    if not idx:
        raise UsageError(f"no frame indexes in {spec!r}")
    for i in idx:
        if not (0 <= i < total):
            raise UsageError(f"frame index {i} out of range [0, {total})")
    return idx


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        return parse_config_file(path)
    except ValueError as err:
        raise UsageError(str(err)) from err


def _write_report(path: str, rows: list[tuple[str, object]]) -> None:
    with open(path, "w") as fh:
        for name, value in rows:
            fh.write(f"{name}\t{value}\n")
    for name, value in rows:
        print(f"{name}\t{value}")


def _png_grid(frames: np.ndarray, path: Path) -> None:
    from PIL import Image

    count = frames.shape[0]
    cols = min(count, 8)
    rows = (count + cols - 1) // cols
    h, w = frames.shape[1:3]
    grid = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for n in range(count):
        r, c = divmod(n, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = frames[n]
    Image.fromarray(grid).save(path)


def _load_pipeline(ae_path: str, gen_path: str | None):
    ae = training.load_autoencoder(ae_path)
    gen = training.load_generator(gen_path, ae) if gen_path else None
    return ae, gen


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    entries = data.synth_dataset(args.out, num_videos=args.num,
                                 frames=args.frames, size=args.size,
                                 seed=args.seed)
    print(f"wrote {len(entries)} videos to {args.out}")
    return 0


def cmd_train_ae(args) -> int:
    cfg = _load_config(args.config)
    if args.no_cra:
        cfg.lambda2 = 0.0
    dataset = data.SpriteDataset(args.data)
    train_idx, _ = dataset.split(cfg.val_fraction)
    state = training.build_autoencoder_state(cfg, dataset,
                                             log_every=args.log_every)
    steps = args.steps if args.steps is not None else cfg.steps_ae
    training.run_autoencoder_training(state, dataset, steps, train_idx,
                                      log_every=args.log_every)
    training.save_autoencoder(state, args.out)
    print(f"saved auto-encoder checkpoint to {args.out} after {state.step} steps")
    return 0


def cmd_train_gen(args) -> int:
    ae = training.load_autoencoder(args.ae)
    cfg = _load_config(args.config) if args.config else ae.cfg
    for key in ("image_size", "f_frame", "f_video", "K", "C_out", "codec_mode"):
        if getattr(cfg, key) != getattr(ae.cfg, key):
            raise UsageError(f"config {key} disagrees with the auto-encoder "
                             f"checkpoint ({getattr(cfg, key)} vs "
                             f"{getattr(ae.cfg, key)})")
    dataset = data.SpriteDataset(args.data)
    train_idx, _ = dataset.split(cfg.val_fraction)
    state = training.build_generator_state(cfg, ae)
    steps = args.steps if args.steps is not None else cfg.steps_gen
    training.run_generator_training(state, dataset, steps, train_idx,
                                    log_every=args.log_every)
    training.save_generator(state, args.out)
    print(f"saved generator checkpoint to {args.out} after {state.step} steps")
    return 0


def cmd_sample(args) -> int:
    ae, gen = _load_pipeline(args.ae, args.gen)
    cfg = ae.cfg
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    indexes = _parse_frames(args.frames, cfg.frames)
    gen_sampler = SamplerConfig(steps=args.steps, guidance_scale=args.guidance)
    dec_sampler = SamplerConfig(steps=args.steps,
                                guidance_scale=args.decoder_guidance)
    for n in range(args.num):
        seed = args.seed + n
        condition = args.cls
        v = sample_global_feature(condition, gen_sampler, seed,
                                  model=gen.generator, sched=gen.sched,
                                  spatial=(cfg.global_size, cfg.global_size))
        frames = synth_frames(ae.denoiser, ae.codec, ae.sched, v, indexes,
                              cfg.frames, condition, dec_sampler, seed)
        pixels = data.unit_to_frames(frames)
        label = condition if condition is not None else 0
        data.write_video_container(out / f"{n:05d}.glbv", pixels, label)
        _png_grid(pixels, out / f"{n:05d}.png")
    print(f"wrote {args.num} videos to {out}")
    return 0


def _sample_videos(ae, gen, num: int, seed: int, conditional: bool) -> tuple[list, list]:
    cfg = ae.cfg
    gen_sampler = SamplerConfig(steps=cfg.ddim_steps,
                                guidance_scale=cfg.guidance_scale)
    dec_sampler = SamplerConfig(steps=cfg.ddim_steps,
                                guidance_scale=cfg.decoder_guidance)
    videos, conds = [], []
    for n in range(num):
        condition = n % cfg.num_classes if conditional else None
        v = sample_global_feature(condition, gen_sampler, seed + n,
                                  model=gen.generator, sched=gen.sched,
                                  spatial=(cfg.global_size, cfg.global_size))
        frames = synth_frames(ae.denoiser, ae.codec, ae.sched, v,
                              list(range(cfg.frames)), cfg.frames, condition,
                              dec_sampler, seed + n)
        videos.append(data.unit_to_frames(frames))
        conds.append(condition)
    return videos, conds


def cmd_eval(args) -> int:
    ae, gen = _load_pipeline(args.ae, args.gen)
    cfg = ae.cfg
    dataset = data.SpriteDataset(args.data)
    train_idx, val_idx = dataset.split(cfg.val_fraction)

    rows: list[tuple[str, object]] = []

    recon = []
    for i in val_idx[:args.num_recon]:
        video, label = dataset[i]
        decoded = training.reconstruct_clip(ae, video, label, seed=cfg.seed)
        recon.append(metrics.psnr(data.unit_to_frames(decoded), video))
    rows += [("recon_psnr_mean", f"{np.mean(recon):.4f}"),
             ("recon_psnr_min", f"{np.min(recon):.4f}"),
             ("recon_psnr_max", f"{np.max(recon):.4f}")]

    feature_net = probes.train_feature_net(dataset, train_idx,
                                           cfg.num_classes, cfg.seed,
                                           steps=args.probe_steps)
    order_probe = probes.train_order_probe(dataset, train_idx, cfg.seed,
                                           steps=args.probe_steps)

    videos, conds = _sample_videos(ae, gen, args.num_samples, cfg.seed,
                                   conditional=cfg.num_classes > 0)
    # real reference set: held-out clips first, topped up from the train split
    real_pool = val_idx + train_idx[::-1]
    real = [dataset[i][0] for i in real_pool[:max(len(videos), 8)]]
    fd = metrics.frechet_distance(
        probes.extract_features(feature_net, real),
        probes.extract_features(feature_net, videos))
    rows.append(("frechet_distance", f"{fd:.4f}"))

    coherence = probes.order_coherence(order_probe, videos, seed=cfg.seed)
    rows.append(("order_coherence", f"{coherence:.4f}"))

    if conds[0] is not None:
        hits = sum(int(data.dominant_direction(v) == c)
                   for v, c in zip(videos, conds))
        rows.append(("direction_accuracy", f"{hits / len(videos):.4f}"))

    _write_report(args.report, rows)
    return 0


def cmd_bench(args) -> int:
    ae, gen = _load_pipeline(args.ae, args.gen)
    cfg = ae.cfg
    counts = [int(p) for p in args.frame_counts.split(",") if p.strip()]
    v = sample_global_feature(None,
                              SamplerConfig(steps=cfg.ddim_steps,
                                            guidance_scale=0.0),
                              args.seed, model=gen.generator, sched=gen.sched,
                              spatial=(cfg.global_size, cfg.global_size))
    sampler = SamplerConfig(steps=cfg.ddim_steps, guidance_scale=1.0)
    rows = metrics.scaling_benchmark(ae.denoiser, ae.codec, ae.sched, v,
                                     counts, sampler, seed=args.seed)
    report = []
    for row in rows:
        report.append((f"seconds_f{row.frames}", f"{row.seconds:.4f}"))
        report.append((f"peak_rss_mb_f{row.frames}", f"{row.peak_rss_mb:.1f}"))
    _write_report(args.report, report)
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="glovid")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic sprite dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, default=500)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-ae", help="stage 1: train the video auto-encoder")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-cra", action="store_true",
                   help="drop the adversarial term (ablation)")
    p.add_argument("--steps", type=int)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("train-gen", help="stage 2: train the global-feature generator")
    p.add_argument("--config")
    p.add_argument("--ae", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_gen)

    p = sub.add_parser("sample", help="generate videos from trained checkpoints")
    p.add_argument("--ae", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--class", dest="cls", type=int, default=None)
    p.add_argument("--frames", default="0..15")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=9.0)
    p.add_argument("--decoder-guidance", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="reconstruction, Frechet and coherence report")
    p.add_argument("--ae", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--num-samples", type=int, default=32)
    p.add_argument("--num-recon", type=int, default=16)
    p.add_argument("--probe-steps", type=int, default=400)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="decode-time scaling benchmark")
    p.add_argument("--ae", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--frame-counts", default="16,32,64")
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"glovid: error: {err}", file=sys.stderr)
        return 1
    except (OSError, CheckpointError, ValueError, RuntimeError,
            data.ContainerError) as err:
        print(f"glovid: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
