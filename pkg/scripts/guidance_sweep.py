#!/usr/bin/env python3
"""Sweep the generator guidance scale and report the toy Frechet distance of
each sampled set against held-out real clips. Needs trained checkpoints from
scripts/toy_pipeline.py (or the CLI directly).

    python scripts/guidance_sweep.py --ae runs/toy/ae.ckpt \
        --gen runs/toy/gen.ckpt --data runs/toy/data --scales 0,1,3,9
"""

import argparse

from glovid import metrics, probes, training
from glovid.data import SpriteDataset, unit_to_frames
from glovid.decoder import SamplerConfig, synth_frames
from glovid.generator import sample_global_feature


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--ae", required=True)
    parser.add_argument("--gen", required=True)
    parser.add_argument("--data", required=True)
    parser.add_argument("--scales", default="0,1,9")
    parser.add_argument("--num-samples", type=int, default=16)
    parser.add_argument("--seed", type=int, default=100)
    args = parser.parse_args()

    ae = training.load_autoencoder(args.ae)
    gen = training.load_generator(args.gen, ae)
    cfg = ae.cfg
    dataset = SpriteDataset(args.data)
    train_idx, val_idx = dataset.split(cfg.val_fraction)

    feature_net = probes.train_feature_net(dataset, train_idx,
                                           cfg.num_classes, cfg.seed)
    real = probes.extract_features(feature_net,
                                   [dataset[i][0] for i in val_idx])

    dec_sampler = SamplerConfig(steps=cfg.ddim_steps,
                                guidance_scale=cfg.decoder_guidance)
    for scale in (float(s) for s in args.scales.split(",")):
        videos = []
        for n in range(args.num_samples):
            condition = n % cfg.num_classes
            v = sample_global_feature(
                condition, SamplerConfig(steps=cfg.ddim_steps,
                                         guidance_scale=scale),
                args.seed + n, model=gen.generator, sched=gen.sched,
                spatial=(cfg.global_size, cfg.global_size))
            frames = synth_frames(ae.denoiser, ae.codec, ae.sched, v,
                                  list(range(cfg.frames)), cfg.frames,
                                  condition, dec_sampler, args.seed + n)
            videos.append(unit_to_frames(frames))
        fd = metrics.frechet_distance(
            real, probes.extract_features(feature_net, videos))
        print(f"guidance {scale:>4.1f}: frechet_distance {fd:.4f}", flush=True)


if __name__ == "__main__":
    main()
