#!/usr/bin/env python3
"""Run the full desk-scale experiment through the CLI: synthesize sprites,
train both stages, sample conditional videos, and write evaluation/benchmark
reports. Everything lands under one work directory.

    python scripts/toy_pipeline.py --workdir runs/toy --steps-ae 3000 \
        --steps-gen 5000 --num-videos 500
"""

import argparse
import sys
from pathlib import Path

from glovid.cli import main as glovid
from glovid.config import RunConfig, write_config_file


def run(argv: list[str]) -> None:
    print(f"$ glovid {' '.join(argv)}", flush=True)
    rc = glovid(argv)
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="runs/toy")
    parser.add_argument("--num-videos", type=int, default=500)
    parser.add_argument("--steps-ae", type=int, default=3000)
    parser.add_argument("--steps-gen", type=int, default=5000)
    parser.add_argument("--num-samples", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--no-cra", action="store_true",
                        help="ablate the adversarial term")
    args = parser.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    cfg = RunConfig(seed=args.seed, steps_ae=args.steps_ae,
                    steps_gen=args.steps_gen)
    cfg_path = work / "run.cfg"
    write_config_file(cfg, cfg_path)

    data_dir = work / "data"
    ae = work / "ae.ckpt"
    gen = work / "gen.ckpt"

    run(["synth-data", "--out", str(data_dir), "--num", str(args.num_videos),
         "--frames", str(cfg.frames), "--size", str(cfg.image_size),
         "--seed", str(args.seed)])
    train_ae = ["train-ae", "--config", str(cfg_path), "--data", str(data_dir),
                "--out", str(ae), "--log-every", "200"]
    if args.no_cra:
        train_ae.append("--no-cra")
    run(train_ae)
    run(["train-gen", "--config", str(cfg_path), "--ae", str(ae),
         "--data", str(data_dir), "--out", str(gen), "--log-every", "500"])
    run(["sample", "--ae", str(ae), "--gen", str(gen), "--class", "0",
         "--frames", f"0..{cfg.frames - 1}", "--steps", str(cfg.ddim_steps),
         "--guidance", str(cfg.guidance_scale),
         "--decoder-guidance", str(cfg.decoder_guidance),
         "--seed", str(args.seed), "--num", str(args.num_samples),
         "--out", str(work / "samples")])
    run(["eval", "--ae", str(ae), "--gen", str(gen), "--data", str(data_dir),
         "--report", str(work / "eval_report.txt"),
         "--num-samples", str(args.num_samples)])
    run(["bench", "--ae", str(ae), "--gen", str(gen),
         "--frame-counts", "16,32,64", "--report", str(work / "bench_report.txt")])
    print(f"\nall artifacts in {work}/")


if __name__ == "__main__":
    main()
