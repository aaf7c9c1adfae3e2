"""Overfit the network on a small generated toy set, then report the
metrics, the one-arm occlusion study and both robustness sweeps.

    python3 scripts/overfit_study.py --out-dir runs/overfit
    python3 scripts/overfit_study.py --steps 500 --set weight.orth=1   # quick look
"""
import argparse
import time
from dataclasses import asdict

from pcmesh.body import make_toy_model
from pcmesh.experiments import LEFT_ARM, OverfitConfig, occlusion_study, overfit_run, part_indices, robustness_sweeps
from pcmesh.losses import LossWeights
from pcmesh.pipeline import evaluate
from pcmesh.synth import save_shard


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out-dir", default="runs/overfit")
    p.add_argument("--steps", type=int, default=OverfitConfig.steps)
    p.add_argument("--samples", type=int, default=OverfitConfig.num_samples)
    p.add_argument("--points", type=int, default=OverfitConfig.points)
    p.add_argument("--grad-accum", type=int, default=OverfitConfig.grad_accum)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", default=[], metavar="weight.NAME=VALUE")
    p.add_argument("--skip-sweeps", action="store_true")
    args = p.parse_args()

    weights = asdict(OverfitConfig().weights)
    for kv in args.set:
        key, value = kv.split("=", 1)
        weights[key.removeprefix("weight.")] = float(value)
    cfg = OverfitConfig(num_samples=args.samples, points=args.points, steps=args.steps, seed=args.seed,
                        grad_accum=args.grad_accum, weights=LossWeights(**weights))
    body = make_toy_model(16, 400)

    t0 = time.time()
    result, samples = overfit_run(body, cfg, args.out_dir)
    save_shard(f"{args.out_dir}/train.vhmr", samples)
    for line in result.log_lines:
        print(line)
    print(f"train_seconds={time.time() - t0:.1f} checkpoint={result.checkpoint}")

    print(evaluate(result.net, samples)[0].line())
    print(occlusion_study(result.net, samples, part_indices(body, LEFT_ARM), cfg.points).line())
    if not args.skip_sweeps:
        noise, points = robustness_sweeps(result.net, samples, cfg.points)
        for row in noise + points:
            print(row.line())


if __name__ == "__main__":
    main()
