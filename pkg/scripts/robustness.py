"""Noise and point-count sweeps plus the one-arm occlusion study for an
existing checkpoint and dataset shard.

    python3 scripts/robustness.py runs/overfit/last.vhmr runs/overfit/train.vhmr
"""
import argparse

from pcmesh.body import make_toy_model
from pcmesh.experiments import LEFT_ARM, NOISE_SWEEP_MM, POINT_SWEEP, non_improving, occlusion_study, part_indices
from pcmesh.pipeline import evaluate, load_checkpoint, load_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    ck = load_checkpoint(args.checkpoint)
    net = ck.net
    samples = load_dataset(args.data, net.body)
    # checkpoints carry no joint names; the toy ordering is assumed
    names_body = make_toy_model(net.body.num_joints, net.body.num_vertices)
    print(occlusion_study(net, samples, part_indices(names_body, LEFT_ARM), ck.points, args.seed).line())
    for name, kwargs in (("noise", {"noise_sigmas_mm": list(NOISE_SWEEP_MM)}), ("points", {"point_counts": list(POINT_SWEEP)})):
        rows = evaluate(net, samples, seed=args.seed, input_points=ck.points, **kwargs)
        for row in rows:
            print(row.line())
        print(f"sweep={name} non_improving={non_improving(r.metrics['PVE'] for r in rows)}")


if __name__ == "__main__":
    main()
