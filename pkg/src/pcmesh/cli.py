"""Command-line entry point: ``pcmesh {generate,train,eval,infer,gradcheck}``.

Every command prints ``key=value`` lines on stdout.  Failures print a
``status=error kind=...`` diagnostic on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .archive import ArchiveError
from .body import save_body_model
from .meshio import PointCloudParseError
from .pipeline import (
    THREADS_ENV,
    PipelineError,
    evaluate,
    infer,
    load_checkpoint,
    load_config,
    load_dataset,
    resolve_body,
    train,
)
from .synth import GenerateConfig, generate_dataset, save_shard

EXIT_FAILURE = 1
EXIT_USAGE = 2


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcmesh", description="Body-mesh recovery from partial point clouds.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset shard")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--model-asset", help="body-model asset archive")
    src.add_argument("--toy", default="16:400", help="toy body as JOINTS:VERTICES[:SEED] (default 16:400)")
    g.add_argument("--num-samples", type=int, default=64)
    g.add_argument("--points", type=int, default=2500)
    g.add_argument("--noise-sigma", type=float, default=10.0, help="Gaussian noise std in millimeters")
    g.add_argument("--cameras", type=int, default=1, help="views per body")
    g.add_argument("--resolution", default="160x120", help="depth image WxH")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--save-body", help="also write the body model as an asset archive")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train from a dataset shard")
    _config_flags(t)
    t.add_argument("--resume", help="continue from a checkpoint (parameters and optimizer state)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset shard")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--noise-sigma-list", type=_float_list, help="comma-separated noise levels in mm")
    e.add_argument("--points-list", type=_int_list, help="comma-separated point counts")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--records", help="write per-sample records (one line each) to this file")
    e.add_argument("--body", help="expected body (toy:K:M or asset path); dims are checked")

    i = sub.add_parser("infer", help="reconstruct a mesh from a text point cloud")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, help="text file, one 'x y z' per line (meters)")
    i.add_argument("--out-dir", required=True)
    i.add_argument("--format", choices=("obj", "ply"), default="obj")
    i.add_argument("--points", type=int, help="resample to this many points (default: training N)")
    i.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--skip-pipeline", action="store_true")
    return p


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file; flags below override it")
    p.add_argument("--data", dest="train_data")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--log-every", type=int)
    p.add_argument("--grad-accum", type=int)
    p.add_argument("--body")
    p.add_argument("--max-neighbors", type=int)
    p.add_argument("--param-supervision", choices=("on", "off"))
    p.add_argument("--resample", choices=("on", "off"), help="fresh point subset of each rendering every step")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any config key, e.g. weight.seg=2")


def _overrides(args) -> dict[str, object]:
    keys = (
        "train_data", "out_dir", "seed", "points", "lr", "steps", "checkpoint_every",
        "log_every", "grad_accum", "body", "max_neighbors", "param_supervision", "resample",
    )
    out: dict[str, object] = {}
    for kv in args.set:
        if "=" not in kv:
            raise PipelineError("bad_config", f"--set expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        out[k.strip()] = v.strip()
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v if not isinstance(v, (int, float)) or isinstance(v, bool) else str(v)
    return out


def cmd_generate(args) -> int:
    body = resolve_body(args.model_asset) if args.model_asset else resolve_body("toy:" + args.toy)
    try:
        w, h = (int(v) for v in args.resolution.lower().split("x"))
    except ValueError:
        raise PipelineError("bad_config", f"resolution must be WxH, got {args.resolution!r}") from None
    cfg = GenerateConfig(
        num_samples=args.num_samples,
        points=args.points,
        noise_sigma=args.noise_sigma / 1000.0,
        cameras=args.cameras,
        seed=args.seed,
        resolution=(w, h),
    )
    if cfg.num_samples < 1 or cfg.cameras < 1 or cfg.points < 1 or cfg.noise_sigma < 0:
        raise PipelineError("bad_config", "num-samples, cameras, points must be >= 1 and noise >= 0")
    samples = generate_dataset(body, cfg)
    save_shard(args.out, samples)
    if args.save_body:
        save_body_model(args.save_body, body)
    print(f"status=ok command=generate samples={len(samples)} points={cfg.points} joints={body.num_joints} "
          f"vertices={body.num_vertices} out={args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    result = train(cfg, resume=args.resume)
    for line in result.log_lines:
        print(line)
    print(f"status=ok command=train checkpoint={result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    expect = resolve_body(args.body) if args.body else None
    ck = load_checkpoint(args.checkpoint, expect)
    samples = load_dataset(args.data, ck.net.body)
    rows = evaluate(ck.net, samples, args.noise_sigma_list, args.points_list, seed=args.seed, input_points=ck.points)
    for row in rows:
        print(row.line())
    if args.records:
        with open(args.records, "w") as fh:
            for row in rows:
                for j, rec in enumerate(row.records):
                    fh.write(" ".join([f"{k}={v}" for k, v in row.tags.items()] + [f"sample={j}"]
                                      + [f"{k}={v:.6f}" for k, v in rec.items()]) + "\n")
    print("status=ok command=eval")
    return 0


def cmd_infer(args) -> int:
    res = infer(args.checkpoint, args.input, args.out_dir, args.format, seed=args.seed, points=args.points)
    print(" ".join(f"{k}={v}" for k, v in res.files.items()))
    print(f"status=ok command=infer visible_joints={int(res.prediction.visible.sum())} "
          f"rotations_ok={json.dumps(bool(res.prediction.rotation_ok.all()))}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_op_checks, run_pipeline_check

    results = run_op_checks(args.trials, args.seed)
    for r in results:
        print(r.line(), flush=True)
    if not args.skip_pipeline:
        extra = run_pipeline_check(args.seed)
        for r in extra:
            print(r.line(), flush=True)
        results += extra
    failed = [r.name for r in results if not r.passed]
    print(f"status={'ok' if not failed else 'error'} command=gradcheck failed={len(failed)}")
    return 0 if not failed else EXIT_FAILURE


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_USAGE if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s %(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads is not None and (not threads.isdigit() or int(threads) < 1):
        print(f"status=error kind=bad_config message=\"{THREADS_ENV} must be a positive integer\"", file=sys.stderr)
        return EXIT_FAILURE
    try:
        return COMMANDS[args.command](args)
    except PipelineError as exc:
        print(exc.diagnostic(), file=sys.stderr)
    except PointCloudParseError as exc:
        print(f"status=error kind=parse_error line={exc.lineno} message={json.dumps(str(exc))}", file=sys.stderr)
    except (ArchiveError, OSError, ValueError, KeyError) as exc:
        print(f"status=error kind={type(exc).__name__} message={json.dumps(str(exc))}", file=sys.stderr)
    return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
