"""Command-line entry point: ``densematch <subcommand>``.

Exit codes: 0 success, 1 contract/format error, 2 numeric error.
"""
from __future__ import annotations

import os

# single-threaded BLAS keeps every run byte-reproducible
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from .errors import ContractError, NumericError  # noqa: E402

log = logging.getLogger("densematch")


def _load_cfg(args):
    from .harness.config import TrainConfig, apply_overrides, load_config

    cfg = load_config(args.config) if args.config else TrainConfig()
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise ContractError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return apply_overrides(cfg, pairs) if pairs else cfg


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(seed=args.seed, scale=args.scale)
    for r in results:
        print(r.line())
    return 0 if all(r.ok for r in results) else 1


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_sweep

    res = run_sweep(seeds=range(args.seeds), include_e2e=not args.no_e2e)
    for name, err in res.worst.items():
        flag = "PASS" if err <= res.tol[name] else "FAIL"
        print(f"{flag} {name}: max_rel_err={err:.3e} tol={res.tol[name]:g}")
    print(f"seeds={args.seeds} seconds={res.seconds:.1f}")
    if res.failures:
        raise NumericError(f"gradient check failed for {', '.join(res.failures)}")
    return 0


def cmd_train(args) -> int:
    from .harness.train import train

    cfg = _load_cfg(args)
    res = train(cfg, checkpoint_path=args.out, log_path=args.log, progress=args.progress)
    if res.losses:
        print(f"steps={len(res.losses)} first_loss={res.losses[0]:.6f} final_loss={res.losses[-1]:.6f}")
    else:
        print("steps=0")
    return 0


def cmd_eval(args) -> int:
    from .harness.train import evaluate, format_report
    from .pyramid import read_checkpoint

    cfg = _load_cfg(args)
    net = read_checkpoint(args.checkpoint, precision=cfg.precision)
    report = format_report(evaluate(net, cfg.eval))
    if args.out:
        Path(args.out).write_text(report)
    sys.stdout.write(report)
    return 0


def cmd_infer(args) -> int:
    from .flowhead import FlowField
    from .harness.formats import flow_to_ppm, read_ppm, write_flo
    from .harness.train import predict_flow
    from .pyramid import read_checkpoint

    net = read_checkpoint(args.checkpoint, precision=args.precision)
    flow = FlowField(predict_flow(net, read_ppm(args.src), read_ppm(args.dst)).astype("float32"))
    write_flo(flow, args.out)
    if args.vis:
        Path(args.vis).write_bytes(flow_to_ppm(flow, args.max_mag))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="densematch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("selftest", help="run the randomized invariant suites")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scale", type=float, default=1.0, help="multiply every suite's trial count")
    s.set_defaults(fn=cmd_selftest)

    s = sub.add_parser("gradcheck", help="finite-difference sweep over all differentiable ops")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--no-e2e", action="store_true", help="skip the end-to-end network check")
    s.set_defaults(fn=cmd_gradcheck)

    def add_cfg(s):
        s.add_argument("--config", help="key = value config file")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    s = sub.add_parser("train-synthetic", help="train on seeded synthetic warps")
    add_cfg(s)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="loss log path (step<TAB>loss)")
    s.add_argument("--progress", type=int, default=0, help="log every N steps")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="metrics on the held-out synthetic set")
    add_cfg(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", help="also write the report here")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("infer", help="flow between two P6 PPM images")
    s.add_argument("src")
    s.add_argument("dst")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help=".flo output path")
    s.add_argument("--vis", help="colour-coded flow as P6 PPM")
    s.add_argument("--max-mag", type=float, default=8.0, help="flow magnitude at full saturation")
    s.add_argument("--precision", choices=("f32", "f64"), default="f32")
    s.set_defaults(fn=cmd_infer)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "progress", 0) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 2
    except (ContractError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
