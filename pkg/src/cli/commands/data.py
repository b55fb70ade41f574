import argparse

from ...landmarks.service import LandmarkService
from ...landmarks.types import PhantomSpec
from ..options import add_common, resolve


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("phantom", help="Generate a synthetic phantom cohort")
    add_common(p)
    p.add_argument("--n", type=int, default=8, help="Number of subjects")
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--grid-size", type=int, default=None)
    p.add_argument("--landmarks", type=int, default=None)
    p.add_argument("--contrast", choices=["identity", "gamma", "rc"], default=None)
    p.set_defaults(handler=cmd_phantom)


def cmd_phantom(args: argparse.Namespace, svc: LandmarkService) -> int:
    """Template, subjects and manifest.json under --out-dir"""
    overrides = {"grid_size": args.grid_size, "landmarks": args.landmarks, "contrast": args.contrast}
    spec, run = resolve(PhantomSpec, svc, args, overrides)
    run.options.update({"n": args.n, "test_fraction": args.test_fraction})
    manifest = svc.generate_cohort(spec, args.n, args.out_dir, args.test_fraction, run=run)
    print(f"manifest={manifest}")
    return 0
