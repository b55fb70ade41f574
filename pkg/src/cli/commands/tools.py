import argparse
import json
from pathlib import Path

from ...config.settings import DEFAULT_SEED
from ...landmarks.errors import NumericalError
from ...landmarks.metrics import summary_line
from ...landmarks.service import LandmarkService
from ...landmarks.studies import STUDIES
from ...landmarks.types import AffineRanges, RcConfig, StudyConfig
from ..options import add_common, merge, resolve, run_config


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("warp", help="Fit a thin-plate spline between two landmark files")
    p.add_argument("--source", required=True, help="Source landmark JSON")
    p.add_argument("--target", required=True, help="Target landmark JSON")
    p.add_argument("--lam", type=float, default=0.0, help="Regularisation weight")
    p.add_argument("--kernel", choices=["squared_distance", "distance"], default="squared_distance")
    p.add_argument("--volume", default=None, help="Source-space volume to warp into target space")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_warp, config=None, seed=None)

    p = sub.add_parser("augment-preview", help="Write one augmented copy of a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--mode", choices=["rc", "affine"], required=True)
    p.add_argument("--out", required=True, help="Output volume path")
    p.add_argument("--config", default=None, help="RC or affine-range settings")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--kernel-size", type=int, choices=[1, 3, 5], default=None, help="RC kernel size")
    p.set_defaults(handler=cmd_augment_preview)

    p = sub.add_parser("selfcheck", help="Run the gradient, TPS, loss and metric oracle suites")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None, help="Also write selfcheck.json here")
    p.set_defaults(handler=cmd_selfcheck, config=None)

    p = sub.add_parser("study", help="Run a phantom experiment")
    p.add_argument("name", choices=sorted(STUDIES))
    add_common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(handler=cmd_study)


def cmd_warp(args: argparse.Namespace, svc: LandmarkService) -> int:
    run = run_config(args, {"source": args.source, "target": args.target, "lam": args.lam,
                            "kernel": args.kernel, "volume": args.volume})
    outputs = svc.warp(args.source, args.target, args.lam, args.out_dir, args.volume, args.kernel, run=run)
    print(" ".join(f"{k}={v}" for k, v in outputs.items()))
    return 0


def cmd_augment_preview(args: argparse.Namespace, svc: LandmarkService) -> int:
    args.out_dir = str(Path(args.out).parent)
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    values = svc.read_config_file(args.config)
    if args.mode == "rc":
        rc, affine = RcConfig.model_validate(merge(values, {"kernel_size": args.kernel_size})), None
    else:
        rc, affine = None, AffineRanges.model_validate(values)
    run = run_config(args, {"volume": args.volume, "mode": args.mode, "out": args.out, "kernel_size": args.kernel_size})
    path = svc.preview_augment(args.volume, args.mode, seed, args.out, rc=rc, affine=affine, run=run)
    print(f"volume={path}")
    return 0


def cmd_selfcheck(args: argparse.Namespace, svc: LandmarkService) -> int:
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    results = svc.selfcheck(seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status} suite={r.suite} check={r.name} value={r.value:.3e} tol={r.tolerance:.1e}")
    if args.out_dir is not None:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        svc.write_resolved(out, {"seed": seed}, run_config(args, {}))
        (out / "selfcheck.json").write_text(json.dumps([r.model_dump() for r in results], indent=2))
    failed = [f"{r.suite}.{r.name}" for r in results if not r.passed]
    print(f"selfcheck passed={len(results) - len(failed)} failed={len(failed)}")
    if failed:
        raise NumericalError(f"oracle checks failed: {', '.join(failed)}")
    return 0


def cmd_study(args: argparse.Namespace, svc: LandmarkService) -> int:
    cfg, run = resolve(StudyConfig, svc, args, {"train.epochs": args.epochs},
                       seed_keys=("phantom.seed", "train.seed"),
                       defaults=StudyConfig().model_dump(mode="json"))
    result = svc.study(args.name, cfg, args.out_dir, run=run)
    for variant, rep in result.reports.items():
        print(f"variant={variant} {summary_line(rep)}")
    for check in result.checks:
        print(f"check={check.name} value={check.value:.4g} tolerance={check.tolerance:.4g} passed={check.passed}")
    return 0
