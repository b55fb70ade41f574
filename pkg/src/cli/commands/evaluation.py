import argparse

from ...landmarks.metrics import DEFAULT_THRESHOLDS, summary_line
from ...landmarks.service import LandmarkService
from ..options import run_config


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("infer", help="Predict landmarks for volumes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("volumes", nargs="+", help="Volume paths, with or without suffix")
    p.set_defaults(handler=cmd_infer, config=None, seed=None)

    p = sub.add_parser("eval", help="MRE and SDR of predictions against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--thresholds", type=float, nargs="+", default=list(DEFAULT_THRESHOLDS))
    p.add_argument("--out-dir", default=None, help="Defaults to --pred-dir")
    p.set_defaults(handler=cmd_eval, config=None, seed=None)


def cmd_infer(args: argparse.Namespace, svc: LandmarkService) -> int:
    run = run_config(args, {"checkpoint": args.checkpoint, "volumes": args.volumes})
    for path in svc.infer_files(args.checkpoint, args.volumes, args.out_dir, run=run):
        print(f"landmarks={path}")
    return 0


def cmd_eval(args: argparse.Namespace, svc: LandmarkService) -> int:
    out_dir = args.out_dir or args.pred_dir
    args.out_dir = out_dir
    run = run_config(args, {"pred_dir": args.pred_dir, "gt_dir": args.gt_dir, "thresholds": args.thresholds})
    rep = svc.evaluate_dirs(args.pred_dir, args.gt_dir, args.thresholds, out_dir, run=run)
    print(summary_line(rep))
    return 0
