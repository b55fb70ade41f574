import argparse
from typing import List

import numpy as np

from ...landmarks.phantom import read_manifest
from ...landmarks.service import LandmarkService
from ...landmarks.types import StepRecord, TrainConfig
from ..options import add_common, resolve


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("train", help="Train the detector on a cohort")
    add_common(p)
    p.add_argument("--data", required=True, help="Cohort manifest.json")
    p.add_argument("--resume", default=None, help="Checkpoint to continue from")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="Initial learning rate")
    p.add_argument("--objective", choices=["curriculum", "registration_only", "supervised"], default=None)
    p.add_argument("--no-rc", dest="use_rc", action="store_const", const=False, default=None)
    p.add_argument("--no-affine", dest="use_affine", action="store_const", const=False, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.set_defaults(handler=cmd_train)


def print_epoch(epoch: int, records: List[StepRecord]) -> None:
    total = np.mean([r.total for r in records])
    reg = np.mean([r.reg for r in records])
    cons = np.mean([r.cons1 + r.cons2 for r in records])
    last = records[-1]
    print(f"epoch={epoch} steps={last.step + 1} total={total:.6f} reg={reg:.6f} cons={cons:.6f} "
          f"alpha={last.alpha:.4f} lr={last.lr:.3g}", flush=True)


def cmd_train(args: argparse.Namespace, svc: LandmarkService) -> int:
    """Detector shape defaults to the cohort's grid and landmark count"""
    spec = read_manifest(args.data).spec
    defaults = {"detector": {"input_shape": [spec.grid_size] * 3, "landmarks": spec.landmarks}}
    overrides = {
        "epochs": args.epochs,
        "max_steps": args.max_steps,
        "lr_init": args.lr,
        "objective": args.objective,
        "use_rc": args.use_rc,
        "use_affine": args.use_affine,
        "checkpoint_every": args.checkpoint_every,
    }
    cfg, run = resolve(TrainConfig, svc, args, overrides, defaults=defaults)
    run.options.update({"data": args.data, "resume": args.resume})
    outputs = svc.train(cfg, args.data, args.out_dir, resume=args.resume, on_epoch=print_epoch, run=run)
    print(f"checkpoint={outputs['checkpoint']} loss_log={outputs['loss_log']}")
    return 0
