"""Config-file loading with flag overrides for every subcommand."""
import argparse
import copy
from typing import Any, Dict, Optional, Tuple, Type, TypeVar

from pydantic import BaseModel

from ..config.settings import DEFAULT_SEED
from ..landmarks.service import LandmarkService
from ..landmarks.types import RunConfig

M = TypeVar("M", bound=BaseModel)


def add_common(parser: argparse.ArgumentParser, out_required: bool = True) -> None:
    parser.add_argument("--config", default=None, help="JSON or TOML key-value file")
    parser.add_argument("--out-dir", required=out_required, default=None, help="Output directory")
    parser.add_argument("--seed", type=int, default=None, help="Overrides the seed from the config file")


def set_dotted(target: Dict[str, Any], key: str, value: Any) -> None:
    """``a.b.c = v`` into nested dicts, creating levels as needed"""
    *parents, leaf = key.split(".")
    node = target
    for part in parents:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[leaf] = value


def deep_merge(base: Dict[str, Any], other: Dict[str, Any]) -> Dict[str, Any]:
    """Nested mappings merge key by key; anything else in ``other`` replaces ``base``"""
    merged = dict(base)
    for key, value in other.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def merge(file_values: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Flags win over file values; flags left at None do not override"""
    merged = copy.deepcopy(file_values)
    for key, value in overrides.items():
        if value is not None:
            set_dotted(merged, key, value)
    return merged


def has_key(values: Dict[str, Any], dotted: str) -> bool:
    node: Any = values
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return False
        node = node[part]
    return True


def run_config(args: argparse.Namespace, overrides: Dict[str, Any]) -> RunConfig:
    return RunConfig(
        subcommand=args.subcommand,
        config_path=args.config,
        out_dir=str(args.out_dir) if args.out_dir is not None else ".",
        seed=args.seed,
        options={k: v for k, v in overrides.items() if v is not None},
    )


def resolve(
    model: Type[M],
    svc: LandmarkService,
    args: argparse.Namespace,
    overrides: Dict[str, Any],
    seed_keys: Tuple[str, ...] = ("seed",),
    defaults: Optional[Dict[str, Any]] = None,
) -> Tuple[M, RunConfig]:
    """Validated config model plus the RunConfig describing this invocation.

    Precedence, lowest first: ``defaults``, the config file, command-line flags.
    Without a seed anywhere the process default from the environment applies.
    """
    file_values = svc.read_config_file(args.config)
    values = deep_merge(defaults or {}, file_values)
    seed = args.seed
    if seed is None and not any(has_key(file_values, k) for k in seed_keys):
        seed = DEFAULT_SEED
    overrides = {**overrides, **{k: seed for k in seed_keys}}
    cfg = model.model_validate(merge(values, overrides))
    return cfg, run_config(args, overrides)
