import argparse
import logging
import os
import sys
import traceback
from typing import List, Optional

from pydantic import ValidationError

from ..config.settings import LOG_LEVEL
from ..landmarks.errors import ConfigError, DataError, NumericalError
from .commands.data import register as register_data
from .commands.evaluation import register as register_evaluation
from .commands.tools import register as register_tools
from .commands.training import register as register_training
from .deps import get_landmark_service

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="landmarks", description="Self-supervised 3D landmark detection toolkit")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    register_data(sub)
    register_training(sub)
    register_evaluation(sub)
    register_tools(sub)
    return parser


def configure_logging(level: str = LOG_LEVEL) -> None:
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="ts=%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s",
        stream=sys.stderr,
    )


def exit_code(exc: BaseException) -> Optional[int]:
    if isinstance(exc, (ConfigError, ValidationError)):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return None


def error_line(exc: BaseException, code: int) -> str:
    """``error code=<n> kind=<Class> where=<file>:<line> msg="<text>"`` on one line"""
    frames = traceback.extract_tb(exc.__traceback__)
    where = f"{os.path.basename(frames[-1].filename)}:{frames[-1].lineno}" if frames else "unknown:0"
    msg = " ".join(str(exc).split()).replace('"', "'")
    return f'error code={code} kind={type(exc).__name__} where={where} msg="{msg}"'


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    svc = get_landmark_service()
    try:
        return args.handler(args, svc)
    except Exception as e:
        code = exit_code(e)
        if code is None:
            raise
        logger.debug("subcommand=%s failed", args.subcommand, exc_info=True)
        print(error_line(e, code), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
