"""Command-line entry point: ``holovol simulate | analyze | report``.

Failures print a one-line JSON error record on stderr and exit with the
code attached to the error class (2 config, 3 I/O, 4 no content, 5
contract violation). Unexpected exceptions exit with 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, io, pipeline
from .errors import ConfigError, HolovolError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="holovol", description="Droplet volatility from inline holograms.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    p.add_argument("--workers", type=int, default=None, help="worker threads (capped by HOLOVOL_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a synthetic frame stack")
    s.add_argument("--scene", required=True, type=Path)
    s.add_argument("--config", type=Path, default=None)
    s.add_argument("--out", required=True, type=Path)

    a = sub.add_parser("analyze", help="measure droplet volatility in a frame stack")
    a.add_argument("--in", dest="input", required=True, type=Path)
    a.add_argument("--config", type=Path, default=None)
    a.add_argument("--out", required=True, type=Path)
    a.add_argument("--dump-debug", action="store_true", default=None)

    r = sub.add_parser("report", help="compare the K columns of two summaries")
    r.add_argument("--a", required=True, type=Path)
    r.add_argument("--b", required=True, type=Path)
    r.add_argument("--mode", choices=["paired", "welch"], default="welch")
    r.add_argument("--out", type=Path, default=None, help="write the comparison here instead of stdout")
    return p


def _error_record(exc: BaseException, code: int) -> dict:
    rec = {"schema_version": io.SCHEMA_VERSION, "error": getattr(exc, "kind", "crash"),
           "exit_code": code, "message": str(exc)}
    if isinstance(exc, ConfigError) and exc.path:
        rec["field"] = exc.path
    return rec


def _run(args) -> int:
    if args.command == "simulate":
        m = pipeline.run_simulate(args.scene, args.config, args.out, args.workers)
        print(json.dumps({"frames": m["count"], "out": str(args.out)}))
    elif args.command == "analyze":
        rep = pipeline.run_analyze(args.input, args.config, args.out, args.dump_debug, args.workers)
        print(json.dumps({"traces": rep["n_traces"], "warnings": rep["warning_counts"],
                          "out": str(args.out)}))
    else:
        rec = pipeline.run_report(args.a, args.b, args.mode)
        if args.out is None:
            print(json.dumps(rec, indent=2))
        else:
            io.dump_json(rec, args.out)
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except HolovolError as exc:
        err, code = exc, exc.exit_code
    except Exception as exc:  # noqa: BLE001 - report, never traceback-dump to users
        logging.getLogger("holovol").debug("crash", exc_info=True)
        err, code = exc, 1
    print(json.dumps(_error_record(err, code)), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
