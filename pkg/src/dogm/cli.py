"""``dogm`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (diagnostics on stderr).
"""

from __future__ import annotations

import argparse
import json
import sys

from dogm import pipeline
from dogm.errors import ConfigError, DataError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dogm", description="Recurrent dynamic occupancy grid maps.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a scenario into a sequence directory")
    s.add_argument("--config", required=True, help="scenario JSON")
    s.add_argument("--out", required=True, help="output sequence directory")
    s.add_argument("--seed", type=int, help="override the scenario seed")

    s = sub.add_parser("train", help="train a network from a run config")
    s.add_argument("--config", required=True, help="run config JSON")
    s.add_argument("--out", help="output directory (overrides the config)")
    s.add_argument("--seed", type=int, help="override the run seed")
    s.add_argument("--resume", help="checkpoint to continue from")

    s = sub.add_parser("infer", help="run a checkpoint over a sequence directory")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--sequence", required=True, help="sequence directory")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="accepted for uniformity; inference is deterministic")

    s = sub.add_parser("eval", help="score predictions against labels")
    s.add_argument("--pred", required=True, help="prediction directory")
    s.add_argument("--labels", required=True, help="label or sequence directory")
    s.add_argument("--out", help="report JSON path (stdout if omitted)")
    s.add_argument("--warmup", type=int, default=0, help="leading frames to skip")
    s.add_argument("--no-objects", action="store_true", help="skip object-level metrics")
    s.add_argument("--seed", type=int, help="accepted for uniformity; evaluation is deterministic")

    s = sub.add_parser("render", help="render a DGM1 grid as PGM/PPM")
    s.add_argument("--grid", required=True, help="DGM1 file")
    s.add_argument("--style", choices=("occupancy", "velocity"), default="occupancy")
    s.add_argument("--out", help="image path")
    return p


def _run(args) -> None:
    if args.command == "simulate":
        m = pipeline.cmd_simulate(args.config, args.out, args.seed)
        print(f"wrote {m['frames']} frames to {args.out}")
    elif args.command == "train":
        r = pipeline.cmd_train(args.config, args.out, args.seed, args.resume)
        print(json.dumps(r, sort_keys=True))
    elif args.command == "infer":
        m = pipeline.cmd_infer(args.checkpoint, args.sequence, args.out)
        print(f"wrote {m['frames']} predictions to {args.out}")
    elif args.command == "eval":
        rep = pipeline.cmd_eval(args.pred, args.labels, args.out, args.warmup,
                                objects=not args.no_objects)
        if args.out is None:
            sys.stdout.write(pipeline.report_json(rep))
        else:
            print(json.dumps(rep["aggregate"], sort_keys=True))
    elif args.command == "render":
        print(pipeline.cmd_render(args.grid, args.style, args.out))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, sort_keys=True, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
