"""``voxelser`` command-line entry point.

Exit codes: 0 success, 1 validation failure (bad flags, bad values, failed
checks), 2 I/O or file-format error.  Results go to stdout as CSV or
``key=value`` lines; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import __version__
from .errors import FileFormatError, ValidationError

log = logging.getLogger("voxelser")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _load_grid(path):
    from .grid import read_vser

    return read_vser(path)


def _load_config(path):
    from .config import ModelConfig

    return ModelConfig.load(path) if path else ModelConfig()


def cmd_dump(args, out):
    from . import sfc
    from .grid import linear_to_coords, partition, serialize

    grid = _load_grid(args.file)
    seq = serialize(grid, args.curve, args.shift, occupied_only=not args.all_voxels)
    part = partition(seq, args.group)
    bits = sfc.bits_for_dims(grid.dims)
    coords = linear_to_coords(seq.order, grid.dims)
    keys = sfc.encode_many(seq.kind, bits, coords)
    print("pos,group,index,x,y,z,key", file=out)
    for gi, (start, end) in enumerate(part.boundaries):
        for pos in range(start, end):
            x, y, z = coords[pos]
            print(f"{pos},{gi},{seq.order[pos]},{x},{y},{z},{keys[pos]}", file=out)
    print(f"tokens={len(seq)} groups={part.num_groups} group_size={part.group_size} shift={seq.shift}",
          file=sys.stderr)
    return 0


def cmd_bench(args, out):
    from .bench import CSV_HEADER, bench_attention

    print(CSV_HEADER, file=out)
    for n in args.n:
        row = bench_attention(args.attention, n, args.g, channels=args.channels, heads=args.heads,
                              seed=args.seed, repeats=args.repeats)
        print(row.csv(), file=out)
    return 0


def cmd_gradcheck(args, out):
    from .checks import run_suites

    reports = run_suites(args.module, seed=args.seed)
    for r in reports:
        print(r.line(), file=out)
    ok = all(r.passed for r in reports)
    print("pass" if ok else "fail", file=out)
    return 0 if ok else 1


def cmd_crpe(args, out):
    from .crpe import angular_deltas

    grid = _load_grid(args.dump)
    deltas = angular_deltas(grid, center_mode=args.center_mode, encoding=args.encoding)
    print("x,y,z,dtheta,dphi", file=out)
    for (x, y, z), (dt, dp) in zip(grid.occupied_coords(), deltas):
        print(f"{x},{y},{z},{dt:.12f},{dp:.12f}", file=out)
    return 0


def cmd_synth(args, out):
    from .grid import write_vser
    from .synth import generate, load_spec, room_scene

    spec = load_spec(args.spec) if args.spec else room_scene(seed=args.seed)
    grid = generate(spec)
    write_vser(grid, args.out)
    print(f"dims={','.join(map(str, grid.dims))} classes={grid.num_classes} "
          f"occupied={grid.num_occupied} channels={grid.channels}", file=out)
    return 0


def cmd_train(args, out):
    from .block import write_checkpoint
    from .losses import TraceRow, train_toy

    grid = _load_grid(args.scene)
    cfg = _load_config(args.config)
    trace_fh = open(args.trace, "w") if args.trace else out
    try:
        print(TraceRow.HEADER, file=trace_fh)
        result = train_toy(grid, cfg, args.steps, seed=args.seed,
                           callback=lambda row: print(row.csv(), file=trace_fh))
    finally:
        if trace_fh is not out:
            trace_fh.close()
    write_checkpoint(result.model.state_dict(), args.checkpoint)
    for line in result.metrics.lines():
        print(line, file=sys.stderr if trace_fh is out else out)
    return 0


def cmd_eval(args, out):
    from .block import SceneModel, read_checkpoint
    from .losses import evaluate

    grid = _load_grid(args.scene)
    cfg = _load_config(args.config)
    model = SceneModel(cfg, grid.channels, grid.num_classes)
    model.load_state_dict(read_checkpoint(args.weights))
    for line in evaluate(model, grid).lines():
        print(line, file=out)
    return 0


ABLATE_HEADER = "config,steps,final_l_total,sc_iou,miou,accuracy,seconds"


def cmd_ablate(args, out):
    from .config import ABLATION_SUITES, ABLATIONS
    from .losses import train_toy

    grid = _load_grid(args.scene)
    base = _load_config(args.config)
    if args.suite == "all":
        names = list(dict.fromkeys(n for s in ABLATION_SUITES.values() for n in s))
    else:
        names = ABLATION_SUITES[args.suite]
    print(ABLATE_HEADER, file=out)
    for name in names:
        res = train_toy(grid, base.replace(**ABLATIONS[name]), args.steps, seed=args.seed)
        m = res.metrics
        last = res.trace[-1].l_total if res.trace else float("nan")
        print(f"{name},{args.steps},{last:.10g},{m.sc_iou:.6f},{m.miou:.6f},{m.accuracy:.6f},"
              f"{res.seconds:.3f}", file=out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="voxelser", description="Serialized voxel attention toolkit.")
    p.add_argument("--version", action="version", version=f"voxelser {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    d = sub.add_parser("dump", help="print the serialized token/group table of a VSER grid")
    d.add_argument("file")
    d.add_argument("--curve", choices=["zorder", "hilbert"], default="zorder")
    d.add_argument("--shift", type=int, default=0, help="cyclic left rotation of the sequence")
    d.add_argument("--group", type=int, default=8, help="tokens per group")
    d.add_argument("--all-voxels", action="store_true", help="serialize empty voxels too")
    d.set_defaults(func=cmd_dump)

    b = sub.add_parser("bench", help="token-pair count and wall time of one attention pass (CSV)")
    b.add_argument("--attention", choices=["grouped", "full"], required=True)
    b.add_argument("--n", type=int, nargs="+", required=True, help="token counts")
    b.add_argument("--g", type=int, default=64, help="group size")
    b.add_argument("--channels", type=int, default=16)
    b.add_argument("--heads", type=int, default=2)
    b.add_argument("--repeats", type=int, default=1, help="report the best of this many runs")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="run finite-difference oracle suites")
    g.add_argument("--module", choices=["numcore", "asa", "crpe", "block", "losses", "all"], default="all")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("crpe", help="per-voxel yaw/pitch deltas as CSV")
    c.add_argument("--dump", required=True, metavar="FILE")
    c.add_argument("--center-mode", choices=["occupied", "grid"], default="occupied")
    c.add_argument("--encoding", choices=["relative", "absolute"], default="relative")
    c.set_defaults(func=cmd_crpe)

    s = sub.add_parser("synth", help="write a synthetic scene as VSER")
    s.add_argument("--spec", metavar="KV_FILE", help="scene key=value file (default: room preset)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0, help="seed for the default room preset")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train-toy", help="overfit the toy model to one scene")
    t.add_argument("--scene", required=True)
    t.add_argument("--steps", type=int, default=300)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--config", metavar="KV_FILE")
    t.add_argument("--trace", metavar="CSV", help="metric trace path (default: stdout)")
    t.add_argument("--checkpoint", default="weights.vswt")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="SSC metrics of a checkpoint on a scene")
    e.add_argument("--scene", required=True)
    e.add_argument("--weights", required=True)
    e.add_argument("--config", metavar="KV_FILE", help="model config used for training")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train every configuration of an ablation suite (CSV)")
    a.add_argument("--scene", required=True)
    a.add_argument("--suite", choices=["components", "shift", "crpe", "all"], default="components")
    a.add_argument("--steps", type=int, default=300)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--config", metavar="KV_FILE")
    a.set_defaults(func=cmd_ablate)
    return p


def run(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        with np.errstate(all="ignore"):
            return args.func(args, out)
    except ValidationError as exc:
        print(f"voxelser {args.command}: {exc}", file=sys.stderr)
        return 1
    except (FileFormatError, OSError) as exc:
        print(f"voxelser {args.command}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"voxelser {args.command}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
