"""Command-line driver: run load increments, write meshes, run self-checks."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import bench
from .config import ConfigError, RunConfig, dump_config, load_config
from .fem import MeshError, build_quarter_plate_mesh, read_mesh, write_mesh

log = logging.getLogger("dualplast")


def _load(args):
    if getattr(args, "default", False) or not args.config:
        cfg = RunConfig()
    else:
        cfg = load_config(args.config)
    return cfg


def cmd_run(args):
    cfg = _load(args)
    if args.tol is not None or args.max_iter is not None:
        cfg.solver = dataclasses.replace(
            cfg.solver,
            tol=cfg.solver.tol if args.tol is None else args.tol,
            maxiter=cfg.solver.maxiter if args.max_iter is None else args.max_iter)
    mesh = None
    if args.mesh:
        try:
            mesh = read_mesh(args.mesh)
        except OSError as exc:
            raise ConfigError(f"{args.mesh}: {exc.strerror or exc}") from exc
        except MeshError as exc:
            raise ConfigError(str(exc)) from exc
    result = bench.run_benchmark(cfg, mesh=mesh, out_dir=args.out)
    for s in result.increments:
        state = "converged" if s.converged else "NOT converged"
        print(f"increment {s.increment}: {state} in {s.iterations} iterations, "
              f"|grad| = {s.final_residual:.3e}, max backtracks {s.max_backtracks}, "
              f"duality gap {s.duality_gap:.2e}")
    return result.exit_code


def cmd_mesh(args):
    cfg = _load(args)
    mesh = build_quarter_plate_mesh(cfg.geometry)
    write_mesh(mesh, args.out)
    print(f"wrote {mesh.n_elements} elements, {mesh.n_nodes} nodes to {args.out}")
    return 0


def cmd_config(args):
    sys.stdout.write(dump_config(RunConfig()))
    return 0


def cmd_check(args):
    from .checks import run_checks
    rows = run_checks(n_oracle=args.samples, seed=args.seed)
    width = max(len(r[0]) for r in rows)
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    return 0 if all(r[1] for r in rows) else 2


def build_parser():
    p = argparse.ArgumentParser(prog="dualplast", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log solver warnings and progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the load increments of a config")
    src = r.add_mutually_exclusive_group()
    src.add_argument("--config", help="INI run configuration")
    src.add_argument("--default", action="store_true", help="built-in benchmark configuration")
    r.add_argument("--mesh", help="mesh file to use instead of the generated plate")
    r.add_argument("--out", help="output directory (overrides [output] directory)")
    r.add_argument("--tol", type=float, help="absolute tolerance on the gradient norm")
    r.add_argument("--max-iter", type=int, help="Newton iteration limit per increment")
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("mesh", help="write the generated plate mesh")
    m.add_argument("--config", help="INI run configuration (geometry block)")
    m.add_argument("--out", required=True, help="mesh file to write")
    m.set_defaults(func=cmd_mesh)

    c = sub.add_parser("check", help="run randomized self-checks on small instances")
    c.add_argument("--samples", type=int, default=200, help="oracle comparisons")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)

    d = sub.add_parser("config", help="print the default configuration")
    d.set_defaults(func=cmd_config)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return bench.EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return bench.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
