"""Command line interface: ``fraclap run``, ``fraclap rates`` and ``fraclap mesh``."""

from __future__ import annotations

import argparse
import logging
import math
import sys

from .experiments import (RunConfig, emit_csv, emit_plot, fit_rates, format_rates,
                          mesh_hierarchy, read_csv, run_convergence)
from .mesh import SubdomainSpec, axis_square, write_mesh

# keys accepted in a config file, with the argparse destination they fill
_CONFIG_KEYS = {"dim": "dim", "s": "s", "levels": "levels", "subdomain": "subdomain",
                "cutoff": "cutoff", "no-project-boundary": "no_project_boundary",
                "project-boundary": "project_boundary", "workers": "workers", "csv": "csv",
                "svg": "svg", "max-dofs": "max_dofs"}
_RUN_DEFAULTS = {"dim": 2, "s": "0.5", "levels": 4, "subdomain": "square:0.4", "cutoff": None,
                 "no_project_boundary": False, "workers": 1, "csv": None, "svg": None,
                 "max_dofs": 8000}


def parse_region(text: str) -> SubdomainSpec:
    """``square:<side>`` or ``disc:<radius>``, centred at the origin."""
    kind, _, value = text.partition(":")
    try:
        size = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad region {text!r}") from None
    if not size > 0:
        raise argparse.ArgumentTypeError("region size must be positive")
    if kind == "square":
        return axis_square(size)
    if kind == "disc":
        return SubdomainSpec("disc", (0.0, 0.0), size)
    raise argparse.ArgumentTypeError(f"unknown region kind {kind!r}")


def parse_s_list(text: str) -> tuple:
    try:
        return tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad s list {text!r}") from None


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().lstrip("-").replace("_", "-")
            if not sep or key not in _CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: cannot parse {raw.strip()!r}")
            out[_CONFIG_KEYS[key]] = value.strip()
    return out


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _merge(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicitly given flags."""
    merged = dict(_RUN_DEFAULTS)
    if args.config:
        file_values = read_config_file(args.config)
        if "project_boundary" in file_values:
            file_values["no_project_boundary"] = not _as_bool(file_values.pop("project_boundary"))
        merged.update(file_values)
    for key in _RUN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            merged[key] = value
    return merged


def build_run_config(args: argparse.Namespace) -> tuple[RunConfig, str | None, str | None]:
    opts = _merge(args)
    subdomain = opts["subdomain"]
    if isinstance(subdomain, str):
        subdomain = parse_region(subdomain)
    cutoff = opts["cutoff"]
    if isinstance(cutoff, str):
        cutoff = parse_region(cutoff)
    s_values = opts["s"] if isinstance(opts["s"], tuple) else parse_s_list(opts["s"])
    config = RunConfig(dim=int(opts["dim"]), s_values=s_values, levels=int(opts["levels"]),
                       subdomain=subdomain, cutoff_outer=cutoff,
                       project_boundary=not _as_bool(opts["no_project_boundary"]),
                       workers=int(opts["workers"]), max_dofs=int(opts["max_dofs"]))
    if not opts["csv"]:
        raise ValueError("an output path is required: --csv <path>")
    return config, opts["csv"], opts["svg"]


def _cmd_run(args) -> int:
    config, csv_path, svg_path = build_run_config(args)

    def report(rec):
        status = rec.error or f"l2={rec.l2_global:.4e} energy={rec.energy_global:.4e}"
        print(f"s={rec.s:g} level={rec.level} ndof={rec.ndof} {status}", flush=True)

    records = run_convergence(config, progress=report)
    emit_csv(records, csv_path)
    if svg_path:
        emit_plot(records, svg_path)
    ok = [r for r in records if not r.failed]
    if len({r.level for r in ok}) >= 2:
        print(format_rates(fit_rates(ok)))
    return 0 if len(ok) == len(records) else 1


def _cmd_rates(args) -> int:
    records = [r for r in read_csv(args.csv) if math.isfinite(r.h)]
    print(format_rates(fit_rates(records)))
    return 0


def _cmd_mesh(args) -> int:
    mesh = None
    if args.levels < 1:
        raise ValueError("levels must be at least 1")
    for _, mesh in mesh_hierarchy(args.dim, args.levels, not args.no_project_boundary):
        pass
    write_mesh(mesh, args.out)
    print(f"level {mesh.level}: {mesh.n_vertices} vertices, {mesh.n_elements} elements, "
          f"h = {mesh.h:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fraclap",
                                     description="P1 finite elements for the integral "
                                                 "fractional Laplacian")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="convergence study on the disc or interval")
    run.add_argument("--config", help="file of key = value lines; flags take precedence")
    run.add_argument("--dim", type=int, choices=(1, 2))
    run.add_argument("--s", type=parse_s_list, help="comma separated orders in (0, 1)")
    run.add_argument("--levels", type=int)
    run.add_argument("--subdomain", type=parse_region, help="square:<side> or disc:<radius>")
    run.add_argument("--cutoff", type=parse_region,
                     help="outer region of the cut-off; enables energy_local")
    run.add_argument("--no-project-boundary", action="store_true", default=None)
    run.add_argument("--workers", type=int)
    run.add_argument("--max-dofs", type=int)
    run.add_argument("--csv")
    run.add_argument("--svg")
    run.set_defaults(func=_cmd_run)

    rates = sub.add_parser("rates", help="print convergence rates of a CSV file")
    rates.add_argument("csv")
    rates.set_defaults(func=_cmd_rates)

    mesh = sub.add_parser("mesh", help="write the mesh of a refinement level")
    mesh.add_argument("--dim", type=int, choices=(1, 2), default=2)
    mesh.add_argument("--levels", type=int, required=True)
    mesh.add_argument("--no-project-boundary", action="store_true")
    mesh.add_argument("--out", required=True)
    mesh.set_defaults(func=_cmd_mesh)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"fraclap: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
