"""Command-line entry point.

    surfpinn run <preset|config-file> [--seed S] [--reps R] [--out DIR]
                 [--precision double|single] [--optimizer lm|adam|lbfgs]
                 [--set key=value ...]
    surfpinn list-presets
    surfpinn geometry-dump <surface> --points M [--seed S] [--out FILE]

Exit codes: 0 success, 2 at least one failed run, 3 configuration error.
Config files are flat ``key = value`` lines mirroring ExperimentConfig.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

from . import experiments, geometry
from .errors import ConfigurationError

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(experiments.ExperimentConfig)}


def _coerce(name, raw):
    if name not in _FIELD_TYPES:
        raise ConfigurationError(f"unknown config key {name!r}")
    ftype = _FIELD_TYPES[name]
    tname = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", "str")
    if tname == "int":
        return int(raw)
    if tname == "float":
        return float(raw)
    if tname == "bool":
        return raw.lower() in ("1", "true", "yes", "on")
    return raw


def parse_config_file(path) -> experiments.ExperimentConfig:
    """Flat key = value text format; '#' starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = _coerce(key, raw)
    if "problem_id" not in values:
        raise ConfigurationError(f"{path}: missing problem_id")
    return experiments.ExperimentConfig(**values)


def _cmd_run(args) -> int:
    if Path(args.target).is_file():
        config = parse_config_file(args.target)
    else:
        config = experiments.preset(args.target)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.reps is not None:
        overrides["repetitions"] = args.reps
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.precision is not None:
        overrides["precision"] = args.precision
    if args.optimizer is not None:
        overrides["optimizer"] = args.optimizer
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = _coerce(key.strip(), raw.strip())
    config = dataclasses.replace(config, **overrides)
    report = experiments.run_experiment(config)
    print(report.to_json() if args.out is None else _summary(report))
    return 2 if report.failures else 0


def _summary(report) -> str:
    lines = [f"problem: {report.config['problem_id']}",
             f"runs: {len(report.runs)}  failed: {report.failures}"]
    for key, val in sorted(report.mean_errors.items()):
        lines.append(f"mean {key} error: {val:.6e}")
    lines.append(f"artifacts in {report.config['output_dir']}")
    return "\n".join(lines)


def _cmd_list_presets(_args) -> int:
    width = max(len(name) for name in experiments.PRESETS)
    for name in sorted(experiments.PRESETS):
        desc, config = experiments.PRESETS[name]
        print(f"{name:<{width}}  {desc} [{config.problem_id}]")
    return 0


def _cmd_geometry_dump(args) -> int:
    surf = geometry.builtin_surface(args.surface)
    points = geometry.sample_surface(surf, args.points, args.seed)
    out = args.out or f"{args.surface}_points.csv"
    geometry.write_point_cloud_csv(out, points)
    print(f"wrote {len(points)} points to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="surfpinn",
                                     description="surface PDE network solver")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a preset or config file")
    run.add_argument("target", help="preset name or path to a config file")
    run.add_argument("--seed", type=int)
    run.add_argument("--reps", type=int)
    run.add_argument("--out")
    run.add_argument("--precision", choices=["double", "single"])
    run.add_argument("--optimizer", choices=["lm", "adam", "lbfgs"])
    run.add_argument("--set", action="append", metavar="KEY=VALUE")
    run.set_defaults(func=_cmd_run)

    lp = sub.add_parser("list-presets", help="list available presets")
    lp.set_defaults(func=_cmd_list_presets)

    gd = sub.add_parser("geometry-dump", help="export a surface point cloud")
    gd.add_argument("surface")
    gd.add_argument("--points", type=int, default=1000)
    gd.add_argument("--seed", type=int, default=0)
    gd.add_argument("--out")
    gd.set_defaults(func=_cmd_geometry_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
