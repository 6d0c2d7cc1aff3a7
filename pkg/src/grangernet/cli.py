"""Command-line front end: simulate, estimate/select, evaluate, analyze.

Every command reads an optional YAML config (``--config``); command-line flags
override config values.  Each output directory receives ``manifest.json``
with the resolved config, seed and package version.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import io
from .evaluation import Scenario, part_metrics, run_experiment, SupportSet, write_csv
from .exceptions import NumericalError, ValidationError
from .netanalysis import centrality_difference, network_from_rows, read_edge_rows, to_network, write_network_csv
from .penalties import Kind
from .selection import DEFAULT_GAMMA, select_model
from .solver import SolverOptions
from .var_core import GroundTruthSpec, VarPanel, generate_ground_truth, simulate_panel

logger = logging.getLogger("grangernet")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2

# convex formulations for the group-comparison presets
PRESETS = {
    "d2k": {"formulation": "dgn", "q": 1.0, "K": 2},
    "f2k": {"formulation": "fgn", "q": 1.0, "K": 2},
    "c18k": {"formulation": "cgn", "q": 1.0, "K": None},
}

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "formulation": "dgn",
    "q": 0.5,
    "gamma": DEFAULT_GAMMA,
    "grid_size": 30,
    "lam2_size": None,
    "p": 1,
    "format": "csv",
    "top": 3,
    "replicates": 20,
    "scenario": {},
    "solver": {},
}

SOLVER_KEYS = {"eps_abs", "eps_rel", "period", "max_iter", "rho0", "mode", "eps_corr"}


def version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def resolve_config(args: argparse.Namespace) -> dict:
    config = dict(DEFAULTS)
    if args.config:
        config.update(io.load_config(args.config))
    for key, value in vars(args).items():
        if key in ("func", "config") or value is None:
            continue
        config[key] = value
    preset = config.get("preset")
    if preset:
        preset = str(preset).lower()
        if preset not in PRESETS:
            raise ValidationError(f"unknown preset {preset!r}")
        config["preset"] = preset
        config["formulation"] = PRESETS[preset]["formulation"]
        config["q"] = PRESETS[preset]["q"]
    config["formulation"] = Kind.parse(config["formulation"]).value
    config["q"] = float(config["q"])
    if config["q"] not in (1.0, 0.5):
        raise ValidationError(f"q must be 1 or 0.5, got {config['q']}")
    if not 0.0 <= float(config["gamma"]) <= 1.0:
        raise ValidationError("gamma must lie in [0, 1]")
    unknown = set(config.get("solver") or {}) - SOLVER_KEYS
    if unknown:
        raise ValidationError(f"unknown solver options {sorted(unknown)}")
    return config


def solver_options(config: dict) -> SolverOptions:
    return SolverOptions(**(config.get("solver") or {}))


def write_manifest(outdir: Path, command: str, config: dict) -> None:
    manifest = {"command": command, "version": version(), "seed": config.get("seed"),
                "config": {k: v for k, v in config.items() if k != "preset" or v}}
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=str)


def _outdir(config: dict) -> Path:
    if not config.get("output"):
        raise ValidationError("an output directory is required (--output)")
    out = Path(config["output"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _truth_spec(config: dict) -> GroundTruthSpec:
    sc = dict(config.get("scenario") or {})
    allowed = {"n", "p", "K", "T", "common_density", "differential_density", "fused", "self_lags"}
    unknown = set(sc) - allowed
    if unknown:
        raise ValidationError(f"unknown scenario keys {sorted(unknown)}")
    sc.setdefault("n", 20)
    sc.setdefault("p", 1)
    sc.setdefault("K", 5)
    sc.setdefault("T", 100)
    spec = GroundTruthSpec(**sc, seed=int(config["seed"]))
    spec.validate()
    return spec


def cmd_simulate(config: dict) -> int:
    spec = _truth_spec(config)
    out = _outdir(config)
    ss = np.random.SeedSequence(int(config["seed"]))
    s_truth, s_sim = ss.spawn(2)
    truth = generate_ground_truth(spec, seed=np.random.default_rng(s_truth))
    series = simulate_panel(truth, seed=np.random.default_rng(s_sim))
    suffix = io.BINARY_SUFFIX if config.get("format") == "binary" else ".csv"
    width = len(str(spec.K))
    for k, s in enumerate(series):
        io.write_series(out / f"series_{k + 1:0{width}d}{suffix}", s)
    io.write_truth(out / "truth.json", truth)
    write_manifest(out, "simulate", config)
    logger.info("wrote %d series to %s", spec.K, out)
    return EXIT_OK


def _input_paths(config: dict) -> list[Path]:
    inp = config.get("input")
    if not inp:
        raise ValidationError("input series are required (--input)")
    paths = []
    for item in ([inp] if isinstance(inp, (str, Path)) else inp):
        item = Path(item)
        paths.extend(io.series_files(item) if item.is_dir() else [item])
    return paths


def cmd_estimate(config: dict) -> int:
    paths = _input_paths(config)
    series, labels = io.read_panel_series(paths)
    preset = config.get("preset")
    if preset and PRESETS[preset]["K"] is not None and len(series) != PRESETS[preset]["K"]:
        raise ValidationError(f"preset {preset} needs {PRESETS[preset]['K']} series, got {len(series)}")
    kind = Kind.parse(config["formulation"])
    if kind is Kind.FGN and len(series) < 2:
        raise ValidationError("FGN needs at least two series")
    out = _outdir(config)
    panel = VarPanel.from_series(series, int(config["p"]))
    grid = config.get("grid")
    if grid is not None:
        grid = [tuple(float(v) for v in pair) for pair in grid]
    sel = select_model(panel, kind, config["q"], grid=grid, gamma=float(config["gamma"]),
                       grid_size=int(config["grid_size"]),
                       lam2_size=int(config["lam2_size"]) if config.get("lam2_size") else None,
                       options=solver_options(config), workers=int(config["workers"]))
    io.write_rows_csv(out / "grid.csv", sel.table())
    best = sel.best
    io.write_support(out / "support.json", best.support, labels)
    io.write_coefs(out / "coefs.npz", best.solution.coefs, labels)
    io.write_coefs(out / "refit_coefs.npz", best.refit.coefs, labels)
    for k in range(panel.K):
        write_network_csv(to_network(best.solution, k, labels), out / f"network_{k + 1}.csv")
    summary = {"lam1": best.lam1, "lam2": best.lam2, "df": best.df, "loglik": best.loglik,
               "ebic": best.ebic, "converged": best.converged, "files": [str(p) for p in paths]}
    with open(out / "selected.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    write_manifest(out, "estimate", config)
    logger.info("selected lam1=%.4g lam2=%.4g df=%g", best.lam1, best.lam2, best.df)
    return EXIT_OK


def cmd_evaluate(config: dict) -> int:
    out = _outdir(config)
    if config.get("truth") and config.get("support"):
        truth = io.read_truth(config["truth"])
        predicted = io.read_support(config["support"])
        if predicted.shape != truth.differential.shape:
            raise ValidationError(f"support shape {predicted.shape} does not match truth {truth.differential.shape}")
        parts = part_metrics(SupportSet(predicted), truth.common, truth.differential)
        rows = [{"part": part, **m.as_dict()} for part, m in parts.items()]
        write_csv(rows, out / "metrics.csv")
    else:
        sc = dict(config.get("scenario") or {})
        sc.setdefault("kind", config["formulation"])
        sc.setdefault("q", config["q"])
        sc.setdefault("gamma", float(config["gamma"]))
        if "grid_size" not in sc and config.get("grid_size") is not None:
            sc["grid_size"] = int(config["grid_size"])
        try:
            scenario = Scenario(**sc)
        except TypeError as exc:
            raise ValidationError(f"bad scenario block: {exc}") from None
        result = run_experiment(scenario, int(config["replicates"]), int(config["seed"]),
                                workers=int(config["workers"]))
        if not result.replicates:
            raise NumericalError("every replicate failed")
        write_csv(result.rows(), out / "replicates.csv")
        write_csv(result.summary(), out / "summary.csv")
        write_csv(result.summary_table(), out / "summary_table.csv")
    write_manifest(out, "evaluate", config)
    return EXIT_OK


def cmd_analyze(config: dict) -> int:
    out = _outdir(config)
    a, b = config.get("network_a"), config.get("network_b")
    if not a or not b:
        raise ValidationError("two network files are required (--network-a, --network-b)")
    rows_a, rows_b = read_edge_rows(a), read_edge_rows(b)
    # edge lists omit isolated nodes, so both graphs live on the union of labels
    labels = list(dict.fromkeys(r[key] for r in rows_a + rows_b for key in ("source", "target")))
    net_a, net_b = network_from_rows(rows_a, labels), network_from_rows(rows_b, labels)
    report = centrality_difference(net_a, net_b, int(config["top"]) if config.get("top") else None)
    report.write_csv(out / "centrality.csv")
    write_manifest(out, "analyze", config)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--output", "-o", help="output directory")
    common.add_argument("--formulation", choices=[k.value for k in Kind])
    common.add_argument("--q", type=float, choices=[1.0, 0.5])
    common.add_argument("--gamma", type=float)
    common.add_argument("--grid-size", dest="grid_size", type=int)
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="grangernet", description="Joint sparse GC network estimation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="draw ground truth and simulate series")
    p.add_argument("--format", choices=["csv", "binary"])
    p.set_defaults(func=cmd_simulate)

    for name in ("estimate", "select"):
        p = sub.add_parser(name, parents=[common], help="grid solve, eBIC selection and network export")
        p.add_argument("--input", "-i", nargs="+", help="series files or a directory of series files")
        p.add_argument("--p", type=int, help="VAR order")
        p.add_argument("--lam2-size", dest="lam2_size", type=int)
        p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score a support against a truth, or run a replicate experiment")
    p.add_argument("--truth")
    p.add_argument("--support")
    p.add_argument("--replicates", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", parents=[common], help="edge-betweenness differences of two networks")
    p.add_argument("--network-a", dest="network_a")
    p.add_argument("--network-b", dest="network_b")
    p.add_argument("--top", type=int)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    del args.verbose
    command = args.command
    del args.command
    try:
        config = resolve_config(args)
        return args.func(config)
    except NumericalError as exc:
        print(f"{command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"{command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
