"""Command-line entry point: ``mdmap <subcommand> ...``.

Exit status is 0 on success, 2 for configuration or input errors and 3 for
numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, GraphError, MdmapError, NumericalError, PipelineError
from .graph import write_edge_list, write_partition

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OTHER = 0, 2, 3, 1


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, PipelineError) and exc.cause is not None:
        return _exit_code(exc.cause)
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, GraphError, FileNotFoundError)):
        return EXIT_CONFIG
    if isinstance(exc, PipelineError) and exc.stage in ("config", "ingest"):
        return EXIT_CONFIG
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return EXIT_OTHER


def _load_config(args):
    from .pipeline import PipelineConfig

    cfg = PipelineConfig.from_file(args.config)
    if args.output:
        cfg = replace(cfg, output=Path(args.output))
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _print_run(rep):
    print(f"wrote {rep.output} ({rep.n_subdomains} subdomain(s), {rep.reused} reused)")
    print(f"run {rep.run_seconds:.2f}s  merge {rep.merge_seconds:.2f}s  total {rep.total_seconds:.2f}s")
    print(f"DIC {rep.criteria['dic']:.3f}  WAIC {rep.criteria['waic']:.3f}")
    for w in rep.warnings:
        print(f"note: {w}")


def cmd_fit_global(args) -> int:
    from .pipeline import run_pipeline

    _print_run(run_pipeline(_load_config(args), single=True))
    return EXIT_OK


def cmd_fit_partition(args) -> int:
    from .pipeline import run_pipeline

    cfg = _load_config(args)
    if args.k is not None:
        cfg = replace(cfg, k=args.k)
    if args.strategy:
        cfg = replace(cfg, strategy=args.strategy)
    if cfg.partition is None:
        raise ConfigError("fit-partition needs [data] partition in the config")
    _print_run(run_pipeline(cfg))
    return EXIT_OK


def cmd_merge(args) -> int:
    from .pipeline import merge_run

    res = merge_run(args.run_dir, args.strategy, args.seed)
    print(f"merged {len(res.subdomain_ids)} subdomain(s) with strategy {res.risks.strategy}")
    print(f"DIC {res.criteria.dic:.3f}  WAIC {res.criteria.waic:.3f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .simulate import load_scenario, save_scenario, simulate_replicate

    spec = load_scenario(args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.replicates or spec.n_replicates
    write_edge_list(spec.graph, out / "edges.tsv")
    home = spec.home if spec.home is not None else np.zeros(spec.graph.n_areas, dtype=np.int64)
    write_partition(spec.graph, home, out / "partition.tsv")
    save_scenario(spec, out / "scenario.ini")
    for r in range(n):
        O, R = simulate_replicate(spec, r)
        with open(out / f"counts_{r:03d}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["area", "disease", "observed", "expected"])
            for j, dis in enumerate(spec.disease_names):
                for i, area in enumerate(spec.graph.area_ids):
                    w.writerow([area, dis, int(O[i, j]), repr(float(spec.expected[i, j]))])
        with open(out / f"truth_{r:03d}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["area", "disease", "relative_risk"])
            for j, dis in enumerate(spec.disease_names):
                for i, area in enumerate(spec.graph.area_ids):
                    w.writerow([area, dis, repr(float(R[i, j]))])
        (out / f"config_{r:03d}.ini").write_text(
            "[data]\nedges = edges.tsv\npartition = partition.tsv\n"
            f"counts = counts_{r:03d}.csv\n\n[model]\nk = {args.k}\nstrategy = original\n\n"
            f"[execution]\nworkers = 1\nseed = {r}\n\n[output]\ndirectory = run_{r:03d}\n",
            encoding="utf-8",
        )
    print(f"wrote {n} replicate(s) to {out}")
    return EXIT_OK


def _read_long(path, value_col):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or value_col not in rows[0]:
        raise ConfigError(f"{path}: expected a {value_col!r} column")
    return {(r["area"], r["disease"]): r for r in rows}


def cmd_score(args) -> int:
    from .simulate import ReplicateEstimate, load_scenario, score

    if len(args.truth) != len(args.runs):
        raise ConfigError("give one truth file per run directory")
    truths, ests = [], []
    for tpath, run in zip(args.truth, args.runs):
        truth = _read_long(tpath, "relative_risk")
        risks = _read_long(Path(run) / "risks.csv", "median")
        keys = list(truth)
        if set(keys) != set(risks):
            raise ConfigError(f"{run}: areas/diseases differ from {tpath}")
        areas = list(dict.fromkeys(k[0] for k in keys))
        dis = list(dict.fromkeys(k[1] for k in keys))
        shape = (len(areas), len(dis))

        def grid(table, col):
            return np.array([[float(table[(a, d)][col]) for d in dis] for a in areas]).reshape(shape)

        truths.append(grid(truth, "relative_risk"))
        params = {}
        gp = Path(run) / "global_params.csv"
        if gp.exists():
            with open(gp, newline="", encoding="utf-8") as fh:
                for r in csv.DictReader(fh):
                    params[r["parameter"]] = (float(r["mean"]), float(r["sd"]), float(r["q025"]), float(r["q975"]))
        ests.append(ReplicateEstimate(grid(risks, "median"), grid(risks, "q025"), grid(risks, "q975"), params))
    true_params = load_scenario(args.scenario).true_params() if args.scenario else None
    rep = score(ests, truths, true_params)
    rep.write_csv(args.out, label=args.label)
    if true_params:
        rep.write_params_csv(Path(args.out).with_name(Path(args.out).stem + "_params.csv"))
    print(f"MARB {rep.mean_marb:.4f}  MRRMSE {rep.mean_mrrmse:.4f}  EC {rep.mean_coverage:.3f}  ({rep.n_replicates} replicates)")
    return EXIT_OK


def cmd_report(args) -> int:
    from .pipeline import report

    print(report(args.run_dir, args.compare, args.out), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdmap", description="Multivariate disease mapping on partitioned domains.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def run_args(sp):
        sp.add_argument("config", help="INI configuration file")
        sp.add_argument("--output", help="override [output] directory")
        sp.add_argument("--workers", type=int, help="override [execution] workers")
        sp.add_argument("--seed", type=int, help="override [execution] seed")

    sp = sub.add_parser("fit-global", help="fit one model to the whole domain")
    run_args(sp)
    sp.set_defaults(func=cmd_fit_global)

    sp = sub.add_parser("fit-partition", help="fit one model per subdomain and merge")
    run_args(sp)
    sp.add_argument("--k", type=int, help="override neighbourhood order")
    sp.add_argument("--strategy", choices=("original", "mixture"), help="override merge strategy")
    sp.set_defaults(func=cmd_fit_partition)

    sp = sub.add_parser("merge", help="re-merge the stored fits of a run")
    sp.add_argument("run_dir")
    sp.add_argument("--strategy", choices=("original", "mixture"))
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_merge)

    sp = sub.add_parser("simulate", help="generate replicate data sets from a scenario file")
    sp.add_argument("scenario", help="scenario INI file")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--replicates", type=int, help="override the number of replicates")
    sp.add_argument("--k", type=int, default=0, help="neighbourhood order written to the replicate configs")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("score", help="MARB / MRRMSE / coverage of runs against simulated truths")
    sp.add_argument("--truth", nargs="+", required=True, help="truth_XXX.csv files")
    sp.add_argument("--runs", nargs="+", required=True, help="run directories, same order as --truth")
    sp.add_argument("--scenario", help="scenario INI for parameter truths")
    sp.add_argument("--label", default="model")
    sp.add_argument("--out", required=True, help="output CSV")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("report", help="summary text and plot-ready CSVs for a run")
    sp.add_argument("run_dir")
    sp.add_argument("--compare", nargs="*", help="other run directories for dispersion tables")
    sp.add_argument("--out", help="report directory (default <run_dir>/report)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (MdmapError, ValueError, OSError) as exc:
        code = _exit_code(exc)
        print(f"mdmap: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
