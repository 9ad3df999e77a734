"""Command line: ``mmfs {select,eval,sweep,bench,gen} --long-flags ...``.

Exit codes: 0 success, 1 config or I/O error, 2 parse error, 3 solver did not
converge (results still written), 4 capacity limit exceeded.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import resource
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import load_cache, load_svmlight, normalize
from .errors import ConfigError, MMFSError
from .evaluation import (K_GRID_LARGE, K_GRID_SMALL, EvalProtocol, evaluate, sweep_gamma,
                         write_sweep_csv)
from .metrics import correlation_relevance, gram_matrix, scale_relevance
from .selection import SelectorConfig, rank_features, read_ranking, select_features
from .solvers import SolverConfig, box_qp_solve, mmfs_dcd
from .synthetic import GenConfig, generate, write_generated

OUTPUT_FORMAT = f"mmfs/{__version__}"
EXIT_OK, EXIT_CONFIG, EXIT_PARSE, EXIT_NOT_CONVERGED, EXIT_CAPACITY = 0, 1, 2, 3, 4


def derive_seed(seed: int, component: str) -> int:
    """Stable per-component seed from the single --seed."""
    digest = hashlib.sha256(f"{seed}:{component}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def parse_k_grid(text: str) -> list[int]:
    """``small``, ``large``, or comma-separated items ``a``, ``a:b``, ``a:b:step``."""
    if text == "small":
        return list(K_GRID_SMALL)
    if text == "large":
        return list(K_GRID_LARGE)
    out: list[int] = []
    try:
        for item in text.split(","):
            parts = [int(p) for p in item.split(":")]
            if len(parts) == 1:
                out.append(parts[0])
            elif len(parts) in (2, 3):
                step = parts[2] if len(parts) == 3 else 1
                out.extend(range(parts[0], parts[1] + 1, step))
            else:
                raise ValueError
    except ValueError:
        raise ConfigError(f"bad K grid {text!r}") from None
    return sorted(set(out))


def parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad number list {text!r}") from None


# -- argument wiring ----------------------------------------------------------------------------

def _add_data(p, required=True):
    p.add_argument("--data", required=required, help="SVMlight file or .npz cache")
    p.add_argument("--format", choices=("auto", "svmlight", "cache"), default="auto")
    p.add_argument("--zero-based", action="store_true", help="input indices start at 0")
    p.add_argument("--n-features", type=int, default=None)


def _add_selector(p):
    p.add_argument("--norm", choices=("centered_unit_norm", "unit_norm"), default="centered_unit_norm")
    p.add_argument("--solver", choices=("dcd", "qp"), default="dcd")
    p.add_argument("--kernel", choices=("linear", "poly2", "gaussian", "mi"), default="linear")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--relevance", choices=("correlation", "mi"), default="correlation")
    p.add_argument("--mi-bins", type=int, default=3)
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--max-sweeps", type=int, default=1000)
    p.add_argument("--no-shrinking", action="store_true")
    p.add_argument("--seed", type=int, default=0)


def _add_protocol(p):
    p.add_argument("--protocol", choices=("loocv", "split", "random"), default="random")
    p.add_argument("--test-data", default=None, help="held-out file for --protocol split")
    p.add_argument("--n-repeats", type=int, default=10)
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--k-grid", default="small")
    p.add_argument("--clf-C", type=float, default=1.0)
    p.add_argument("--clf-eps", type=float, default=0.1)
    p.add_argument("--paper-mode", action="store_true",
                   help="select once on all data instead of inside each training fold")
    p.add_argument("--jobs", type=int, default=1)


def _add_output(p, formats=("tsv", "json")):
    p.add_argument("--output", default=None, help="output path (stdout when omitted)")
    p.add_argument("--output-format", choices=formats, default=formats[0])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmfs", description="Max-margin feature selection")
    parser.add_argument("--version", action="version", version=OUTPUT_FORMAT)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("select", help="rank features")
    _add_data(p)
    _add_selector(p)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--telemetry", default=None, help="solver JSON (default: <output>.solution.json)")
    _add_output(p)

    p = sub.add_parser("eval", help="downstream accuracy over a K grid")
    _add_data(p)
    _add_selector(p)
    _add_protocol(p)
    p.add_argument("--ranking", default=None, help="ranking file from `select` (implies --paper-mode)")
    _add_output(p)

    p = sub.add_parser("sweep", help="accuracy surface over gamma x K")
    _add_data(p)
    _add_selector(p)
    _add_protocol(p)
    p.add_argument("--gamma-grid", default="0.1,0.3,1,3,10")
    _add_output(p, ("csv",))

    p = sub.add_parser("bench", help="time the pipeline phases")
    _add_data(p, required=False)
    _add_selector(p)
    p.add_argument("--n-instances", type=int, default=10_000)
    p.add_argument("--n-synthetic-features", type=int, default=100_000)
    p.add_argument("--nnz-per-instance", type=float, default=30)
    p.add_argument("--compare-qp", action="store_true", help="also time the dense QP path")
    p.add_argument("--repeats", type=int, default=1)
    _add_output(p, ("csv",))
    # synthetic bench data is sparse; centering would densify it
    p.set_defaults(norm="unit_norm")

    p = sub.add_parser("gen", help="write a synthetic SVMlight dataset and its manifest")
    p.add_argument("--n-instances", type=int, default=500)
    p.add_argument("--n-informative", type=int, default=2)
    p.add_argument("--n-noise", type=int, default=50)
    p.add_argument("--duplicate", action="append", default=[], metavar="FEATURE:COPIES",
                   help="append COPIES exact copies of 0-based base FEATURE (repeatable)")
    p.add_argument("--nnz-per-instance", type=float, default=None)
    p.add_argument("--label-noise", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.add_argument("--manifest", default=None, help="default: <output>.manifest.json")
    return parser


# -- helpers -------------------------------------------------------------------------------------

def run_config(args) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    return {"format_version": OUTPUT_FORMAT, "run_config": cfg}


def load_data(path, fmt="auto", zero_based=False, n_features=None):
    if fmt == "cache" or (fmt == "auto" and str(path).endswith(".npz")):
        return load_cache(path)
    return load_svmlight(path, one_based=not zero_based, n_features=n_features)


def selector_from(args) -> SelectorConfig:
    solver = SolverConfig(C=args.C, gamma=args.gamma, theta=args.theta, eps=args.eps,
                          max_sweeps=args.max_sweeps, shrinking=not args.no_shrinking,
                          rng_seed=derive_seed(args.seed, "solver"))
    return SelectorConfig(solver=solver, method=args.solver, norm_mode=args.norm,
                          kernel=args.kernel, sigma=args.sigma, relevance=args.relevance,
                          mi_bins=args.mi_bins)


def protocol_from(args, n_features) -> EvalProtocol:
    if args.protocol == "loocv":
        return EvalProtocol.loocv()
    if args.protocol == "split":
        if not args.test_data:
            raise ConfigError("--protocol split needs --test-data")
        test = load_data(args.test_data, args.format, args.zero_based, n_features)
        return EvalProtocol.fixed_split(test)
    return EvalProtocol.random_splits(args.n_repeats, args.test_fraction,
                                      derive_seed(args.seed, "splits"))


def emit(text: str, path) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# -- subcommands ------------------------------------------------------------------------------------

def cmd_select(args) -> int:
    selector = selector_from(args)
    raw = load_data(args.data, args.format, args.zero_based, args.n_features)
    sel = select_features(raw, selector)
    meta = run_config(args)
    buf = io.StringIO()
    if args.output_format == "json":
        doc = sel.ranking.to_json(meta)
        if args.top_k is not None:
            doc["entries"] = doc["entries"][:args.top_k]
        json.dump(doc, buf, indent=2, sort_keys=True)
        buf.write("\n")
    else:
        sel.ranking.write_tsv(buf, meta, limit=args.top_k)
    telemetry = dict(sel.solution.to_json(), meta=meta,
                     normalization={"mode": sel.report.mode.value,
                                    "constant_features": sel.report.constant_ids.tolist()},
                     tier_counts=sel.ranking.counts())
    telemetry_text = json.dumps(telemetry, indent=2, sort_keys=True) + "\n"
    emit(buf.getvalue(), args.output)
    tpath = args.telemetry or (f"{args.output}.solution.json" if args.output else None)
    if tpath:
        Path(tpath).write_text(telemetry_text, encoding="utf-8")
    return EXIT_OK if sel.solution.converged else EXIT_NOT_CONVERGED


def cmd_eval(args) -> int:
    selector = selector_from(args)
    raw = load_data(args.data, args.format, args.zero_based, args.n_features)
    protocol = protocol_from(args, raw.n_features)
    ranking = None
    if args.ranking:
        ranking = read_ranking(Path(args.ranking).read_text(encoding="utf-8"))
    report = evaluate(raw, parse_k_grid(args.k_grid), protocol, ranking=ranking,
                      selector=selector, C_clf=args.clf_C, clf_eps=args.clf_eps,
                      paper_mode=args.paper_mode, jobs=args.jobs)
    meta = run_config(args)
    # the two decomposed/end-to-end spellings must produce the same artifact
    meta["run_config"].pop("ranking", None)
    meta["run_config"].pop("paper_mode", None)
    buf = io.StringIO()
    if args.output_format == "json":
        json.dump(report.to_json(meta), buf, indent=2, sort_keys=True)
        buf.write("\n")
    else:
        report.write_tsv(buf, meta)
    emit(buf.getvalue(), args.output)
    return EXIT_OK


def cmd_sweep(args) -> int:
    selector = selector_from(args)
    raw = load_data(args.data, args.format, args.zero_based, args.n_features)
    protocol = protocol_from(args, raw.n_features)
    cells = sweep_gamma(raw, parse_floats(args.gamma_grid), parse_k_grid(args.k_grid), protocol,
                        selector=selector, C_clf=args.clf_C, clf_eps=args.clf_eps,
                        paper_mode=args.paper_mode, jobs=args.jobs)
    buf = io.StringIO()
    write_sweep_csv(cells, buf, run_config(args))
    emit(buf.getvalue(), args.output)
    return EXIT_OK


def _peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def bench_once(args) -> dict:
    selector = selector_from(args)
    row: dict = {}
    t0 = time.perf_counter()
    if args.data:
        raw = load_data(args.data, args.format, args.zero_based, args.n_features)
        row["source"] = str(args.data)
    else:
        n_inf = 10
        cfg = GenConfig(n_instances=args.n_instances, n_informative=n_inf,
                        n_noise=args.n_synthetic_features - n_inf,
                        nnz_per_instance=args.nnz_per_instance,
                        seed=derive_seed(args.seed, "bench-data"))
        raw, _ = generate(cfg)
        row["source"] = "synthetic"
    t1 = time.perf_counter()
    data, _ = normalize(raw, selector.norm_mode)
    t2 = time.perf_counter()
    r = correlation_relevance(data)
    t3 = time.perf_counter()
    r_scaled = scale_relevance(r, selector.solver.theta)
    sol = mmfs_dcd(data, r_scaled, selector.solver)
    t4 = time.perf_counter()
    rank_features(sol, r)
    t5 = time.perf_counter()
    row.update(n_instances=raw.n_instances, n_features=raw.n_features, nnz=raw.nnz,
               load_s=t1 - t0, normalize_s=t2 - t1, relevance_s=t3 - t2, solve_s=t4 - t3,
               rank_s=t5 - t4, sweeps=sol.sweeps_used, status=sol.status,
               dcd_objective=sol.dual_objective)
    if args.compare_qp:
        t6 = time.perf_counter()
        Q = gram_matrix(data).values
        ref = box_qp_solve(Q, r_scaled.values, selector.solver.gamma, selector.solver.C,
                           seed=selector.solver.rng_seed)
        t7 = time.perf_counter()
        row.update(qp_s=t7 - t6, qp_objective=ref.dual_objective,
                   rel_gap=abs(sol.dual_objective - ref.dual_objective) / max(abs(ref.dual_objective), 1e-300),
                   speedup=(t7 - t6) / max(t4 - t3, 1e-12))
    row["peak_rss_mb"] = _peak_rss_mb()
    return row


def cmd_bench(args) -> int:
    rows = [dict(bench_once(args), repeat=i) for i in range(args.repeats)]
    buf = io.StringIO()
    buf.write(f"# meta: {json.dumps(run_config(args), sort_keys=True)}\n")
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    emit(buf.getvalue(), args.output)
    return EXIT_OK if all(r["status"] == "converged" for r in rows) else EXIT_NOT_CONVERGED


def cmd_gen(args) -> int:
    dups = []
    for spec in args.duplicate:
        try:
            f, c = spec.split(":")
            dups.append((int(f), int(c)))
        except ValueError:
            raise ConfigError(f"bad --duplicate {spec!r}; expected FEATURE:COPIES") from None
    cfg = GenConfig(n_instances=args.n_instances, n_informative=args.n_informative,
                    n_noise=args.n_noise, duplicates=tuple(dups),
                    nnz_per_instance=args.nnz_per_instance, label_noise=args.label_noise,
                    seed=args.seed)
    write_generated(cfg, args.output, args.manifest or f"{args.output}.manifest.json")
    return EXIT_OK


COMMANDS = {"select": cmd_select, "eval": cmd_eval, "sweep": cmd_sweep,
            "bench": cmd_bench, "gen": cmd_gen}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except MMFSError as exc:
        print(f"mmfs: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mmfs: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
