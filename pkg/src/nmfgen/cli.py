"""Command-line interface.

Exit codes: 0 success, 1 input or usage error, 2 fit did not converge (all
outputs are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional

from threadpoolctl import threadpool_limits

from . import bench as benchmod
from .deviance import SupportError
from .diagnose import FitReport, fit_report, match_features, meanvar_csv, residual_table, top_entries
from .estimate import EstimationError, estimate_alpha, estimate_power, fit_model
from .factorize import Factorization, FitConfig, fit
from .io import MatrixFormatError, default_labels, load_matrix, write_coord, write_matrix_csv, write_rows_csv
from .model import (
    CostModel,
    Family,
    ModelSpec,
    ModelSpecError,
    Variant,
    format_model_spec,
    free_parameter_count,
    parse_model_spec,
)
from .synth import FAMILIES, synth

log = logging.getLogger("nmfgen")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2
INPUT_ERRORS = (OSError, MatrixFormatError, ModelSpecError, SupportError, EstimationError, ValueError)
ALL_MODELS = tuple(f"NMF/{v}/{f}" for v in ("T", "C") for f in ("N", "Po", "TW", "NB"))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which collides with the non-convergence code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _labels(v):
    rows = list(v.row_labels) if v.row_labels is not None else default_labels("r", v.n_rows)
    cols = list(v.col_labels) if v.col_labels is not None else default_labels("c", v.n_cols)
    return rows, cols


def _config(args) -> FitConfig:
    return FitConfig(tol=args.tol, max_iter=args.max_iter, restarts=args.restarts, seed=args.seed)


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2) + "\n")
    return path


def _spec_tag(spec: ModelSpec) -> str:
    return format_model_spec(spec).replace("NMF/", "").replace("/", "_")


def write_factors(out: Path, fac: Factorization, row_labels, col_labels) -> List[Path]:
    """Factor CSVs plus ``features.csv`` (K x M) for either variant."""
    f = default_labels("F", fac.rank)
    written = []
    if fac.variant is Variant.TRADITIONAL:
        written.append(write_matrix_csv(out / "W.csv", fac.W, row_labels, f))
        written.append(write_matrix_csv(out / "H.csv", fac.H, f, col_labels))
    else:
        written.append(write_matrix_csv(out / "E.csv", fac.E, row_labels, f))
        written.append(write_matrix_csv(out / "D.csv", fac.D, f, row_labels))
        written.append(write_matrix_csv(out / "VtE.csv", fac.vte, col_labels, f))
    written.append(write_matrix_csv(out / "features.csv", fac.features, f, col_labels))
    return written


def read_factors(fit_dir: Path, variant: Variant) -> Factorization:
    if variant is Variant.TRADITIONAL:
        W = load_matrix(fit_dir / "W.csv").dense()
        H = load_matrix(fit_dir / "H.csv").dense()
        return Factorization(variant, W=W, H=H, normalized=True)
    E = load_matrix(fit_dir / "E.csv").dense()
    D = load_matrix(fit_dir / "D.csv").dense()
    vte = load_matrix(fit_dir / "VtE.csv").dense()
    return Factorization(variant, E=E, D=D, vte=vte, normalized=True)


# -- commands ---------------------------------------------------------------


def cmd_fit(args) -> int:
    spec = parse_model_spec(args.model)
    if spec.rank is None:
        raise UsageError(f"model spec {args.model!r} needs a rank, e.g. {args.model}/3")
    config = _config(args)
    v = load_matrix(args.input, args.format)
    rows, cols = _labels(v)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    res = fit_model(v, spec, config)
    fac = res.fit
    t0 = time.perf_counter()
    report = fit_report(v, fac, res.cost, res.spec)
    t_diag = time.perf_counter() - t0

    written = write_factors(out, fac, rows, cols)
    written.append(write_rows_csv(out / "trace.csv", ["iteration", "divergence"],
                                  enumerate(map(float, fac.divergence_trace))))
    manifest = [p.name for p in written] + ["report.json"]
    run = {
        "spec": format_model_spec(res.spec),
        "requested_spec": format_model_spec(spec),
        "config": config.to_dict(),
        "seed": fac.seed,
        "iterations": fac.iterations,
        "converged": fac.converged,
        "final_divergence": fac.final_divergence,
        "loglik": report.loglik,
        "bic": report.bic,
        "n_params": report.n_params,
        "loglik_error": report.error,
        "cost": res.cost.to_dict(),
        "timings": {"estimate": res.timings.get("estimate", 0.0), "fit": res.timings.get("fit", 0.0),
                    "diagnose": t_diag},
        "manifest": manifest,
    }
    _write_json(out / "report.json", run)
    if not fac.converged:
        log.warning("no convergence after %d iterations; outputs written to %s", fac.iterations, out)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _select_one(v, spec: ModelSpec, config: FitConfig, out: Path, max_rows: Optional[int]):
    n, m = v.shape
    try:
        res = fit_model(v, spec, config)
    except INPUT_ERRORS + (ArithmeticError,) as exc:
        log.warning("%s failed: %s", format_model_spec(spec), exc)
        return FitReport(format_model_spec(spec), None, free_parameter_count(spec, n, m), None, None,
                         error=f"{type(exc).__name__}: {exc}"), []
    report = fit_report(v, res.fit, res.cost, res.spec)
    tag = _spec_tag(spec)
    table = residual_table(v, res.fit, res.cost, max_rows=max_rows, seed=config.seed)
    files = [out / f"residuals_{tag}.csv", out / f"meanvar_{tag}.csv"]
    with open(files[0], "w", newline="") as fh:
        table.to_csv(fh)
    files[1].write_text(meanvar_csv(report.meanvar_curve))
    return report, files


def cmd_select(args) -> int:
    specs = [parse_model_spec(s).with_rank(args.rank) for s in (args.models or ALL_MODELS)]
    config = _config(args)
    v = load_matrix(args.input, args.format)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for spec in specs:
        report, _ = _select_one(v, spec, config, out, args.max_rows)
        reports.append(report)
    reports.sort(key=lambda r: (r.bic is None, r.bic if r.bic is not None else 0.0))
    _write_json(out / "select.json", [r.to_dict() for r in reports])
    for r in reports:
        bic = f"{r.bic:.6g}" if r.bic is not None else "-"
        print(f"{r.spec}\t{bic}\t{r.error or ''}".rstrip())
    return EXIT_OK


def cmd_estimate_alpha(args) -> int:
    v = load_matrix(args.input, args.format)
    spec = ModelSpec(Variant(args.variant), Family.POISSON, None, args.rank)
    config = _config(args)
    pre = fit(v, spec, CostModel.poisson(), config)
    alpha = estimate_alpha(v, pre.fitted_values)
    _emit(args.out, {"alpha": alpha, "prefit": format_model_spec(spec),
                     "prefit_divergence": pre.final_divergence, "seed": pre.seed})
    return EXIT_OK


def cmd_estimate_power(args) -> int:
    v = load_matrix(args.input, args.format)
    spec = ModelSpec(Variant(args.variant), Family.TWEEDIE, None, args.rank)
    p, s2, prof = estimate_power(v, spec, _config(args), step=args.step, refine=args.refine)
    result = {"p": p, "sigma2": s2, "loglik": prof.argmax_loglik,
              "skipped": [{"p": g, "reason": why} for g, why in prof.skipped]}
    if args.profile:
        write_rows_csv(Path(args.profile), ["p", "loglik", "sigma2"],
                       [(r["param"], r["loglik"], r["sigma2"]) for r in prof.to_rows()])
    _emit(args.out, result)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    fit_dir = Path(args.fit)
    run = json.loads((fit_dir / "report.json").read_text())
    spec = parse_model_spec(run["spec"])
    cost = CostModel.from_dict(run["cost"])
    v = load_matrix(args.input, args.format)
    fac = read_factors(fit_dir, spec.variant)
    if fac.fitted_values.shape != v.shape:
        raise UsageError(f"factors in {fit_dir} reconstruct {fac.fitted_values.shape}, data is {v.shape}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = fit_report(v, fac, cost, spec)
    table = residual_table(v, fac, cost, max_rows=args.max_rows, seed=args.seed)
    with open(out / "residuals.csv", "w", newline="") as fh:
        table.to_csv(fh)
    (out / "meanvar.csv").write_text(meanvar_csv(report.meanvar_curve))
    d = report.to_dict()
    d["residual_rows"] = len(table)
    d["downsample_seed"] = table.downsample_seed
    if args.topk:
        _, cols = _labels(v)
        rows = []
        for k, entries in enumerate(top_entries(fac.features, cols, args.topk)):
            rows += [(f"F{k + 1}", r + 1, lab, w) for r, (lab, w) in enumerate(entries)]
        write_rows_csv(out / "top_entries.csv", ["feature", "rank", "label", "weight"], rows)
    _write_json(out / "diagnose.json", d)
    return EXIT_OK


def cmd_compare(args) -> int:
    a = load_matrix(args.features_a)
    b = load_matrix(args.features_b)
    if a.n_cols != b.n_cols:
        raise UsageError(f"feature files differ in width: {a.n_cols} vs {b.n_cols} columns")
    if a.col_labels is not None and b.col_labels is not None and list(a.col_labels) != list(b.col_labels):
        log.warning("column labels differ between feature files; matching by position")
    la = list(a.row_labels) if a.row_labels is not None else default_labels("F", a.n_rows)
    lb = list(b.row_labels) if b.row_labels is not None else default_labels("F", b.n_rows)
    m = match_features(a.dense(), b.dense())
    rows = [(la[i], lb[j] if j is not None else "", s) for i, j, s in m.pairs]
    summary = {"mean": m.mean, "min": m.min, "total": m.total,
               "pairs": [{"a": ra, "b": rb or None, "cosine": s} for ra, rb, s in rows]}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_rows_csv(out / "matching.csv", ["feature_a", "feature_b", "cosine"], rows)
        _write_json(out / "matching.json", summary)
    else:
        print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_synth(args) -> int:
    params = {}
    if args.family == "negbin":
        params["alpha"] = args.alpha
    elif args.family == "cpoisson":
        params.update(p=args.p, sigma2=args.sigma2)
    elif args.family == "normal":
        params["sigma2"] = args.sigma2
    V, W, H = synth(args.n, args.m, args.k, args.family, seed=args.seed, mean=args.mean, **params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    f = default_labels("F", args.k)
    if args.format == "coord":
        write_coord(out / "V.coord", V)
    else:
        write_matrix_csv(out / "V.csv", V)
    write_matrix_csv(out / "W.csv", W, default_labels("r", args.n), f)
    write_matrix_csv(out / "H.csv", H, f, default_labels("c", args.m))
    return EXIT_OK


def cmd_bench(args) -> int:
    specs = [parse_model_spec(s) for s in args.models]
    threads = int(os.environ.get("NMFGEN_THREADS", "1"))
    records = benchmod.run_bench(specs, args.sizes, args.m, args.k, reps=args.reps, seed=args.seed,
                                 threads=threads)
    rows = [[getattr(r, k) for k in benchmod.FIELDS] for r in records]
    if args.out:
        write_rows_csv(Path(args.out), benchmod.FIELDS, rows)
    else:
        print(",".join(benchmod.FIELDS))
        for r in rows:
            print(",".join(repr(x) if isinstance(x, float) else str(x) for x in r))
    return EXIT_OK


def _emit(path: Optional[str], obj) -> None:
    if path:
        _write_json(Path(path), obj)
    else:
        print(json.dumps(obj, indent=2))


# -- parser -----------------------------------------------------------------


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return n


def _int_list(text: str) -> List[int]:
    return [_positive_int(t) for t in text.replace(",", " ").split()]


def _add_input(p):
    p.add_argument("--input", required=True, help="data matrix file")
    p.add_argument("--format", choices=("csv", "coord"), default="csv")


def _add_fit_config(p):
    p.add_argument("--tol", type=float, default=None,
                   help="absolute convergence tolerance (default: 1e-6 x first-iteration divergence)")
    p.add_argument("--max-iter", type=_positive_int, default=10_000)
    p.add_argument("--restarts", type=_positive_int, default=5)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="nmfgen", description="Non-negative matrix factorization under Normal, Poisson, "
                                             "Tweedie and negative binomial models.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit one model and write factors, trace and report")
    _add_input(p)
    p.add_argument("--model", required=True, help="e.g. NMF/T/NB/5 or NMF/C/TW_1.5/3")
    _add_fit_config(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="fit several models at one rank and rank them by BIC")
    _add_input(p)
    p.add_argument("--rank", type=_positive_int, required=True)
    p.add_argument("--models", nargs="+", help=f"model specs without rank (default: {' '.join(ALL_MODELS)})")
    p.add_argument("--max-rows", type=_positive_int, default=None, help="downsample residual CSVs")
    _add_fit_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    for name, func, doc in (("estimate-alpha", cmd_estimate_alpha, "NB dispersion from a Poisson pre-fit"),
                            ("estimate-power", cmd_estimate_power, "Tweedie power by profile likelihood")):
        p = sub.add_parser(name, help=doc)
        _add_input(p)
        p.add_argument("--rank", type=_positive_int, required=True)
        p.add_argument("--variant", choices=("T", "C"), default="T")
        _add_fit_config(p)
        p.add_argument("--out", help="JSON output path (default: stdout)")
        if name == "estimate-power":
            p.add_argument("--step", type=float, default=0.05)
            p.add_argument("--refine", action="store_true", help="second pass at step 0.01")
            p.add_argument("--profile", help="write the profile likelihood CSV here")
        p.set_defaults(func=func)

    p = sub.add_parser("diagnose", help="residuals, mean-variance curve and BIC for a saved fit")
    _add_input(p)
    p.add_argument("--fit", required=True, help="output directory of a previous fit")
    p.add_argument("--max-rows", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=0, help="downsampling seed")
    p.add_argument("--topk", type=_positive_int, default=None, help="write top entries per feature")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("compare", help="match two feature sets by cosine similarity")
    p.add_argument("--features-a", required=True)
    p.add_argument("--features-b", required=True)
    p.add_argument("--out", help="output directory (default: JSON summary on stdout)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("synth", help="sample a matrix from a planted factorization")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--m", type=_positive_int, required=True)
    p.add_argument("--k", type=_positive_int, required=True)
    p.add_argument("--family", choices=FAMILIES, required=True)
    p.add_argument("--alpha", type=float, default=5.0)
    p.add_argument("--p", type=float, default=1.5)
    p.add_argument("--sigma2", type=float, default=1.0)
    p.add_argument("--mean", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "coord"), default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="seconds per update sweep against N")
    p.add_argument("--sizes", type=_int_list, required=True, help="N values, e.g. 500,1000,2000")
    p.add_argument("--m", type=_positive_int, default=96)
    p.add_argument("--k", type=_positive_int, default=5)
    p.add_argument("--reps", type=_positive_int, default=10)
    p.add_argument("--models", nargs="+", default=["NMF/T/Po", "NMF/C/Po"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    cap = os.environ.get("NMFGEN_THREADS")
    try:
        limits = threadpool_limits(limits=int(cap)) if cap else nullcontext()
        with limits:
            return args.func(args)
    except UsageError as exc:
        print(f"nmfgen {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except INPUT_ERRORS as exc:
        print(f"nmfgen {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
