"""Command-line workflows: bench generation, batch detection, magnitude
reconstruction, evaluation tables, and the model self-check.

Every command is deterministic for fixed flags and seed: artifacts carry the
full effective configuration and no timestamps. Wall-clock timings go to
stderr (and into the report JSON only behind ``--timings``, which gives up
byte-level reproducibility of that field).

Exit codes: 0 success, 1 usage, 2 data error, 3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .bench import BenchError, BenchSpec, generate_bench, load_bench, save_bench
from .dictionary import position_grid
from .fibermodel import (
    DEFAULT_CONSTANTS,
    default_frequency_grid,
    default_z_grid,
    frequency_response_analytic,
    frequency_response_numeric,
    link_from_dict,
    profile_from_csv,
    profile_to_csv,
    time_domain_profile,
)
from .lasso import ConvergenceError
from .metrics import (
    DEFAULT_RADIUS_M,
    contingency,
    format_band_table,
    format_contingency_table,
    match_events,
    stratify_errors,
)
from .pipeline import (
    DetectorConfig,
    detect,
    naive_magnitudes,
    reconstruct_magnitudes,
    report_from_dict,
    report_to_dict,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_SOLVER = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _default_out(flag_value: str | None, fallback: str) -> Path:
    if flag_value:
        return Path(flag_value)
    env = os.environ.get("BSSLASSO_OUT_DIR")
    return Path(env) / fallback if env else Path(fallback)


# ---------------------------------------------------------------------------
# gen-bench


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def cmd_gen_bench(args) -> int:
    spec = BenchSpec(
        n_links=args.links,
        n_faults=args.faults,
        length_range=(args.length_min, args.length_max),
        fault_floor=args.fault_floor,
        reflection_probability=args.reflect_prob,
        loss_range=(args.loss_min, args.loss_max),
        reflectance_max=args.reflect_max,
        min_spacing=args.spacing,
        seed=args.seed,
        freq_start=args.freq_start,
        freq_stop=args.freq_stop,
        freq_step=args.freq_step,
        z_step=args.z_step,
        noise_sigma=args.noise_sigma,
    )
    out = _default_out(args.out, f"bench_{args.faults}f_{args.seed}")
    t0 = time.perf_counter()
    save_bench(spec, generate_bench(spec), out)
    print(f"wrote {spec.n_links} links to {out} [{time.perf_counter() - t0:.1f}s]", file=sys.stderr)
    print(str(out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# detect


def _config_from_args(args, length: float | None) -> DetectorConfig:
    base = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            base = json.load(fh)
    flag_map = {
        "mode": args.mode,
        "grid_step_m": args.grid_step,
        "grid_margin_m": args.grid_margin,
        "gamma": args.gamma,
        "epsilon": args.epsilon,
        "ebic_gamma": args.ebic_gamma,
        "lambda_count": args.lambda_count,
        "lambda_decades": args.lambda_decades,
        "include_intercept": args.intercept,
        "reconstruct_target": args.reconstruct_target,
    }
    # explicit flags win over the config file
    for key, val in flag_map.items():
        if val is not None:
            base[key] = val
    base["fiber_length_m"] = length
    return DetectorConfig.from_dict(base)


def _detect_one(task) -> dict:
    (idx, csv_path, length, cfg_dict, out_dir, do_reconstruct, include_runtime) = task
    cfg = DetectorConfig.from_dict({**cfg_dict, "fiber_length_m": length})
    try:
        profile = profile_from_csv(Path(csv_path).read_text())
    except (OSError, ValueError) as exc:
        return {"index": idx, "status": "data-error", "error": str(exc)}
    t0 = time.perf_counter()
    try:
        report = detect(profile, cfg)
        if do_reconstruct:
            report = reconstruct_magnitudes(report, observation=profile)
    except ConvergenceError as exc:
        return {"index": idx, "status": "solver-error", "error": str(exc)}
    dt = time.perf_counter() - t0
    fitted_name = f"fitted_{idx}.csv"
    out = Path(out_dir)
    _write_atomic(out / fitted_name, profile_to_csv(report.fitted_profile))
    doc = report_to_dict(
        report,
        fitted_profile_ref=fitted_name,
        include_runtime=include_runtime,
        link_info={"index": idx, "source": Path(csv_path).name},
    )
    if do_reconstruct:
        doc["naive_magnitudes"] = naive_magnitudes(report)
    _write_atomic(out / f"report_{idx}.json", _dump_json(doc))
    return {"index": idx, "status": "ok", "runtime_s": dt, "n_estimates": len(report.estimates)}


def cmd_detect(args) -> int:
    src = Path(args.input)
    out = _default_out(args.out, "reports")
    out.mkdir(parents=True, exist_ok=True)
    tasks = []
    if src.is_dir():
        try:
            manifest = json.loads((src / "bench.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read bench manifest: {exc}", file=sys.stderr)
            return EXIT_DATA
        cfg = _config_from_args(args, None)
        cfg_dict = cfg.to_dict()
        cfg_dict.pop("fiber_length_m", None)
        for entry in manifest.get("links", []):
            tasks.append(
                (
                    entry["index"],
                    str(src / entry["profile_csv"]),
                    float(entry["length_m"]),
                    cfg_dict,
                    str(out),
                    args.reconstruct,
                    args.timings,
                )
            )
    else:
        if args.length_m is None:
            print("error: --length-m is required for a single profile", file=sys.stderr)
            return EXIT_USAGE
        cfg = _config_from_args(args, args.length_m)
        cfg_dict = cfg.to_dict()
        cfg_dict.pop("fiber_length_m", None)
        tasks.append((0, str(src), args.length_m, cfg_dict, str(out), args.reconstruct, args.timings))

    t0 = time.perf_counter()
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_detect_one, tasks))
    else:
        results = [_detect_one(t) for t in tasks]
    results.sort(key=lambda r: r["index"])

    n_ok = sum(1 for r in results if r["status"] == "ok")
    summary = {
        "schema": "bsslasso-detect-summary/1",
        "config": cfg_dict,
        "links": [
            {k: r[k] for k in ("index", "status", "error", "n_estimates") if k in r}
            for r in results
        ],
    }
    _write_atomic(out / "detect_summary.json", _dump_json(summary))
    wall = time.perf_counter() - t0
    print(
        f"{n_ok}/{len(tasks)} links ok in {wall:.1f}s"
        f" ({wall / max(len(tasks), 1):.2f}s/link, jobs={args.jobs}) -> {out}",
        file=sys.stderr,
    )
    for r in results:
        if r["status"] != "ok":
            print(f"  link {r['index']}: {r['status']}: {r['error']}", file=sys.stderr)
    if any(r["status"] == "solver-error" for r in results):
        return EXIT_SOLVER
    if any(r["status"] == "data-error" for r in results):
        return EXIT_DATA
    print(str(out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# reconstruct


def cmd_reconstruct(args) -> int:
    reports_dir = Path(args.reports)
    paths = sorted(reports_dir.glob("report_*.json"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        print(f"error: no report_*.json under {reports_dir}", file=sys.stderr)
        return EXIT_DATA
    bench_items = None
    if args.bench:
        try:
            _, bench_items = load_bench(args.bench)
        except BenchError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
    for path in paths:
        doc = report_from_dict(json.loads(path.read_text()))
        cfg = DetectorConfig.from_dict(doc["config"])
        fitted = profile_from_csv((reports_dir / doc["fitted_profile_ref"]).read_text())
        idx = (doc.get("link") or {}).get("index", 0)
        observation = None
        if cfg.reconstruct_target == "observation":
            if bench_items is None:
                print("error: reconstruct target 'observation' needs --bench", file=sys.stderr)
                return EXIT_DATA
            observation = bench_items[idx][1]
        report = _report_shell_from_doc(doc, cfg, fitted)
        filled = reconstruct_magnitudes(report, observation=observation)
        doc["estimates"] = [
            {
                "position_m": e.position_m,
                "is_reflective": e.is_reflective,
                "loss_db": e.loss_db,
                "reflectance_db": e.reflectance_db,
            }
            for e in filled.estimates
        ]
        doc["naive_magnitudes"] = naive_magnitudes(report)
        _write_atomic(path, _dump_json(doc))
    print(f"reconstructed magnitudes in {len(paths)} reports", file=sys.stderr)
    print(str(reports_dir))
    return EXIT_OK


def _report_shell_from_doc(doc, cfg, fitted):
    """Rebuild just enough of a report for magnitude reconstruction."""
    from .pipeline import DetectionReport, EventEstimate, SelectionVector, StageOutput

    grid = position_grid(cfg.fiber_length_m, cfg.grid_step_m, cfg.grid_margin_m)
    q = len(grid)
    n_r = q if cfg.mode != "sinclasso" else 0
    values = np.zeros(q + n_r)
    treated = None
    for st in doc.get("stage_diagnostics", []):
        if st["stage"] == "treated":
            treated = st
    if treated is not None:
        for item in treated["support"]:
            off = 0 if item["block"] == "fault" else q
            values[off + item["index"]] = item["value"]
    stage = StageOutput(
        beta=SelectionVector(values, q, n_r),
        stage="treated",
        weights_used=np.ones(q + n_r),
        lambda_chosen=float("nan"),
        ebic=float("nan"),
        rss=treated["rss"] if treated else float("nan"),
        intercept=treated.get("intercept", 0.0) if treated else 0.0,
    )
    estimates = tuple(
        EventEstimate(e["position_m"], e["is_reflective"], e.get("loss_db"), e.get("reflectance_db"))
        for e in doc["estimates"]
    )
    return DetectionReport(
        estimates=estimates,
        fitted_profile=fitted,
        diagnostics=(stage,),
        config=cfg,
        runtime_s=0.0,
        grid_positions=grid.positions,
    )


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    try:
        spec, items = load_bench(args.bench)
    except BenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    report_sets = {}
    for label_dir in args.reports:
        label, _, d = label_dir.partition("=")
        if not d:
            label, d = Path(label_dir).name, label_dir
        report_sets[label] = Path(d)
    out = _default_out(args.out, "evaluation")
    out.mkdir(parents=True, exist_ok=True)

    per_mode_strat = {}
    per_mode_table = {}
    rows = []
    for label, rdir in report_sets.items():
        matches, grid_sizes = [], []
        for idx, (link, _prof) in enumerate(items):
            rpath = rdir / f"report_{idx}.json"
            if not rpath.is_file():
                print(f"error: {rdir} has no report for link {idx}; bench/report mismatch", file=sys.stderr)
                return EXIT_DATA
            doc = report_from_dict(json.loads(rpath.read_text()))
            cfg = doc["config"]
            est = [e["position_m"] for e in doc["estimates"]]
            m = match_events(link, est, radius=args.radius)
            matches.append(m)
            grid = position_grid(link.length, cfg["grid_step_m"], cfg["grid_margin_m"])
            grid_sizes.append(len(grid))
            for t, e, err in m.pairs:
                rows.append([label, idx, t, e, err])
            for t in m.unmatched_truths:
                rows.append([label, idx, t, "", ""])
            for e in m.unmatched_estimates:
                rows.append([label, idx, "", e, ""])
        per_mode_strat[label] = stratify_errors(matches)
        per_mode_table[label] = contingency(matches, grid_sizes, radius=args.radius)

    set_label = f"{spec.n_faults} fault" + ("s" if spec.n_faults != 1 else "")
    band_txt = format_band_table({set_label: per_mode_strat})
    cont_txt = format_contingency_table(per_mode_table, args.radius)
    tables = band_txt + "\n\n" + cont_txt + "\n"
    _write_atomic(out / "tables.txt", tables)
    payload = {
        "schema": "bsslasso-evaluation/1",
        "bench": str(args.bench),
        "radius_m": args.radius,
        "n_links": len(items),
        "n_faults": spec.n_faults,
        "bands": {k: v for k, v in per_mode_strat.items()},
        "contingency": {
            k: {
                "tp": t.true_positives,
                "fp": t.false_positives,
                "fn": t.false_negatives,
                "tn": t.true_negatives,
                "sensitivity": t.sensitivity,
                "specificity": t.specificity,
                "precision": t.precision,
            }
            for k, t in per_mode_table.items()
        },
    }
    _write_atomic(out / "evaluation.json", _dump_json(payload))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "link", "truth_m", "estimate_m", "error_m"])
    w.writerows(rows)
    _write_atomic(out / "per_event_errors.csv", buf.getvalue())
    print(tables)
    print(f"wrote {out}/tables.txt, evaluation.json, per_event_errors.csv", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate-model


def cmd_validate_model(args) -> int:
    try:
        link = link_from_dict(json.loads(Path(args.link).read_text()))
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    freqs = default_frequency_grid(args.freq_start, args.freq_stop, args.freq_step)
    z = default_z_grid(link.length, args.z_step)
    p = time_domain_profile(link, DEFAULT_CONSTANTS, z)
    num = frequency_response_numeric(z, p, DEFAULT_CONSTANTS, freqs)
    ana = frequency_response_analytic(link, DEFAULT_CONSTANTS, freqs)
    rel = float(np.linalg.norm(num.samples - ana.samples) / np.linalg.norm(ana.samples))
    reflective = any(e.is_reflective for e in link.events)
    tol = args.tol if args.tol is not None else (1e-3 if reflective else 1e-6)
    verdict = "PASS" if rel <= tol else "FAIL"
    print(f"relative l2 mismatch: {rel:.3e}  (tolerance {tol:g}, {'with' if reflective else 'no'} reflections)")
    print(verdict)
    return EXIT_OK if rel <= tol else EXIT_DATA


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bsslasso", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-bench", help="generate a randomized bench directory")
    g.add_argument("--links", type=_positive_int, default=100)
    g.add_argument("--faults", type=_positive_int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=str, default=None)
    g.add_argument("--length-min", type=float, default=2000.0)
    g.add_argument("--length-max", type=float, default=15000.0)
    g.add_argument("--fault-floor", type=float, default=2000.0)
    g.add_argument("--reflect-prob", type=float, default=0.5)
    g.add_argument("--loss-min", type=float, default=1.0)
    g.add_argument("--loss-max", type=float, default=5.0)
    g.add_argument("--reflect-max", type=float, default=20.0)
    g.add_argument("--spacing", type=float, default=10.0)
    g.add_argument("--freq-start", type=float, default=100.0)
    g.add_argument("--freq-stop", type=float, default=100_000.0)
    g.add_argument("--freq-step", type=float, default=100.0)
    g.add_argument("--z-step", type=float, default=0.25)
    g.add_argument("--noise-sigma", type=float, default=0.0)
    g.set_defaults(func=cmd_gen_bench)

    d = sub.add_parser("detect", help="run detection on a bench directory or one profile CSV")
    d.add_argument("input", help="bench directory or profile CSV path")
    d.add_argument("--out", type=str, default=None)
    d.add_argument("--mode", choices=("bss-lasso", "bss-1", "sinclasso"), default=None)
    d.add_argument("--length-m", type=float, default=None, help="fiber length for a single CSV input")
    d.add_argument("--grid-step", type=float, default=None)
    d.add_argument("--grid-margin", type=float, default=None)
    d.add_argument("--gamma", type=float, default=None)
    d.add_argument("--epsilon", type=float, default=None)
    d.add_argument("--ebic-gamma", type=float, default=None)
    d.add_argument("--lambda-count", type=int, default=None)
    d.add_argument("--lambda-decades", type=float, default=None)
    d.add_argument("--intercept", action="store_true", default=None,
                   help="fit an unpenalized offset (measured data)")
    d.add_argument("--reconstruct", action="store_true", help="also fill magnitudes in")
    d.add_argument("--reconstruct-target", choices=("fitted", "observation"), default=None)
    d.add_argument("--config", type=str, default=None, help="JSON config file; flags override it")
    d.add_argument("--jobs", type=int, default=1)
    d.add_argument("--timings", action="store_true",
                   help="embed wall-clock runtime in reports (not byte-reproducible)")
    d.set_defaults(func=cmd_detect)

    r = sub.add_parser("reconstruct", help="fill magnitudes into existing reports")
    r.add_argument("reports", help="directory with report_*.json and fitted_*.csv")
    r.add_argument("--bench", type=str, default=None,
                   help="bench directory (needed when scoring against the observation)")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="score report directories against a bench")
    e.add_argument("bench", help="bench directory")
    e.add_argument("--reports", action="append", required=True,
                   help="label=dir (repeatable) or just dir")
    e.add_argument("--radius", type=float, default=DEFAULT_RADIUS_M)
    e.add_argument("--out", type=str, default=None)
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("validate-model", help="closed-form vs quadrature self-check on a link file")
    v.add_argument("link", help="link JSON file")
    v.add_argument("--z-step", type=float, default=0.25)
    v.add_argument("--freq-start", type=float, default=100.0)
    v.add_argument("--freq-stop", type=float, default=100_000.0)
    v.add_argument("--freq-step", type=float, default=100.0)
    v.add_argument("--tol", type=float, default=None)
    v.set_defaults(func=cmd_validate_model)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except BenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConvergenceError as exc:
        print(f"error: solver did not converge: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
