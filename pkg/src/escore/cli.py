"""Command-line surface: simulate, analyze, oracle-check.

Exit codes: 0 on success, 1 when an identity or acceptance gate fails,
2 on usage or input-validation errors. Every run writes a manifest JSON
next to its outputs recording the resolved configuration, the seed, and
package version; the data outputs are byte-reproducible given the same
arguments (the manifest's wall-time field is the one volatile value).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np
from scipy import stats

from . import __version__
from .estimators import ESTIMATOR_IDS, TargetSpec, estimate
from .numkit import KernelSpec
from .nuisance import Dataset, NuisanceSpec
from .oracle import run_identity_suite
from .simlab import SimConfig, VALID_SAMPLE_SIZES, run_campaign

ESTIMATOR_LABELS = {
    "gcomp": "G-comp",
    "aipw": "AIPW",
    "tmle": "TMLE",
    "etmle": "e-TMLE",
    "etmle_al": "e-TMLE-AL",
}


def _write_text(path: str, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_manifest(path: str, payload: dict):
    payload = dict(payload)
    payload["version"] = __version__
    _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _add_simulate_parser(sub):
    p = sub.add_parser("simulate", help="run the synthetic Monte Carlo study")
    p.add_argument("--delta", type=int, choices=(0, 1), default=1)
    p.add_argument("--scenarios", default="A,B,C,D", help="comma-separated subset of A,B,C,D")
    p.add_argument("--n", default="200", help="comma-separated sample sizes from %s" % (VALID_SAMPLE_SIZES,))
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--estimators", default=",".join(ESTIMATOR_IDS))
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: ESCORE_THREADS or all cores)")
    p.add_argument("--out", default=".", help="output directory")
    return p


def cmd_simulate(args) -> int:
    try:
        config = SimConfig(
            delta=args.delta,
            sample_sizes=tuple(int(v) for v in args.n.split(",") if v),
            replications=args.reps,
            seed=args.seed,
            scenarios=tuple(s.strip().upper() for s in args.scenarios.split(",") if s.strip()),
            estimators=tuple(e.strip() for e in args.estimators.split(",") if e.strip()),
            alpha=args.alpha,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    t0 = time.time()
    table, manifest = run_campaign(config, threads=args.threads)
    wall = time.time() - t0

    metrics_path = os.path.join(args.out, "metrics.csv")
    _write_text(metrics_path, "\n".join(table.to_csv_lines()) + "\n")
    manifest["wall_time_s"] = wall
    manifest["outputs"] = {"metrics": "metrics.csv"}
    _write_manifest(os.path.join(args.out, "manifest.json"), manifest)

    print(table.format_text())
    total = {}
    for key, count in manifest["exclusions"].items():
        total[key] = count
    for key, count in sorted(total.items()):
        frac = count / config.replications
        line = f"excluded replicates in {key}: {count}/{config.replications}"
        if frac > 0.05:
            line = "warning: " + line
        print(line)
    print(f"wrote {metrics_path}")
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _add_analyze_parser(sub):
    p = sub.add_parser("analyze", help="estimate the ATE from a CSV file")
    p.add_argument("--input", required=True)
    p.add_argument("--outcome", required=True, help="outcome column name")
    p.add_argument("--treatment", required=True, help="treatment column name (0/1 values)")
    p.add_argument("--covariates", default="all", help="'all' or comma-separated column names")
    p.add_argument("--estimators", default=",".join(ESTIMATOR_IDS))
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--bandwidth", type=float, default=None, help="fixed kernel bandwidth override")
    p.add_argument("--cv-grid", default=None, help="comma-separated explicit bandwidth grid")
    p.add_argument("--out", default=".", help="output directory")
    return p


def _read_csv(path: str):
    """Strict CSV ingestion: header row, '.' decimals, no missing cells."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("empty CSV file") from None
        rows = list(reader)
    if not rows:
        raise ValueError("CSV has a header but no data rows")
    bad = [str(i + 2) for i, row in enumerate(rows) if len(row) != len(header) or any(c.strip() == "" for c in row)]
    if bad:
        raise ValueError(f"missing cells in rows (1-based, incl. header): {', '.join(bad[:20])}")
    return header, rows


def cmd_analyze(args) -> int:
    try:
        header, rows = _read_csv(args.input)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    for col in (args.outcome, args.treatment):
        if col not in header:
            print(f"error: column {col!r} not in CSV header", file=sys.stderr)
            return 2
    if args.covariates == "all":
        cov_names = [c for c in header if c not in (args.outcome, args.treatment)]
    else:
        cov_names = [c.strip() for c in args.covariates.split(",") if c.strip()]
        missing = [c for c in cov_names if c not in header]
        if missing:
            print(f"error: covariate columns not in CSV header: {missing}", file=sys.stderr)
            return 2
    if not cov_names:
        print("error: no covariate columns selected", file=sys.stderr)
        return 2

    idx = {name: header.index(name) for name in header}
    try:
        y = np.array([float(r[idx[args.outcome]]) for r in rows])
        a_raw = np.array([float(r[idx[args.treatment]]) for r in rows])
        w = np.array([[float(r[idx[c]]) for c in cov_names] for r in rows])
    except ValueError as exc:
        print(f"error: non-numeric cell: {exc}", file=sys.stderr)
        return 2
    if not np.all(np.isin(a_raw, (0.0, 1.0))):
        print("error: treatment column must be 0/1-valued", file=sys.stderr)
        return 2

    estimators = tuple(e.strip() for e in args.estimators.split(",") if e.strip())
    kernel_kwargs = {}
    if args.bandwidth is not None:
        kernel_kwargs["bandwidth"] = args.bandwidth
    if args.cv_grid is not None:
        kernel_kwargs["grid"] = tuple(float(v) for v in args.cv_grid.split(",") if v)
    try:
        kernel = KernelSpec(**kernel_kwargs)
        data = Dataset(w, a_raw.astype(int), y)
        spec = NuisanceSpec(kernel=kernel)
        target = TargetSpec("ate", args.alpha)
        reports, fit1, fit0 = estimate(data, spec, target, estimators, return_fits=True)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    lines = [f"{'Estimator':<10} {'Estimate':>12} {'S.E.':>10} {'P-value':>10}"]
    csv_rows = ["estimator,estimate,se,p_value"]
    for rep in reports:
        if rep.se is None:
            se_s, p_s = "---", "---"
            p_val = None
        elif rep.se == 0.0:
            p_val = 1.0 if rep.theta_hat == 0.0 else 0.0
            se_s, p_s = f"{rep.se:.4g}", f"{p_val:.4g}"
        else:
            p_val = 2.0 * (1.0 - stats.norm.cdf(abs(rep.theta_hat) / rep.se))
            se_s, p_s = f"{rep.se:.4g}", f"{p_val:.4g}"
        label = ESTIMATOR_LABELS[rep.estimator_id]
        lines.append(f"{label:<10} {rep.theta_hat:>12.4f} {se_s:>10} {p_s:>10}")
        csv_rows.append(
            f"{rep.estimator_id},{_fmt(rep.theta_hat)},{_fmt(rep.se)},{_fmt(p_val)}"
        )
    text = "\n".join(lines)
    print(text)

    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "estimates.csv"), "\n".join(csv_rows) + "\n")
    _write_text(os.path.join(args.out, "estimates.txt"), text + "\n")

    # per-observation weight diagnostics for distribution inspection
    diag_header = "row,a,g_hat_arm1,e_hat_arm1,inv_g_arm1,inv_e_arm1,g_hat_arm0,e_hat_arm0,inv_g_arm0,inv_e_arm0"
    diag_lines = [diag_header]
    for i in range(data.n):
        diag_lines.append(
            ",".join(
                [str(i), str(int(data.a[i]))]
                + [_fmt(v) for v in (
                    fit1.g_hat[i], fit1.e_hat[i], 1.0 / fit1.g_hat[i], 1.0 / fit1.e_hat[i],
                    fit0.g_hat[i], fit0.e_hat[i], 1.0 / fit0.g_hat[i], 1.0 / fit0.e_hat[i],
                )]
            )
        )
    _write_text(os.path.join(args.out, "diagnostics.csv"), "\n".join(diag_lines) + "\n")

    weight_summary = {
        "var_inv_g_arm1": float(np.var(1.0 / fit1.g_hat)),
        "var_inv_e_arm1": float(np.var(1.0 / fit1.e_hat)),
        "var_inv_g_arm0": float(np.var(1.0 / fit0.g_hat)),
        "var_inv_e_arm0": float(np.var(1.0 / fit0.e_hat)),
    }
    print(
        "weight variance (treated arm): 1/g {var_inv_g_arm1:.4g} -> 1/e {var_inv_e_arm1:.4g}; "
        "(control arm): 1/g {var_inv_g_arm0:.4g} -> 1/e {var_inv_e_arm0:.4g}".format(**weight_summary)
    )
    _write_manifest(
        os.path.join(args.out, "manifest.json"),
        {
            "command": "analyze",
            "input": os.path.abspath(args.input),
            "outcome": args.outcome,
            "treatment": args.treatment,
            "covariates": cov_names,
            "estimators": list(estimators),
            "alpha": args.alpha,
            "n": data.n,
            "weight_variances": weight_summary,
            "outputs": {
                "estimates": "estimates.csv",
                "estimates_text": "estimates.txt",
                "diagnostics": "diagnostics.csv",
            },
        },
    )
    return 0


# ---------------------------------------------------------------------------
# oracle-check
# ---------------------------------------------------------------------------

def _add_oracle_parser(sub):
    p = sub.add_parser("oracle-check", help="verify the exact finite-law identities")
    p.add_argument("--laws", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--break-theorem2",
        action="store_true",
        help="negative control: perturb the e-score by 0.01 before checking",
    )
    p.add_argument("--out", default=".", help="directory for the failure reproduction file")
    return p


def cmd_oracle_check(args) -> int:
    if args.laws < 1:
        print("error: --laws must be positive", file=sys.stderr)
        return 2
    report = run_identity_suite(
        n_laws=args.laws, seed=args.seed, perturb_e1=0.01 if args.break_theorem2 else 0.0
    )
    width = max(len(k) for k in report["deviations"])
    print(f"identity checks over {args.laws} random laws (seed {args.seed}):")
    for name, dev in report["deviations"].items():
        status = "ok" if dev <= 1e-10 else "FAIL"
        print(f"  {name:<{width}}  max |dev| = {dev:.3e}  [{status}]")
    print(f"overall max deviation: {report['max_deviation']:.3e}")
    if report["passed"]:
        return 0
    os.makedirs(args.out, exist_ok=True)
    repro = os.path.join(args.out, "oracle_failure.json")
    name, dev, law_json = report["offender"]
    _write_text(
        repro,
        json.dumps({"check": name, "deviation": dev, "law": json.loads(law_json), "seed": args.seed}, indent=2, sort_keys=True)
        + "\n",
    )
    print(f"identity violated; offending law written to {repro}", file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="escore",
        description="collaborative doubly robust treatment-effect estimation",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_simulate_parser(sub)
    _add_analyze_parser(sub)
    _add_oracle_parser(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "simulate":
        code = cmd_simulate(args)
    elif args.command == "analyze":
        code = cmd_analyze(args)
    else:
        code = cmd_oracle_check(args)
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()
