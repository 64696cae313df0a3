"""Command-line entry point: ``consensus-forge {synth,simulate,verify,demo,sweep}``.

Exit codes: 0 success, 1 usage/config error, 2 infeasible or verification
failure, 3 completed but the simulated horizon was too short (HorizonWarning).
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgio
from .coupling import admissibility
from .errors import (
    CertificateRejected,
    ConfigError,
    ConsensusForgeError,
    HorizonWarning,
    Infeasible,
)
from .simulator import check_bound, evaluate_cost, simulate
from .synthesis import synthesize, verify_certificate

EXIT_OK, EXIT_ERROR, EXIT_FAIL, EXIT_HORIZON = 0, 1, 2, 3
SYNC_RATIO = 1e-3


def _fmt(a):
    return np.array2string(np.asarray(a), precision=6, separator=", ")


def _parse_gain(text, m_in, n):
    text = text.strip()
    values = json.loads(text) if text.startswith("[") else [float(v) for v in text.split(",")]
    K = np.asarray(values, dtype=float)
    if K.size != m_in * n:
        raise ConfigError("--gain", f"expected {m_in * n} entries, got {K.size}")
    return K.reshape(m_in, n)


def _synth(problem, method, out=None):
    cert = synthesize(problem.spec, method, problem.margin_tol)
    hash_ = cfgio.spec_hash(problem.doc)
    if out:
        cfgio.write_certificate(out, cert, hash_)
    return cert


def cmd_synth(args):
    problem = cfgio.load_config(args.config)
    method = args.method or problem.method
    cert = _synth(problem, method, args.out)
    print(f"method: {method}")
    print(f"K = {_fmt(cert.K)}")
    print(f"LMI margins: {_fmt(cert.lmi_margins)}")
    print(f"Riccati margins: {_fmt(cert.riccati_margins)}")
    print(f"pi = {_fmt(cert.pis)}  theta = {_fmt(cert.thetas)}")
    print(f"bound_constant = {cert.bound_constant:.10g}")
    if cert.bound_total is not None:
        print(f"bound_total = {cert.bound_total:.10g}")
    if args.out:
        print(f"certificate written to {args.out}")
    return EXIT_OK


def _run(problem, K, cert=None):
    """Simulate and summarise; returns (result, summary dict, horizon_warned)."""
    if problem.sim is None:
        raise ConfigError("simulation", "x0_init and agent_init are required to simulate")
    result = simulate(problem.spec, K, problem.sim)
    cost = evaluate_cost(result, problem.spec)
    norms = result.error_norm
    ratio = float(norms[-1] / norms[0]) if norms[0] > 0 else 0.0
    tail = float(ratio**2)
    summary = {
        "J_direct": cost.J_direct,
        "tail_indicator": tail,
        "sync_ratio": ratio,
        "synchronization": "pass" if ratio <= SYNC_RATIO else "fail",
        "iqc": "pass" if result.iqc_passed else "fail",
    }
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", HorizonWarning)
        if cert is not None:
            check = check_bound(result, cert, problem.spec)
            summary["bound_total"] = check.bound_total
            summary["bound"] = ("satisfied" if check.satisfied else "violated") \
                if check.satisfied is not None else check.notice
        else:
            if not admissibility(result.coupling).admissible:
                summary["bound"] = "coupling outside Xi_0; no bound claimed"
    warned = any(issubclass(w.category, HorizonWarning) for w in caught)
    if tail > 1e-4:
        warned = True
    return result, summary, warned


def _print_summary(summary):
    print(f"J_direct = {summary['J_direct']:.10g}")
    if summary.get("bound_total") is not None:
        print(f"bound_total = {summary['bound_total']:.10g}")
    if "bound" in summary:
        print(f"bound check: {summary['bound']}")
    print(f"tail indicator |e(T)|^2/|e(0)|^2 = {summary['tail_indicator']:.3e}")
    print(f"synchronization: {summary['synchronization']} (|e(T)|/|e(0)| = {summary['sync_ratio']:.3e})")
    print(f"IQC: {summary['iqc']}")


def _load_gain(args, problem):
    hash_ = cfgio.spec_hash(problem.doc)
    if args.cert:
        cert = cfgio.read_certificate(args.cert, hash_)
        return cert.K, cert
    return _parse_gain(args.gain, problem.spec.m_in, problem.spec.n), None


def cmd_simulate(args):
    problem = cfgio.load_config(args.config, k_override=args.k)
    K, cert = _load_gain(args, problem)
    result, summary, warned = _run(problem, K, cert)
    if args.out:
        cfgio.write_trajectory_csv(args.out, result)
        print(f"trajectory written to {args.out} ({len(result.t)} rows)")
    _print_summary(summary)
    if summary.get("bound") == "violated":
        return EXIT_FAIL
    if warned:
        print("warning: HorizonWarning - horizon may understate the infinite-horizon cost",
              file=sys.stderr)
        return EXIT_HORIZON
    return EXIT_OK


def _report(report):
    for c in report.checks:
        print(f"  [{'ok' if c.passed else 'FAIL'}] {c.name}: {c.value:.6g}")
    if report.lifted_margins is not None:
        print(f"  lifted Riccati margins: {_fmt(report.lifted_margins)}")


def cmd_verify(args):
    problem = cfgio.load_config(args.config)
    cert = cfgio.read_certificate(args.cert, cfgio.spec_hash(problem.doc))
    report = verify_certificate(cert, problem.spec, problem.margin_tol)
    print(f"verifying {cert.method} certificate")
    _report(report)
    if report.passed:
        print("all checks passed")
        return EXIT_OK
    print("failing: " + ", ".join(c.name for c in report.failures))
    return EXIT_FAIL


def _sweep_one(job):
    config_path, cert_path, k = job
    problem = cfgio.load_config(config_path, k_override=k)
    cert = cfgio.read_certificate(cert_path, cfgio.spec_hash(problem.doc))
    _, summary, warned = _run(problem, cert.K, cert)
    return k, summary, warned


def cmd_sweep(args):
    grid = [float(v) for v in args.k_grid.split(",") if v.strip()]
    jobs = [(args.config, args.cert, k) for k in grid]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    print(f"{'k':>8} {'J_direct':>14} {'bound_total':>14}  bound       sync  iqc")
    status = EXIT_OK
    for k, s, warned in rows:
        bound = s.get("bound_total")
        print(f"{k:8.4g} {s['J_direct']:14.8g} {bound if bound is not None else float('nan'):14.8g}  "
              f"{s['bound'][:10]:<10}  {s['synchronization']:<4}  {s['iqc']}")
        if s["bound"] == "violated":
            status = EXIT_FAIL
        elif warned and status == EXIT_OK:
            status = EXIT_HORIZON
    return status


def cmd_demo(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = cfgio.DEMOS[args.name](k=args.k)
    config_path = out / f"{args.name}.json"
    config_path.write_text(json.dumps(doc, indent=2) + "\n")
    problem = cfgio.parse_config(doc)
    summary = {}
    status = EXIT_OK
    for method in ("th1", "th2"):
        cert_path = out / f"cert_{method}.json"
        cert = _synth(problem, method, cert_path)
        report = verify_certificate(cert, problem.spec, problem.margin_tol)
        result, sim_summary, warned = _run(problem, cert.K, cert)
        cfgio.write_trajectory_csv(out / f"trajectory_{method}.csv", result)
        cfgio.write_relative_csv(out / f"relative_angles_{method}.csv", result, 0, "angle")
        cfgio.write_relative_csv(out / f"relative_velocities_{method}.csv", result, 1, "velocity")
        summary[method] = {"K": cert.K.tolist(), "verified": report.passed,
                           "riccati_margins": cert.riccati_margins.tolist(), **sim_summary}
        print(f"[{method}] K = {_fmt(cert.K)}  verified: {report.passed}")
        _print_summary(sim_summary)
        if not report.passed or sim_summary.get("bound") == "violated":
            status = EXIT_FAIL
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"artifacts written to {out}")
    return status


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; 2 is reserved for failed checks here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="consensus-forge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="solve the LMI and write a certificate")
    p.add_argument("config")
    p.add_argument("--method", choices=["th1", "th2"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("simulate", help="closed-loop simulation and bound check")
    p.add_argument("config")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--cert")
    g.add_argument("--gain", help='inline gain, e.g. "3.987,4.5178" or "[[3.987, 4.5178]]"')
    p.add_argument("--k", type=float, help="override coupling with the memoryless gain k*I")
    p.add_argument("--out", help="trajectory CSV path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="recompute all certificate margins")
    p.add_argument("config")
    p.add_argument("--cert", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("demo", help="run the full pipeline on a built-in instance")
    p.add_argument("--name", default="pendulum", choices=sorted(cfgio.DEMOS))
    p.add_argument("--out", default="demo_out")
    p.add_argument("--k", type=float, default=0.5)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("sweep", help="simulate a certificate over a grid of coupling gains")
    p.add_argument("config")
    p.add_argument("--cert", required=True)
    p.add_argument("--k-grid", required=True, help="comma-separated gains, e.g. 0,0.5,1")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except CertificateRejected as exc:
        print(f"certificate rejected: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ConsensusForgeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
