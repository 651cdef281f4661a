"""Command-line front end: ``adjcont <subcommand> [options]``.

Printed branch tables are formatted from the stored ``branch.csv`` so that
the screen and the files never disagree.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import flow as fl
from . import invariant_curve as ic
from . import osc
from .continuation import ContinuationError, Settings
from .problem import ProblemError
from .storage import StorageError, load_meta, load_run, save_run
from .suites import SUITES

ENV_ROOT = "ADJCONT_RUN_ROOT"
log = logging.getLogger(__name__)


class UsageError(Exception):
    pass


# -- configuration --------------------------------------------------------------

def _positive(name, v):
    if v is not None and not (math.isfinite(v) and v > 0):
        raise UsageError(f"{name} must be positive, got {v}")


def validate(args):
    """Range checks on every override before any run starts."""
    for name in ("tol", "h0", "hmax", "delta0"):
        _positive(name, getattr(args, name, None))
    for name in ("itmx", "npr", "k_max"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            raise UsageError(f"{name} must be >= 1, got {v}")
    if getattr(args, "delta0", None) is not None and args.delta0 >= 1:
        raise UsageError("delta0 must be < 1")
    q, p = getattr(args, "q", None), getattr(args, "p_rot", None)
    if q is not None or p is not None:
        q, p = q or 377, p or 233
        if q < 2:
            raise UsageError("q must be >= 2")
        if not 0 < p < q or math.gcd(p, q) != 1:
            raise UsageError(f"p_rot must be coprime with q and in (0, q), got {p}")
    if args.h0 is not None and args.hmax is not None and args.h0 > args.hmax:
        raise UsageError("h0 must not exceed hmax")


def settings_from(args, **defaults):
    kw = dict(defaults)
    for flag, key in (("tol", "TOL"), ("h0", "h0"), ("hmax", "hmax"),
                      ("itmx", "ItMX"), ("npr", "NPR")):
        v = getattr(args, flag, None)
        if v is not None:
            kw[key] = v
    try:
        return Settings(**kw).validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- output -----------------------------------------------------------------------

def print_step_table(chart, out):
    """Newton log of the first correction."""
    out.write("    STEP   DAMPING               NORMS\n")
    out.write("  IT     GAMMA     ||d||     ||f||     ||U||\n")
    for it, gamma, dn, fn, un in chart.history:
        if gamma is None:
            out.write(f"{it:4d}                    {fn:.2e}  {un:.2e}\n")
        else:
            out.write(f"{it:4d}  {gamma:.2e}  {dn:.2e}  {fn:.2e}  {un:.2e}\n")
    out.write("\n")


def _read_branch(run_dir):
    with open(Path(run_dir) / "branch.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], {int(r[0]): r for r in rows[1:]}


def print_label_table(run_dir, out, npr, fmt="csv"):
    """Rows at events and every ``npr`` steps, one block per direction."""
    header, rows = _read_branch(run_dir)
    meta = load_meta(Path(run_dir).parent, Path(run_dir).name)
    cols = header[2:]
    for sweep in meta["sweeps"]:
        if fmt == "csv":
            out.write("  LABEL  TYPE " + "".join(f"{c:>13s}" for c in cols) + "\n")
        for k, lab in enumerate(sweep):
            r = rows[lab]
            if not (r[1] or k % npr == 0):
                continue
            vals = [float(x) for x in r[2:]]
            if fmt == "jsonl":
                out.write(json.dumps({"label": lab, "type": r[1], **dict(zip(cols, vals))}) + "\n")
            else:
                out.write(f"{lab:7d}  {r[1]:4s}" + "".join(f"  {v: .4e}" for v in vals) + "\n")
        if fmt == "csv":
            out.write("\n")


def write_branch_jsonl(run_dir):
    header, rows = _read_branch(run_dir)
    with open(Path(run_dir) / "branch.jsonl", "w") as fh:
        for lab in sorted(rows):
            r = rows[lab]
            rec = {"label": lab, "type": r[1], **{c: float(v) for c, v in zip(header[2:], r[2:])}}
            fh.write(json.dumps(rec) + "\n")


def _report_run(store, root, args, out):
    d = save_run(store, root)
    if args.format == "jsonl":
        write_branch_jsonl(d)
    print_step_table(store.charts[0], out)
    print_label_table(d, out, store.settings.NPR, args.format)
    for msg in store.failures:
        out.write(f"warning: {msg}\n")
    return d


def _write_table(path_stem, header, rows, fmt):
    path = Path(f"{path_stem}.{fmt}")
    if fmt == "jsonl":
        with open(path, "w") as fh:
            for r in rows:
                fh.write(json.dumps(dict(zip(header, r))) + "\n")
    else:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return path


# -- oscillator -------------------------------------------------------------------

def cmd_osc_adjoint(args, out):
    store = osc.run_adjoint_homotopy(settings_from(args))
    _report_run(store, args.dir, args, out)
    end = store.chart(osc.endpoint_label(store))
    out.write("endpoint " + " ".join(f"{k}={end.params[k]:.4e}" for k in osc.ETA_LABELS) + "\n")
    return 0


def cmd_osc_sweep(args, out):
    root = Path(args.dir)
    try:
        lab = osc.endpoint_label(load_run(root, "run1"))
    except (StorageError, RuntimeError):
        s1 = osc.run_adjoint_homotopy(settings_from(args))
        save_run(s1, root)
        lab = osc.endpoint_label(s1)
    store = osc.run_frequency_sweep(root, "run1", lab, settings_from(args, ItMX=500, NPR=100))
    _report_run(store, root, args, out)
    for c in store.by_type("FP"):
        out.write(f"fold at av={c.params['av']:.8f} (e.av={c.params['e.av']:.2e})\n")
    return 0


# -- invariant curve -----------------------------------------------------------------

def _curve_problem(args):
    return ic.build_curve_problem(args.q or 377, args.p_rot or 233)


def _curve_run(args, out, report=True):
    """Load ``<dir>/curve`` if it matches the mesh, else compute and store it."""
    cp = _curve_problem(args)
    sys_ = cp.assemble()
    root = Path(args.dir)
    try:
        meta = load_meta(root, "curve")
        if meta["n_u"] == sys_.n_u and not report:
            return cp, load_run(root, "curve", sys_)
    except StorageError:
        pass
    store = ic.run_curve_continuation(cp, settings_from(args), "curve")
    if report:
        _report_run(store, root, args, out)
    else:
        save_run(store, root)
    return cp, store


def _pick(store, label):
    if str(label).isdigit():
        return store.chart(int(label))
    tagged = store.by_type(label)
    if not tagged:
        raise UsageError(f"no chart with label or type {label!r}")
    return tagged[-1] if label == "EP" else tagged[0]


def cmd_invc_continue(args, out):
    _curve_run(args, out, report=True)
    return 0


def cmd_invc_spectrum(args, out):
    cp, store = _curve_run(args, out, report=False)
    c = _pick(store, args.label)
    cs = ic.CurveState.from_chart(cp, c)
    data = ic.gamma_hat_spectrum(cs, args.mode)
    root = Path(args.dir)
    if args.mode == "radius":
        _write_table(root / "spectrum", ["quantity", "value"], [["max_abs_1_plus_z", float(data)]],
                     args.format)
        out.write(f"label {c.label} ({c.type_tag or '-'}): max|1+z| = {data:.4e}"
                  f" ({'stable' if data < 1 else 'not stable'})\n")
    else:
        rows = [[name, float(z.real), float(z.imag)] for name, ev in data.items() for z in ev]
        _write_table(root / "spectrum", ["operator", "re", "im"], rows, args.format)
        for name, ev in data.items():
            out.write(f"{name}: {len(ev)} eigenvalues, max|z| = {np.max(np.abs(ev)):.4e},"
                      f" min|z| = {np.min(np.abs(ev)):.4e}\n")
    return 0


def cmd_invc_phase(args, out):
    cp, store = _curve_run(args, out, report=False)
    c = _pick(store, args.label)
    cs = ic.CurveState.from_chart(cp, c)
    k_max = args.k_max or 200
    gaps = ic.phase_decay_sweep(cs, n=20, radius=args.delta0 or 1e-4, k_max=k_max)
    header = ["k"] + [f"gap{j + 1}" for j in range(gaps.shape[1])]
    rows = [[k] + [float(x) for x in row] for k, row in enumerate(gaps)]
    path = _write_table(Path(args.dir) / "decay", header, rows, args.format)
    qphi = ic.q_phi_limit(cs)
    ic.write_curve_csv(Path(args.dir) / "curve.csv", cs, qphi)
    out.write(f"label {c.label}: initial gap max {gaps[0].max():.4e},"
              f" final gap max {gaps[-1].max():.4e} after {k_max} iterates\n")
    out.write(f"wrote {path}\n")
    return 0


# -- flows ----------------------------------------------------------------------------

def cmd_flow_demo(args, out):
    fld = fl.hopf_field()
    om = 2.0
    p = np.array([1.0, om, 0.0])
    x0, T = fl.periodic_orbit(fld, p, [1.0, 0.0], math.pi,
                              fl.Section(lambda x, p: x[1], lambda x, p: np.array([0.0, 1.0]),
                                         lambda x, p: np.zeros(3)))
    s = fl.segment_sensitivities(fl.Segment(fld, x0, T, p, 1000))
    transport = float(np.max(np.abs(s.X1 @ fld.f(x0, p) - s.fx1)))
    dT = fl.period_sensitivity(fl.periodic_left_eigenvector(s), s.P1)
    lam = fl.asymptotic_phase_gradient(s, x0, p, fld)
    rows = [["transport_residual", transport],
            ["dT_domega", float(dT[1])],
            ["dT_domega_exact", -2 * math.pi / om**2],
            ["lam_x", float(lam[0])], ["lam_y", float(lam[1])]]
    for name, v in rows:
        out.write(f"{name:20s} {v: .6e}\n")
    _write_table(Path(args.dir) / "flow_demo", ["quantity", "value"], rows, args.format)
    return 0


def cmd_hybrid_demo(args, out):
    j = fl.bouncing_ball_junction()
    D = fl.saltation(j)["dxD"]
    out.write("bouncing ball saltation matrix:\n")
    for row in D:
        out.write("  " + "  ".join(f"{v: .6e}" for v in row) + "\n")
    orb = fl.impact_hopf_orbit()
    dT, lam, _ = fl.hybrid_period_sensitivity(orb)
    out.write(f"impacting orbit: T = {orb.T:.6e}, sigma = {orb.sigma:.6e}\n")
    names = ("beta", "omega", "kappa", "r")
    rows = [[f"dT_d{n}", float(v)] for n, v in zip(names, dT)]
    for name, v in rows:
        out.write(f"  {name:10s} {v: .6e}\n")
    rows += [[f"D{i}{k}", float(D[i, k])] for i in range(2) for k in range(2)]
    _write_table(Path(args.dir) / "hybrid_demo", ["quantity", "value"], rows, args.format)
    return 0


def cmd_verify(args, out):
    if args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
    checks = SUITES[args.suite]()
    for c in checks:
        out.write(f"{'PASS' if c.ok else 'FAIL'}  {c.name}  [{c.detail}]\n")
    failed = sum(not c.ok for c in checks)
    out.write(f"{len(checks) - failed}/{len(checks)} passed\n")
    return 1 if failed else 0


# -- parser -----------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dir", default=os.environ.get(ENV_ROOT, "runs"),
                        help=f"run root directory (default: ${ENV_ROOT} or ./runs)")
    common.add_argument("--tol", type=float, help="corrector tolerance")
    common.add_argument("--itmx", type=int, help="max continuation steps per direction")
    common.add_argument("--npr", type=int, help="print every NPR steps")
    common.add_argument("--h0", type=float, help="initial step size")
    common.add_argument("--hmax", type=float, help="maximal step size")
    common.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    common.add_argument("-v", "--verbose", action="store_true")

    curve = argparse.ArgumentParser(add_help=False)
    curve.add_argument("--q", type=int, help="mesh size (default 377)")
    curve.add_argument("--p-rot", dest="p_rot", type=int, help="rotation numerator (default 233)")
    curve.add_argument("--label", default="A", help="chart label or event type (default A)")

    ap = argparse.ArgumentParser(prog="adjcont", description="Adjoint-based continuation demos.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    sub.add_parser("osc-adjoint", parents=[common], help="oscillator adjoint homotopy")
    sub.add_parser("osc-sweep", parents=[common], help="oscillator frequency sweep")
    sub.add_parser("invc-continue", parents=[common, curve], help="invariant-curve branch")
    sp = sub.add_parser("invc-spectrum", parents=[common, curve], help="Gamma operator spectra")
    sp.add_argument("--mode", choices=("radius", "full"), default="radius")
    pp = sub.add_parser("invc-phase", parents=[common, curve], help="asymptotic phase decay")
    pp.add_argument("--k-max", dest="k_max", type=int, help="iterates (default 200)")
    pp.add_argument("--delta0", type=float, help="perturbation size (default 1e-4)")
    sub.add_parser("flow-demo", parents=[common], help="periodic-orbit sensitivities")
    sub.add_parser("hybrid-demo", parents=[common], help="saltation and hybrid period")
    vp = sub.add_parser("verify", parents=[common], help="run an invariant suite")
    vp.add_argument("suite", help=f"one of: {', '.join(SUITES)}")
    return ap


COMMANDS = {
    "osc-adjoint": cmd_osc_adjoint,
    "osc-sweep": cmd_osc_sweep,
    "invc-continue": cmd_invc_continue,
    "invc-spectrum": cmd_invc_spectrum,
    "invc-phase": cmd_invc_phase,
    "flow-demo": cmd_flow_demo,
    "hybrid-demo": cmd_hybrid_demo,
    "verify": cmd_verify,
}


def main(argv=None, out=None):
    out = out or sys.stdout
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        validate(args)
        Path(args.dir).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.cmd](args, out)
    except UsageError as exc:
        ap.error(str(exc))
    except (ContinuationError, ProblemError, RuntimeError, StorageError) as exc:
        sys.stderr.write(f"adjcont {args.cmd}: error: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
