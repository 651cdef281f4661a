"""Two linear oscillators driven at nearby frequencies.

Continuation variables ``u = (a1, b1, c1, a2, b2, c2, o1, o2, ze, ep)``
describe harmonic responses ``x_i = a_i cos(o_i t) + b_i sin(o_i t)`` of
``x'' + 2 ze x' + x = cos(o_i t)`` with amplitudes ``c_i`` and
``o1 - o2 = ep``.  The monitored quantity is the amplitude difference
``da = c1 - c2`` as a function of the mean frequency ``av``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .continuation import ActiveSet, Chart, Settings, continue_branch
from .problem import ProblemBuilder
from .storage import read_adjoint, read_solution, save_run

U0 = np.array([-0.49, 4.9, 4.9, 0.0, 5.0, 5.0, 1.01, 1.0, 0.1, 0.01])
MU_LABELS = ("da", "av", "ep", "ze")
ETA_LABELS = ("e.da", "e.av", "e.ep", "e.ze")
ZERO_ROWS = ("am1", "am2", "fr", "de1re", "de1im", "de2re", "de2im")


def phi_osc(u):
    a1, b1, c1, a2, b2, c2, o1, o2, ze, ep = u
    return np.array([
        c1**2 - a1**2 - b1**2,
        c2**2 - a2**2 - b2**2,
        o1 - o2 - ep,
        (1 - o1**2) * a1 + 2 * ze * o1 * b1 - 1,
        (1 - o1**2) * b1 - 2 * ze * o1 * a1,
        (1 - o2**2) * a2 + 2 * ze * o2 * b2 - 1,
        (1 - o2**2) * b2 - 2 * ze * o2 * a2,
    ])


def dphi_osc(u):
    a1, b1, c1, a2, b2, c2, o1, o2, ze, ep = u
    return np.array([
        [-2 * a1, -2 * b1, 2 * c1, 0, 0, 0, 0, 0, 0, 0],
        [0, 0, 0, -2 * a2, -2 * b2, 2 * c2, 0, 0, 0, 0],
        [0, 0, 0, 0, 0, 0, 1, -1, 0, -1],
        [1 - o1**2, 2 * ze * o1, 0, 0, 0, 0, -2 * o1 * a1 + 2 * ze * b1, 0, 2 * o1 * b1, 0],
        [-2 * ze * o1, 1 - o1**2, 0, 0, 0, 0, -2 * o1 * b1 - 2 * ze * a1, 0, -2 * o1 * a1, 0],
        [0, 0, 0, 1 - o2**2, 2 * ze * o2, 0, 0, -2 * o2 * a2 + 2 * ze * b2, 2 * o2 * b2, 0],
        [0, 0, 0, -2 * ze * o2, 1 - o2**2, 0, 0, -2 * o2 * b2 - 2 * ze * a2, -2 * o2 * a2, 0],
    ], dtype=float)


def psi_osc(u):
    a1, b1, c1, a2, b2, c2, o1, o2, ze, ep = u
    return np.array([c1 - c2, (o1 + o2) / 2, ep, ze])


_DPSI = np.array([
    [0, 0, 1, 0, 0, -1, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0.5, 0.5, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 1],
    [0, 0, 0, 0, 0, 0, 0, 0, 1, 0],
], dtype=float)


def dpsi_osc(u):
    return _DPSI.copy()


def amplitude(w, ze):
    """Steady-state amplitude of ``x'' + 2 ze x' + x = cos(w t)``."""
    return 1.0 / np.sqrt((1 - w**2) ** 2 + 4 * ze**2 * w**2)


def delta_closed_form(av, ep0, ze0):
    """Amplitude difference ``c1 - c2`` at ``o1,2 = av +- ep0/2``."""
    with np.errstate(divide="raise"):
        return amplitude(av + ep0 / 2, ze0) - amplitude(av - ep0 / 2, ze0)


def amplitude_slope(w, ze):
    """Derivative of :func:`amplitude` with respect to ``w``."""
    return amplitude(w, ze) ** 3 * (2 * w * (1 - w**2) - 4 * ze**2 * w)


def delta_slope(av, ep0, ze0):
    """Exact derivative of :func:`delta_closed_form` with respect to ``av``."""
    return amplitude_slope(av + ep0 / 2, ze0) - amplitude_slope(av - ep0 / 2, ze0)


def _bracketed_roots(fun, lo, hi, n, xtol):
    grid = np.linspace(lo, hi, n)
    vals = fun(grid)
    return [brentq(fun, grid[i], grid[i + 1], xtol=xtol, rtol=4 * np.finfo(float).eps)
            for i in np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)]


def fold_roots(ep0=0.01, ze0=0.1, lo=0.5, hi=1.5, n=2001, xtol=1e-13):
    """Local extrema of the closed-form ``da`` in ``av`` (zeros of its slope)."""
    return _bracketed_roots(lambda a: delta_slope(a, ep0, ze0), lo, hi, n, xtol)


def inflection_residual(av, ze0):
    """Sextic whose roots are inflection points of the amplitude curve."""
    w2 = av * av
    z2 = ze0 * ze0
    return (3 * w2**3 + 5 * (2 * z2 - 1) * w2**2
            + (16 * z2**2 - 16 * z2 + 1) * w2 + 1 - 2 * z2)


def inflection_roots(ze0=0.1, lo=0.5, hi=1.5, n=2001, xtol=1e-12):
    """Positive roots of :func:`inflection_residual` in ``[lo, hi]``.

    These are the small-``ep0`` limits of :func:`fold_roots`.
    """
    return _bracketed_roots(lambda a: inflection_residual(a, ze0), lo, hi, n, xtol)


def build_osc_problem(u0=None, l0_phi=None, l0_psi=None):
    """Builder with blocks ``phi`` (zero) and ``psi`` (monitors) and adjoints.

    Returns the builder and a dict with the index maps of both blocks.
    """
    prob = ProblemBuilder()
    prob.add_zero_block("phi", phi_osc, dphi_osc, u0=U0 if u0 is None else u0)
    prob.add_monitor_block("psi", psi_osc, dpsi_osc, labels=MU_LABELS, uidx=np.arange(10))
    prob.add_adjoint("phi", l0=l0_phi)
    prob.add_adjoint("psi", ETA_LABELS, aidx=np.arange(10), l0=l0_psi)
    maps = {"uidx": {"phi": prob.uidx("phi"), "psi": prob.uidx("psi")},
            "aidx": {"phi": prob.aidx("phi"), "psi": prob.aidx("psi")}}
    return prob, maps


RUN1_ACTIVE = ActiveSet(("da", "e.da", "e.av", "e.ep", "e.ze"), {"e.da": (0.0, 1.0)})
RUN2_ACTIVE = ActiveSet(("da", "av", "e.av", "e.ep", "e.ze"), {"av": (0.5, 2.5)})


def run_adjoint_homotopy(settings=None, run_name="run1"):
    """Continuation in ``e.da`` from 0 to 1 at fixed ``av``, ``ep``, ``ze``."""
    prob, _ = build_osc_problem()
    sys_ = prob.assemble()
    return continue_branch(sys_, Chart.initial(sys_), RUN1_ACTIVE, settings or Settings(),
                           run_name)


def endpoint_label(store1):
    """Label of the run-1 chart with ``e.da = 1``."""
    ends = [c for c in store1.by_type("EP") if abs(c.params["e.da"] - 1.0) < 1e-12]
    if not ends:
        raise RuntimeError("adjoint homotopy did not reach e.da = 1")
    return ends[-1].label


def restart_problem(root, run_name, label):
    """Rebuild the problem from a stored chart, reusing its adjoint."""
    u0 = read_solution(root, run_name, "phi", label)
    l_phi = read_adjoint(root, run_name, "phi", label)
    l_psi = read_adjoint(root, run_name, "psi", label)
    return build_osc_problem(u0, l_phi, l_psi)


def run_frequency_sweep(root, run1_name, label, settings=None, run_name="run2"):
    prob, _ = restart_problem(root, run1_name, label)
    sys_ = prob.assemble()
    st = settings or Settings(ItMX=500, NPR=100)
    return continue_branch(sys_, Chart.initial(sys_), RUN2_ACTIVE, st, run_name)


def run_osc_demo(root, settings1=None, settings2=None):
    """Both runs, persisted under ``root``, plus ``osc_summary.json``."""
    root = Path(root)
    s1 = run_adjoint_homotopy(settings1)
    save_run(s1, root)
    lab = endpoint_label(s1)
    s2 = run_frequency_sweep(root, s1.run_name, lab, settings2)
    save_run(s2, root)
    end = s1.chart(lab)
    summary = {
        "fold_locations": [c.params["av"] for c in s2.by_type("FP")],
        "closed_form_folds": fold_roots(),
        "inflection_roots": inflection_roots(),
        "endpoint_sensitivities": {k: end.params[k] for k in ETA_LABELS},
        "da": end.params["da"],
    }
    (root / "osc_summary.json").write_text(json.dumps(summary, indent=1))
    return s1, s2
