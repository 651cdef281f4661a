"""Run directories: ``meta.json``, ``charts.jsonl`` and ``branch.csv``.

Floats are written with ``repr`` so that a save/load round trip reproduces
every stored number bit for bit.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .continuation import ActiveSet, Chart, RunStore, Settings


class StorageError(LookupError):
    pass


def _floats(a):
    return [float(x) for x in np.asarray(a, float).ravel()]


def _fmt(x):
    return repr(float(x))


def _block_registry(system):
    reg = {}
    for name, b in system.blocks.items():
        entry = {"uidx": [int(i) for i in b.uidx]}
        if name in system.adjoints:
            a = system.adjoints[name]
            entry["aidx"] = [int(i) for i in a.aidx]
            entry["vidx"] = [int(i) for i in a.vidx]
        reg[name] = entry
    return reg


def save_run(store: RunStore, root):
    """Write ``store`` to ``root/<run_name>`` and return that directory."""
    d = Path(root) / store.run_name
    d.mkdir(parents=True, exist_ok=True)
    sys_ = store.system
    meta = {
        "run_name": store.run_name,
        "settings": vars(store.settings),
        "released": list(store.active.released),
        "windows": {k: list(map(float, v)) for k, v in store.active.windows.items()},
        "mu_labels": list(sys_.mu_labels),
        "adj_labels": dict(sys_.adj_labels),
        "n_u": sys_.n_u,
        "n_adj": sys_.n_adj,
        "blocks": _block_registry(sys_),
        "labels": [c.label for c in store.charts],
        "sweeps": store.sweeps,
        "failures": store.failures,
    }
    tmp = d / "meta.json.tmp"
    tmp.write_text(json.dumps(meta, indent=1))
    os.replace(tmp, d / "meta.json")
    with open(d / "charts.jsonl", "w") as fh:
        for c in store.charts:
            rec = {
                "label": c.label,
                "type": c.type_tag,
                "u": _floats(c.u),
                "mu": _floats(c.mu),
                "lam_eta": _floats(c.lam_eta),
                "tangent": None if c.tangent is None else _floats(c.tangent),
                "norms": [float(x) for x in c.norms],
            }
            fh.write(json.dumps(rec) + "\n")
    write_branch_csv(store, d / "branch.csv")
    return d


def table_columns(store):
    """Columns of the printed branch table: the released labels."""
    return list(store.active.released)


def write_branch_csv(store, path):
    cols = table_columns(store)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "type"] + cols)
        for c in store.charts:
            w.writerow([c.label, c.type_tag] + [_fmt(c.params[k]) for k in cols])


def _run_dir(root, run_name):
    d = Path(root) / run_name
    if not (d / "meta.json").is_file():
        raise StorageError(f"no run directory {d}")
    return d


def load_meta(root, run_name):
    return json.loads((_run_dir(root, run_name) / "meta.json").read_text())


def _records(root, run_name):
    d = _run_dir(root, run_name)
    with open(d / "charts.jsonl") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def _chart_from(rec, meta):
    c = Chart(
        u=np.array(rec["u"], float),
        mu=np.array(rec["mu"], float),
        lam_eta=np.array(rec["lam_eta"], float),
        tangent=None if rec["tangent"] is None else np.array(rec["tangent"], float),
        label=rec["label"],
        type_tag=rec["type"],
        norms=tuple(rec["norms"]),
    )
    c.params = {lab: float(c.mu[i]) for i, lab in enumerate(meta["mu_labels"])}
    c.params.update({lab: float(c.lam_eta[j]) for lab, j in meta["adj_labels"].items()})
    return c


def read_chart(root, run_name, label):
    meta = load_meta(root, run_name)
    for rec in _records(root, run_name):
        if rec["label"] == label:
            return _chart_from(rec, meta)
    raise StorageError(f"run {run_name!r} has no label {label}")


def load_run(root, run_name, system=None):
    """Reload a stored run.  ``system`` is attached if given."""
    meta = load_meta(root, run_name)
    active = ActiveSet(tuple(meta["released"]),
                       {k: tuple(v) for k, v in meta["windows"].items()})
    store = RunStore(meta["run_name"], Settings(**meta["settings"]), active, system)
    store.charts = [_chart_from(r, meta) for r in _records(root, run_name)]
    store.events = [(c.label, c.type_tag, dict(c.params)) for c in store.charts if c.type_tag]
    store.sweeps = meta["sweeps"]
    store.failures = meta["failures"]
    return store


def _block(meta, name):
    try:
        return meta["blocks"][name]
    except KeyError:
        raise StorageError(f"unknown block {name!r}") from None


def read_solution(root, run_name, block, label):
    """Continuation variables ``u[uidx]`` of ``block`` at chart ``label``."""
    meta = load_meta(root, run_name)
    entry = _block(meta, block)
    c = read_chart(root, run_name, label)
    return c.u[np.array(entry["uidx"], dtype=np.intp)]


def read_adjoint(root, run_name, block, label):
    """Adjoint variables of ``block`` at chart ``label``."""
    meta = load_meta(root, run_name)
    entry = _block(meta, block)
    if "vidx" not in entry:
        raise StorageError(f"block {block!r} has no adjoint")
    c = read_chart(root, run_name, label)
    return c.lam_eta[np.array(entry["vidx"], dtype=np.intp)]
