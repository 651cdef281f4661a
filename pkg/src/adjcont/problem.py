"""Staged construction of extended continuation problems and their adjoints.

A :class:`ProblemBuilder` collects zero functions, monitor functions and
adjoint contributions one block at a time.  Every block refers to the global
vector of continuation variables ``u`` through an index list, so blocks can
be added in any order and later constructors can reuse variables introduced
earlier by looking up the stored index lists.

Calling :meth:`ProblemBuilder.assemble` freezes the problem into an
:class:`AugmentedSystem` whose residual has the fixed layout::

    [ zero blocks      ]  registration order
    [ monitors - mu    ]  registration order
    [ adjoint rows     ]  one row per variable u_j

where the adjoint rows collect ``J_b(u)^T ell_b`` for every block ``b`` with a
registered adjoint.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sps

from .fd import CBRT_EPS, central_jacobian

log = logging.getLogger(__name__)


class ProblemError(ValueError):
    """Invalid problem construction (duplicate names, bad indices, ...)."""


class EvaluationError(RuntimeError):
    """A block produced a non-finite value."""

    def __init__(self, block, what="residual"):
        super().__init__(f"non-finite {what} in block {block!r}")
        self.block = block


def _as_index(idx) -> np.ndarray:
    return np.atleast_1d(np.asarray(idx, dtype=np.intp)).ravel()


@dataclass(eq=False)
class ZeroBlock:
    """A group of zero functions acting on ``u[uidx]``."""

    name: str
    fn: Callable
    jac: Optional[Callable]
    uidx: np.ndarray
    dim_out: int
    d2: Optional[Callable] = None

    def evaluate(self, u_loc):
        f = np.atleast_1d(np.asarray(self.fn(u_loc), dtype=float)).ravel()
        if f.size != self.dim_out:
            raise ProblemError(
                f"block {self.name!r} returned {f.size} components, expected {self.dim_out}"
            )
        if not np.all(np.isfinite(f)):
            raise EvaluationError(self.name)
        return f

    def jacobian(self, u_loc):
        if self.jac is None:
            J = central_jacobian(self.evaluate, u_loc)
        else:
            J = np.asarray(self.jac(u_loc), dtype=float)
            if J.size != self.dim_out * self.uidx.size:
                raise ProblemError(
                    f"Jacobian of block {self.name!r} has shape {J.shape}, "
                    f"expected ({self.dim_out}, {self.uidx.size})"
                )
            J = J.reshape(self.dim_out, self.uidx.size)
        if not np.all(np.isfinite(J)):
            raise EvaluationError(self.name, "Jacobian")
        return J


@dataclass(eq=False)
class MonitorBlock(ZeroBlock):
    """Monitor functions; each row defines one continuation parameter."""

    labels: tuple = ()
    kind: str = "inactive"
    mu_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, np.intp))


@dataclass(eq=False)
class AdjointBlock:
    """Adjoint contribution ``J_b^T ell_b`` of block ``name``.

    ``aidx`` are the adjoint rows (keyed by u-index) receiving the
    contribution, ``vidx`` the positions of ``ell_b`` in the global vector
    of adjoint variables.
    """

    name: str
    aidx: np.ndarray
    vidx: np.ndarray
    labels: tuple = ()
    l0: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True)
class Event:
    name: str
    label: str
    value: float


class ProblemBuilder:
    """Mutable container for staged problem construction."""

    def __init__(self):
        self.u0 = np.zeros(0)
        self.mu0 = np.zeros(0)
        self.l0 = np.zeros(0)
        self.zero_blocks: list[ZeroBlock] = []
        self.monitor_blocks: list[MonitorBlock] = []
        self.adjoints: dict[str, AdjointBlock] = {}
        self.mu_labels: list[str] = []
        self.adj_labels: dict[str, int] = {}
        self.events: list[Event] = []
        self._blocks: dict[str, ZeroBlock] = {}

    # -- queries -----------------------------------------------------------
    @property
    def n_u(self):
        return self.u0.size

    @property
    def n_mu(self):
        return self.mu0.size

    @property
    def n_adj(self):
        return self.l0.size

    def block(self, name) -> ZeroBlock:
        try:
            return self._blocks[name]
        except KeyError:
            raise ProblemError(f"unknown block {name!r}") from None

    def uidx(self, name):
        return self.block(name).uidx.copy()

    def aidx(self, name):
        self.block(name)
        if name not in self.adjoints:
            raise ProblemError(f"block {name!r} has no adjoint")
        return self.adjoints[name].aidx.copy()

    def labels(self):
        return list(self.mu_labels) + list(self.adj_labels)

    # -- construction --------------------------------------------------------
    def _resolve(self, name, u0, uidx):
        if name in self._blocks:
            raise ProblemError(f"duplicate block name {name!r}")
        if u0 is None and uidx is None:
            raise ProblemError(f"block {name!r}: give u0 and/or uidx")
        reused = _as_index([] if uidx is None else uidx)
        if reused.size and (reused.min() < 0 or reused.max() >= self.n_u):
            raise ProblemError(f"block {name!r}: index out of range (n_u={self.n_u})")
        fresh = np.zeros(0) if u0 is None else np.atleast_1d(np.asarray(u0, float)).ravel()
        new = np.arange(self.n_u, self.n_u + fresh.size, dtype=np.intp)
        return np.concatenate([reused, new]), fresh

    def _make(self, cls, name, fn, jac, u0, uidx, d2=None, **extra):
        idx, fresh = self._resolve(name, u0, uidx)
        u_all = np.concatenate([self.u0, fresh])
        f = np.atleast_1d(np.asarray(fn(u_all[idx]), dtype=float)).ravel()
        if not np.all(np.isfinite(f)):
            raise EvaluationError(name)
        blk = cls(name=name, fn=fn, jac=jac, uidx=idx, dim_out=f.size, d2=d2, **extra)
        if jac is not None:
            blk.jacobian(u_all[idx])  # shape check
        return blk, f, u_all

    def _commit(self, blk, u_all):
        self.u0 = u_all
        self._blocks[blk.name] = blk

    def add_zero_block(self, name, fn, jac=None, *, u0=None, uidx=None, d2=None):
        """Append zero functions ``fn(u[uidx]) = 0``.

        Variables listed in ``uidx`` are reused; values in ``u0`` create fresh
        variables appended after them.  Returns the resolved index list.

        ``d2(u_loc, l)``, if given, returns the derivative of ``jac(u_loc).T @ l``
        with respect to ``u_loc``; otherwise it is approximated by central
        differences when needed.
        """
        blk, _, u_all = self._make(ZeroBlock, name, fn, jac, u0, uidx, d2)
        self._commit(blk, u_all)
        self.zero_blocks.append(blk)
        return blk.uidx.copy()

    def add_monitor_block(self, name, fn, jac=None, *, labels, uidx=None, u0=None,
                          kind="inactive", d2=None):
        """Append monitor functions and one continuation parameter per row.

        The new parameters are initialised to the monitor values so that
        ``Psi(u) - mu = 0`` holds at construction.
        """
        labels = (labels,) if isinstance(labels, str) else tuple(labels)
        if kind not in ("inactive", "active"):
            raise ProblemError(f"unknown monitor kind {kind!r}")
        if len(set(labels)) != len(labels):
            raise ProblemError(f"repeated label in {labels}")
        for lab in labels:
            if lab in self.mu_labels or lab in self.adj_labels:
                raise ProblemError(f"duplicate continuation parameter {lab!r}")
        mu_idx = np.arange(self.n_mu, self.n_mu + len(labels), dtype=np.intp)
        blk, f, u_all = self._make(MonitorBlock, name, fn, jac, u0, uidx, d2,
                                   labels=labels, kind=kind, mu_idx=mu_idx)
        if f.size != len(labels):
            raise ProblemError(f"block {name!r}: {f.size} monitors but {len(labels)} labels")
        self._commit(blk, u_all)
        self.monitor_blocks.append(blk)
        self.mu_labels.extend(labels)
        self.mu0 = np.concatenate([self.mu0, f])
        return blk.uidx.copy()

    def add_parameters(self, name, uidx, labels):
        """Monitor the variables ``u[uidx]`` directly as parameters ``labels``."""
        idx = _as_index(uidx)
        if idx.size == 0:
            raise ProblemError("add_parameters needs at least one index")
        labels = (labels,) if isinstance(labels, str) else tuple(labels)
        eye = np.eye(idx.size)
        return self.add_monitor_block(name, lambda u: np.array(u, float), lambda u: eye,
                                      labels=labels, uidx=idx, d2=linear_d2)

    def add_glue(self, name, uidx1, uidx2):
        """Zero functions ``u[uidx1] - u[uidx2]``."""
        i1, i2 = _as_index(uidx1), _as_index(uidx2)
        if i1.size != i2.size:
            raise ProblemError(f"glue {name!r}: length mismatch {i1.size} vs {i2.size}")
        if np.array_equal(i1, i2):
            log.warning("glue %r is degenerate (identical index lists)", name)
        n = i1.size
        J = np.hstack([np.eye(n), -np.eye(n)])
        return self.add_zero_block(name, lambda u: u[:n] - u[n:], lambda u: J,
                                   uidx=np.concatenate([i1, i2]), d2=linear_d2)

    def add_adjoint(self, name, labels=None, *, aidx=None, l0=None):
        """Register the adjoint contribution of block ``name``.

        One adjoint variable is created per residual row of the block.  For
        monitor blocks these are exposed as complementary continuation
        parameters ``labels`` (default ``'e.' + label``).  Returns the adjoint
        rows receiving the contribution.
        """
        blk = self.block(name)
        if name in self.adjoints:
            raise ProblemError(f"block {name!r} already has an adjoint")
        rows = blk.uidx.copy() if aidx is None else _as_index(aidx)
        if rows.size != blk.uidx.size:
            raise ProblemError(
                f"adjoint {name!r}: aidx has {rows.size} entries, block has {blk.uidx.size} variables"
            )
        if rows.size and (rows.min() < 0 or rows.max() >= self.n_u):
            raise ProblemError(f"adjoint {name!r}: aidx out of range")
        init = np.zeros(blk.dim_out) if l0 is None else np.atleast_1d(np.asarray(l0, float)).ravel()
        if init.size != blk.dim_out:
            raise ProblemError(f"adjoint {name!r}: l0 has {init.size} entries, expected {blk.dim_out}")
        vidx = np.arange(self.n_adj, self.n_adj + blk.dim_out, dtype=np.intp)
        labs = ()
        if isinstance(blk, MonitorBlock):
            labs = tuple("e." + s for s in blk.labels) if labels is None else (
                (labels,) if isinstance(labels, str) else tuple(labels))
            if len(labs) != blk.dim_out:
                raise ProblemError(f"adjoint {name!r}: need {blk.dim_out} complementary labels")
            for lab in labs:
                if lab in self.mu_labels or lab in self.adj_labels:
                    raise ProblemError(f"duplicate continuation parameter {lab!r}")
            for lab, j in zip(labs, vidx):
                self.adj_labels[lab] = int(j)
        elif labels:
            raise ProblemError("complementary labels only apply to monitor blocks")
        self.adjoints[name] = AdjointBlock(name, rows, vidx, labs, init)
        self.l0 = np.concatenate([self.l0, init])
        return rows.copy()

    def add_event(self, name, label, value):
        """Report a special point where parameter ``label`` crosses ``value``."""
        if label not in self.mu_labels and label not in self.adj_labels:
            raise ProblemError(f"unknown continuation parameter {label!r}")
        self.events.append(Event(name, label, float(value)))

    def assemble(self, adjoint=None) -> "AugmentedSystem":
        """Freeze the builder.  ``adjoint=None`` includes adjoints if any exist."""
        if adjoint is None:
            adjoint = bool(self.adjoints)
        return AugmentedSystem(self, adjoint)


def new_problem() -> ProblemBuilder:
    return ProblemBuilder()


class AugmentedSystem:
    """Immutable residual/Jacobian evaluator for an assembled problem.

    State vectors are split as ``(u, mu, ell)`` with ``ell`` holding all
    adjoint variables (``lambda`` for zero blocks, ``eta`` for monitors).
    """

    def __init__(self, builder: ProblemBuilder, adjoint: bool):
        self.zero_blocks = tuple(builder.zero_blocks)
        self.monitor_blocks = tuple(builder.monitor_blocks)
        self.adjoint = adjoint
        self.adjoints = dict(builder.adjoints) if adjoint else {}
        self.n_u, self.n_mu = builder.n_u, builder.n_mu
        self.n_adj = builder.n_adj if adjoint else 0
        self.u0 = builder.u0.copy()
        self.mu0 = builder.mu0.copy()
        self.l0 = builder.l0.copy() if adjoint else np.zeros(0)
        self.mu_labels = tuple(builder.mu_labels)
        self.adj_labels = dict(builder.adj_labels) if adjoint else {}
        self.events = tuple(e for e in builder.events
                            if e.label in self.mu_labels or e.label in self.adj_labels)
        self.blocks = {b.name: b for b in self.zero_blocks + self.monitor_blocks}

        offs, r = {}, 0
        for b in self.zero_blocks:
            offs[b.name] = r
            r += b.dim_out
        self.n_zero = r
        for b in self.monitor_blocks:
            offs[b.name] = r
            r += b.dim_out
        self.row_offset = offs
        self.n_eq = r + (self.n_u if adjoint else 0)
        self._adj_items = [(self.blocks[n], a) for n, a in self.adjoints.items()]
        self._lam_mask = np.ones(self.n_adj, bool)
        for j in self.adj_labels.values():
            self._lam_mask[j] = False

    # -- labels --------------------------------------------------------------
    @property
    def labels(self):
        return self.mu_labels + tuple(self.adj_labels)

    @property
    def n_full(self):
        return self.n_u + self.n_mu + self.n_adj

    def label_column(self, label):
        """Column of ``label`` in the full state ``w = (u, mu, ell)``."""
        if label in self.mu_labels:
            return self.n_u + self.mu_labels.index(label)
        if label in self.adj_labels:
            return self.n_u + self.n_mu + self.adj_labels[label]
        raise ProblemError(f"unknown continuation parameter {label!r}")

    def lambda_columns(self):
        """Full-state columns of the adjoint variables that are not labelled."""
        return self.n_u + self.n_mu + np.flatnonzero(self._lam_mask)

    def split(self, w):
        w = np.asarray(w, float)
        return w[:self.n_u], w[self.n_u:self.n_u + self.n_mu], w[self.n_u + self.n_mu:]

    def join(self, u, mu, ell):
        return np.concatenate([np.asarray(u, float), np.asarray(mu, float),
                               np.asarray(ell, float)])

    def initial_state(self):
        return self.join(self.u0, self.mu0, self.l0)

    # -- evaluation -------------------------------------------------------------
    def _check(self, u, mu, ell):
        u = np.asarray(u, float)
        mu = np.asarray(mu, float)
        ell = np.asarray(ell, float)
        if u.size != self.n_u or mu.size != self.n_mu or ell.size != self.n_adj:
            raise ProblemError(
                f"state sizes ({u.size}, {mu.size}, {ell.size}) do not match "
                f"({self.n_u}, {self.n_mu}, {self.n_adj})"
            )
        return u, mu, ell

    def residual(self, u, mu, ell=()):
        """Residual ``[Phi(u); Psi(u) - mu; adjoint rows]``."""
        u, mu, ell = self._check(u, mu, ell)
        out = np.empty(self.n_eq)
        r = 0
        for b in self.zero_blocks:
            out[r:r + b.dim_out] = b.evaluate(u[b.uidx])
            r += b.dim_out
        for b in self.monitor_blocks:
            out[r:r + b.dim_out] = b.evaluate(u[b.uidx]) - mu[b.mu_idx]
            r += b.dim_out
        if self.adjoint:
            adj = np.zeros(self.n_u)
            for b, a in self._adj_items:
                lb = ell[a.vidx]
                if np.any(lb):
                    np.add.at(adj, a.aidx, b.jacobian(u[b.uidx]).T @ lb)
            out[r:] = adj
        return out

    def _triplets(self, u, mu, ell):
        rows, cols, vals = [], [], []

        def put(r, c, B):
            rows.append(np.repeat(r, c.size))
            cols.append(np.tile(c, r.size))
            vals.append(np.asarray(B, float).ravel())

        r = 0
        jacs = {}
        for b in self.zero_blocks + self.monitor_blocks:
            Jb = b.jacobian(u[b.uidx])
            jacs[b.name] = Jb
            rr = np.arange(r, r + b.dim_out)
            put(rr, b.uidx, Jb)
            if isinstance(b, MonitorBlock):
                put(rr, self.n_u + b.mu_idx, -np.eye(b.dim_out))
            r += b.dim_out
        if self.adjoint:
            base = self.n_u + self.n_mu
            for b, a in self._adj_items:
                put(r + a.aidx, base + a.vidx, jacs[b.name].T)
                lb = ell[a.vidx]
                if np.any(lb):
                    ul = u[b.uidx]
                    G = _second_order_term(b, ul, lb) if b.d2 is None else b.d2(ul, lb)
                    put(r + a.aidx, b.uidx, G)
        if not rows:
            e = np.zeros(0, np.intp)
            return e, e, np.zeros(0)
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)

    def jacobian_full(self, u, mu, ell=(), sparse=False):
        """Jacobian of :meth:`residual` with respect to all of ``(u, mu, ell)``.

        The u-derivative of the adjoint rows (second-derivative terms) is
        approximated by central differences of ``J_b(u)^T ell_b`` over the
        block's own variables.  With ``sparse=True`` a CSC matrix is returned.
        """
        u, mu, ell = self._check(u, mu, ell)
        R, C, V = self._triplets(u, mu, ell)
        shape = (self.n_eq, self.n_full)
        if sparse:
            return sps.csc_matrix((V, (R, C)), shape=shape)
        flat = np.bincount(R * shape[1] + C, weights=V, minlength=shape[0] * shape[1])
        return flat.reshape(shape)

    def adjoint_operator(self, u):
        """Matrix ``A`` with adjoint rows ``A @ ell`` (``n_u x n_adj``)."""
        u = np.asarray(u, float)
        A = np.zeros((self.n_u, self.n_adj))
        for b, a in self._adj_items:
            _add_block(A, a.aidx, a.vidx, b.jacobian(u[b.uidx]).T)
        return A

    def jacobian(self, u, mu, ell=(), released=(), sparse=False):
        """Jacobian restricted to u, the unlabelled adjoint variables and the
        released continuation parameters (in that column order)."""
        cols = self.unknown_columns(released)
        return self.jacobian_full(u, mu, ell, sparse)[:, cols]

    def unknown_columns(self, released=()):
        cols = [np.arange(self.n_u), self.lambda_columns()]
        cols.append(np.array([self.label_column(l) for l in released], dtype=np.intp))
        return np.concatenate(cols).astype(np.intp)


def linear_d2(u_loc, l):
    """Second-derivative term of a block that is affine in ``u``."""
    return np.zeros((u_loc.size, u_loc.size))


def _add_block(J, rows, cols, B):
    if np.unique(rows).size == rows.size and np.unique(cols).size == cols.size:
        J[np.ix_(rows, cols)] += B
    else:
        np.add.at(J, (rows[:, None], cols[None, :]), B)


def _second_order_term(b, u_loc, lb):
    """Central-difference derivative of ``J_b(u)^T lb`` with respect to ``u``."""
    h = CBRT_EPS * max(1.0, float(np.max(np.abs(u_loc))) if u_loc.size else 1.0)
    G = np.empty((u_loc.size, u_loc.size))
    for j in range(u_loc.size):
        up = u_loc.copy()
        um = u_loc.copy()
        up[j] += h
        um[j] -= h
        G[:, j] = (b.jacobian(up).T @ lb - b.jacobian(um).T @ lb) / (2 * h)
    return G


def assemble_residual(system: AugmentedSystem, u, mu, lam_eta=()):
    return system.residual(u, mu, lam_eta)


def assemble_jacobian(system: AugmentedSystem, u, mu, lam_eta=(), released=(), sparse=False):
    return system.jacobian(u, mu, lam_eta, released, sparse)
