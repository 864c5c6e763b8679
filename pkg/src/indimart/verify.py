"""Executable checks for every identity satisfied by a :class:`Decomposition`.

Independence is tested exactly: on a finite space two random vectors are
independent iff their joint law is the product of the marginals, which can
be enumerated cell by cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .decompose import Decomposition, closed_tail, self_consistency_defect
from .errors import MeasurabilityError
from .space import MERGE_TOL, Partition, WeightedSpace, as_vector, cluster, martingale_defect

MAX_CELLS = 10**6
PROBE_TUPLES = 32

TOL_INCREMENT = 1e-12
TOL_MARTINGALE = 1e-9
TOL_INDEP_PAST = 1e-10
TOL_INDEP_MUTUAL = 1e-9
TOL_SELF_CONSISTENCY = 1e-8
TOL_PYTHAGORAS = 1e-8
TOL_L1 = 1e-8
TOL_RECONSTRUCTION = 1e-7
TOL_TAIL = 1e-8
TOL_BOUNDED = 1e-10
TOL_METADATA = 1e-9


@dataclass
class Check:
    """Outcome of one named check; ``quantity``/``bound`` are taken at the worst witness."""

    name: str
    quantity: float
    bound: float
    passed: bool
    witness: dict = field(default_factory=dict)
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "quantity": self.quantity,
            "bound": self.bound,
            "passed": self.passed,
            "witness": self.witness,
            "note": self.note,
        }


@dataclass
class Report:
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failed(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}

    def table(self) -> str:
        width = max(len(c.name) for c in self.checks)
        lines = [f"{'check':<{width}}  {'quantity':>12}  {'bound':>12}  result"]
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            extra = ""
            if c.note:
                extra += f"  [{c.note}]"
            if not c.passed and c.witness:
                extra += "  at " + ", ".join(f"{k}={v}" for k, v in c.witness.items())
            lines.append(f"{c.name:<{width}}  {c.quantity:12.4e}  {c.bound:12.4e}  {status}{extra}")
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'}")
        return "\n".join(lines)


class _Worst:
    """Tracks the candidate with the largest excess of ``quantity`` over ``bound``, relative to the bound."""

    def __init__(self, name: str, note: str = "", enforce: bool = True):
        self.name, self.note, self.enforce = name, note, enforce
        self.best = None

    def add(self, quantity: float, bound: float, **witness):
        quantity, bound = float(quantity), float(bound)
        key = (quantity - bound) / max(abs(bound), 1e-300)
        if self.best is None or key > self.best[3]:
            self.best = (quantity, bound, witness, key)

    def result(self) -> Check:
        if self.best is None:
            return Check(self.name, 0.0, 0.0, True, {}, self.note)
        q, b, w, _ = self.best
        ok = (q <= b) or not self.enforce
        return Check(self.name, q, b, bool(ok), w if q > b else {}, self.note)


def _labels(Y, tol: float = MERGE_TOL) -> tuple[np.ndarray, int]:
    return cluster(as_vector(Y), tol)


def check_independence_of_past(Y, A: Partition, space: WeightedSpace) -> float:
    """``max |P(Y = y, B) - P(Y = y) P(B)|`` over atoms ``y`` of ``Y`` and blocks ``B`` of ``A``."""
    Y = as_vector(Y, space.size)
    yl, ny = _labels(Y)
    joint = np.bincount(yl * A.n_blocks + A.labels, weights=space.weights, minlength=ny * A.n_blocks)
    joint = joint.reshape(ny, A.n_blocks)
    return float(np.abs(joint - np.outer(joint.sum(axis=1), joint.sum(axis=0))).max())


class IndependenceResult(NamedTuple):
    defect: float
    method: str  # "exact", "sequential" or "probe"


def _factorization_defect(labels: list[np.ndarray], sizes: list[int], w: np.ndarray) -> float:
    flat = np.ravel_multi_index(tuple(labels), tuple(sizes))
    joint = np.bincount(flat, weights=w, minlength=int(np.prod(sizes))).reshape(sizes)
    product = np.ones(())
    for axis in range(len(sizes)):
        other = tuple(a for a in range(len(sizes)) if a != axis)
        product = np.multiply.outer(product, joint.sum(axis=other))
    return float(np.abs(joint - product).max())


def check_mutual_independence(Ys: Sequence, space: WeightedSpace, max_cells: int = MAX_CELLS) -> IndependenceResult:
    """Max defect of ``P(Y_1 = y_1, ..., Y_K = y_K) = prod_s P(Y_s = y_s)``.

    Enumerates the full grid of support combinations when it has at most
    ``max_cells`` cells.  Otherwise checks, for every ``s``, that ``Y_s`` is
    independent of the realized values of ``(Y_1, ..., Y_{s-1})`` (equivalent,
    and still exact).  Only if that is too large too does it fall back to a
    characteristic-function probe on random frequencies, which is not a proof.
    """
    if len(Ys) <= 1:
        return IndependenceResult(0.0, "exact")
    w = space.weights
    lab = [_labels(as_vector(Y, space.size)) for Y in Ys]
    labels = [l for l, _ in lab]
    sizes = [n for _, n in lab]
    if np.prod(np.array(sizes, dtype=float)) <= max_cells:
        return IndependenceResult(_factorization_defect(labels, sizes, w), "exact")

    worst = 0.0
    past = labels[0]
    n_past = sizes[0]
    sequential = True
    for s in range(1, len(Ys)):
        if n_past * sizes[s] > max_cells:
            sequential = False
            break
        worst = max(worst, _factorization_defect([past, labels[s]], [n_past, sizes[s]], w))
        _, past = np.unique(np.stack([past, labels[s]]), axis=1, return_inverse=True)
        past = past.ravel()
        n_past = int(past.max()) + 1
    if sequential:
        return IndependenceResult(worst, "sequential")

    rng = np.random.default_rng(0)
    vals = [as_vector(Y, space.size) for Y in Ys]
    scale = [1.0 / max(np.sqrt(space.norm_sq(V)), 1e-300) for V in vals]
    worst = 0.0
    for _ in range(PROBE_TUPLES):
        phases = [V @ (rng.standard_normal(V.shape[1]) * c) for V, c in zip(vals, scale)]
        joint = w @ np.exp(1j * np.sum(phases, axis=0))
        product = np.prod([w @ np.exp(1j * ph) for ph in phases])
        worst = max(worst, abs(joint - product))
    return IndependenceResult(float(worst), "probe")


def _stage_counts(d: Decomposition) -> list[int]:
    return [min(s.n_stages, d.N) for s in d.steps]


def check_stage_identities(d: Decomposition) -> list[Check]:
    """Stage-level identities recomputed from ``X`` and ``Y`` on the final space.

    ``xi_n = dX_k - sum_{j<n} Y^j_k`` is rebuilt for every step ``k``.
    """
    sp = d.space
    m1 = d.m == 1
    dX = d.increments()
    consist = _Worst("self_consistency", "" if m1 else "reported only (m > 1)", enforce=m1)
    pyth = _Worst("pythagoras_partial")
    partial = _Worst("partial_sum_bound")
    tail_id = _Worst("pythagoras_tail")
    l1 = _Worst("l1_lower_bound", "" if m1 else "reported only (m > 1)", enforce=m1)
    decrease = _Worst("strict_decrease", "" if m1 else "reported only (m > 1)", enforce=m1)
    for k, count in enumerate(_stage_counts(d)):
        xi = dX[k].copy()
        xi1_sq = sp.norm_sq(xi)
        xi1 = np.sqrt(xi1_sq)
        xis = [xi.copy()]
        for n in range(count):
            xi = xi - d.Y[n, k]
            xis.append(xi.copy())
        eta_sq = [sp.norm_sq(d.Y[n, k]) for n in range(count)]
        xi_sq = [sp.norm_sq(x) for x in xis]
        running = np.zeros_like(dX[k])
        for n in range(count):
            eta = d.Y[n, k]
            where = dict(n=n + 1, k=k + 1)
            consist.add(self_consistency_defect(xis[n], eta, sp), TOL_SELF_CONSISTENCY, **where)
            pyth.add(abs(xi1_sq - (xi_sq[n + 1] + sum(eta_sq[: n + 1]))), TOL_PYTHAGORAS * xi1_sq, **where)
            running = running + eta
            partial.add(sp.norm(running), 2 * xi1 + 1e-8, **where)
            tail_id.add(abs(xi_sq[n] - (sum(eta_sq[n:]) + xi_sq[count])), TOL_PYTHAGORAS * xi1_sq, **where)
            l1.add(sp.l1_norm(xis[n]) / (2 * d.m) - np.sqrt(eta_sq[n]), TOL_L1, **where)
            if xi_sq[n] > 0:
                # positive quantity = no decrease
                decrease.add(np.sqrt(xi_sq[n + 1]) - np.sqrt(xi_sq[n]), 0.0, **where)
    return [c.result() for c in (consist, pyth, tail_id, partial, l1, decrease)]


def check_norm_identities(d: Decomposition) -> list[Check]:
    """Reconstruction and norm identities, with the reported truncation residual as slack."""
    sp = d.space
    dX = d.increments()
    budget_sq = np.cumsum([s.terminal_residual_norm_sq for s in d.steps])
    budget = np.cumsum([np.sqrt(s.terminal_residual_norm_sq) for s in d.steps])
    recon = _Worst("reconstruction")
    norms = _Worst("norm_identity")
    closed = _Worst("closed_norm_identity")
    meta = _Worst("truncation_metadata")
    Zsum = d.Z.sum(axis=0) if d.N else np.zeros_like(d.X)
    for k in range(d.K):
        X_sq = sp.norm_sq(d.X[k])
        gap = d.X[k] - Zsum[k]
        i = int(np.argmax(np.linalg.norm(gap, axis=1)))
        recon.add(sp.norm(gap), TOL_RECONSTRUCTION + budget[k], k=k + 1, point=sp.ids[i])
        z_sq = sum(sp.norm_sq(d.Z[n, k]) for n in range(d.N))
        defect = abs(X_sq - z_sq)
        bound = TOL_RECONSTRUCTION * max(X_sq, 1e-300) + budget_sq[k] + 1e-14
        norms.add(defect, bound, k=k + 1)
        if k == d.K - 1:
            closed.add(defect, bound, k=k + 1)
        residual = dX[k] - (d.Y[:, k].sum(axis=0) if d.N else 0.0)
        meta.add(
            abs(sp.norm_sq(residual) - d.steps[k].terminal_residual_norm_sq),
            TOL_METADATA * max(1.0, sp.norm_sq(dX[k])),
            k=k + 1,
        )
    return [recon.result(), norms.result(), closed.result(), meta.result()]


def check_tail_inequality(d: Decomposition) -> list[Check]:
    """``|sum_{n<=N}(Z^n_K - Z^n_k)|^2 <= 4 |X_K - X_k|^2`` for all ``k < K`` and ``N``."""
    tail = _Worst("tail_inequality")
    for k in range(d.K):
        for N in range(1, max(d.N, 1) + 1):
            lhs, rhs = closed_tail(d, k, N)
            tail.add(lhs, rhs + TOL_TAIL, k=k, N=N)
    return [tail.result()]


def check_boundedness(d: Decomposition) -> list[Check]:
    bound = _Worst("boundedness")
    for k in range(d.K):
        X_sq = d.space.norm_sq(d.X[k])
        for n in range(d.N):
            bound.add(d.space.norm_sq(d.Z[n, k]), X_sq + TOL_BOUNDED, n=n + 1, k=k + 1)
    return [bound.result()]


def check_martingales(d: Decomposition) -> list[Check]:
    sp, F = d.space, d.filtration
    out = []
    x = _Worst("martingale_X")
    try:
        defect, k, i = martingale_defect(list(d.X), F, sp, TOL_MARTINGALE)
        x.add(defect, TOL_MARTINGALE, k=k, point=sp.ids[i])
    except MeasurabilityError as exc:
        x.add(np.inf, TOL_MARTINGALE, error=str(exc))
    out.append(x.result())
    z = _Worst("martingale_Z")
    for n in range(d.N):
        try:
            defect, k, i = martingale_defect(list(d.Z[n]), F, sp, TOL_MARTINGALE)
            z.add(defect, TOL_MARTINGALE, n=n + 1, k=k, point=sp.ids[i])
        except MeasurabilityError as exc:
            z.add(np.inf, TOL_MARTINGALE, n=n + 1, error=str(exc))
    out.append(z.result())
    inc = _Worst("increments")
    prev = np.zeros_like(d.X[0])
    for n in range(d.N):
        prev = np.zeros_like(d.X[0])
        for k in range(d.K):
            diff = np.linalg.norm(d.Z[n, k] - prev - d.Y[n, k], axis=1)
            i = int(np.argmax(diff))
            inc.add(diff[i], TOL_INCREMENT, n=n + 1, k=k + 1, point=sp.ids[i])
            prev = d.Z[n, k]
    out.append(inc.result())
    return out


def check_independence(d: Decomposition) -> list[Check]:
    sp, F = d.space, d.filtration
    past = _Worst("independence_of_past")
    for n in range(d.N):
        for k in range(d.K):
            past.add(check_independence_of_past(d.Y[n, k], F[k], sp), TOL_INDEP_PAST, n=n + 1, k=k + 1)
    mutual = _Worst("mutual_independence")
    methods = set()
    for n in range(d.N):
        res = check_mutual_independence(list(d.Y[n]), sp)
        methods.add(res.method)
        mutual.add(res.defect, TOL_INDEP_MUTUAL, n=n + 1)
    check = mutual.result()
    if "probe" in methods:
        check.note = "characteristic-function probe used: inconclusive"
    elif "sequential" in methods:
        check.note = "exact, sequential factorization"
    return [past.result(), check]


def check_convergence(d: Decomposition) -> list[Check]:
    """Informational: did every step reach ``tol_rel`` before ``n_max``?"""
    worst = _Worst("convergence", "reported only", enforce=False)
    for s in d.steps:
        if s.xi_norm_sq > 0:
            worst.add(np.sqrt(s.terminal_residual_norm_sq / s.xi_norm_sq), d.tol_rel, k=s.k, stages=s.n_stages)
    return [worst.result()]


def run_full_report(d: Decomposition) -> Report:
    checks: list[Check] = []
    checks += check_martingales(d)
    checks += check_independence(d)
    checks += check_stage_identities(d)
    checks += check_norm_identities(d)
    checks += check_tail_inequality(d)
    checks += check_boundedness(d)
    checks += check_convergence(d)
    return Report(checks)
