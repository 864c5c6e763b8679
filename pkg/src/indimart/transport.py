"""Discrete optimal transport with squared Euclidean cost.

One-dimensional problems go through quantile functions: the comonotone
coupling is optimal and the W2 barycenter averages quantile functions.  For
m > 1 an exact transportation simplex (:func:`solve_transport`) supplies
couplings and dual potentials, and the barycenter is a fixed-support
approximation.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError
from .space import MERGE_TOL, DiscreteLaw, as_vector, merge_atoms

# breakpoints of cumulative mass closer than this are identified
GRID_TOL = 1e-12
BARY_MAX_ITER = 50
BARY_MIN_DECREASE = 1e-9
BARY_PRUNE = 1e-10


@dataclass(frozen=True, eq=False)
class Coupling:
    """Sparse joint law of two discrete laws, stored as ``(rows, cols, mass)`` triples."""

    source: DiscreteLaw
    target: DiscreteLaw
    rows: np.ndarray
    cols: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        if not np.all(self.mass > 0):
            raise DomainError("coupling masses must be strictly positive")

    def cost(self) -> float:
        d = self.source.locations[self.rows] - self.target.locations[self.cols]
        return float(self.mass @ np.einsum("ij,ij->i", d, d))

    def dense(self) -> np.ndarray:
        out = np.zeros((self.source.size, self.target.size))
        np.add.at(out, (self.rows, self.cols), self.mass)
        return out

    def marginal_defect(self) -> float:
        row = np.bincount(self.rows, weights=self.mass, minlength=self.source.size)
        col = np.bincount(self.cols, weights=self.mass, minlength=self.target.size)
        return float(max(np.abs(row - self.source.masses).max(), np.abs(col - self.target.masses).max()))


def _check_dims(laws: Sequence[DiscreteLaw]) -> int:
    dims = {law.dim for law in laws}
    if len(dims) != 1:
        raise DomainError(f"laws have different dimensions {sorted(dims)}")
    return dims.pop()


def sq_dist_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x, y = as_vector(x), as_vector(y)
    return ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)


def quantile_grid(laws: Sequence[DiscreteLaw], tol: float = GRID_TOL):
    """Common refinement of the cumulative-mass breakpoints of 1-D laws.

    Returns ``(lengths, index)`` where ``lengths[j]`` is the length of the
    j-th interval of [0, 1] and ``index[i, j]`` is the atom of ``laws[i]``
    whose quantile function covers that interval.
    """
    breaks = np.unique(np.concatenate([law.cdf_breaks() for law in laws]))
    kept = []
    last = 0.0
    for b in breaks:
        if b - last > tol:
            kept.append(b)
            last = b
    if not kept:
        kept = [1.0]
    kept[-1] = 1.0
    edges = np.concatenate([[0.0], kept])
    mids = 0.5 * (edges[1:] + edges[:-1])
    index = np.array([np.minimum(np.searchsorted(law.cdf_breaks(), mids), law.size - 1) for law in laws])
    return np.diff(edges), index


def _comonotone(nu: DiscreteLaw, mu: DiscreteLaw) -> Coupling:
    lengths, index = quantile_grid([nu, mu])
    pairs, inverse = np.unique(index.T, axis=0, return_inverse=True)
    mass = np.bincount(inverse.ravel(), weights=lengths, minlength=len(pairs))
    return Coupling(nu, mu, pairs[:, 0], pairs[:, 1], mass)


def solve_transport(a, b, C, max_iter: int | None = None):
    """Exact transportation simplex for ``min <C, P>`` with marginals ``a``, ``b``.

    Starts from the northwest-corner basis and pivots on the most negative
    reduced cost, switching to Bland's rule after a run of degenerate pivots.
    ``b`` is rescaled to the total of ``a``.  Returns ``(rows, cols, mass,
    cost, u, v)`` with ``mass > 0`` and dual potentials ``u + v <= C``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    C = np.asarray(C, dtype=float)
    n, m = C.shape
    if len(a) != n or len(b) != m:
        raise DomainError("cost matrix does not match the marginals")
    b = b * (a.sum() / b.sum())

    flow: dict[tuple[int, int], float] = {}
    adj: list[set] = [set() for _ in range(n + m)]

    def add(i, j, x):
        flow[i, j] = x
        adj[i].add(n + j)
        adj[n + j].add(i)

    i = j = 0
    ra, rb = a[0], b[0]
    while True:
        x = min(ra, rb)
        add(i, j, max(x, 0.0))
        ra -= x
        rb -= x
        if i == n - 1 and j == m - 1:
            break
        if j == m - 1 or (ra <= rb and i < n - 1):
            i += 1
            ra = a[i]
        else:
            j += 1
            rb = b[j]

    scale = max(1.0, float(np.abs(C).max())) if C.size else 1.0
    tol = 1e-12 * scale
    if max_iter is None:
        max_iter = 50 * (n + m) ** 2 + 1000
    degenerate_run = 0
    u = np.zeros(n)
    v = np.zeros(m)
    for _ in range(max_iter):
        # potentials from the basis tree, rooted at row 0
        seen = np.zeros(n + m, dtype=bool)
        seen[0] = True
        queue = deque([0])
        while queue:
            node = queue.popleft()
            for nb in adj[node]:
                if not seen[nb]:
                    seen[nb] = True
                    if node < n:
                        v[nb - n] = C[node, nb - n] - u[node]
                    else:
                        u[nb] = C[nb, node - n] - v[node - n]
                    queue.append(nb)
        R = C - u[:, None] - v[None, :]
        if degenerate_run > n + m:
            neg = np.flatnonzero(R.ravel() < -tol)
            if len(neg) == 0:
                break
            ei, ej = divmod(int(neg[0]), m)
        else:
            flat = int(np.argmin(R))
            ei, ej = divmod(flat, m)
            if R[ei, ej] >= -tol:
                break
        # path in the tree from row ei to column ej
        parent = {ei: -1}
        queue = deque([ei])
        target = n + ej
        while queue:
            node = queue.popleft()
            if node == target:
                break
            for nb in adj[node]:
                if nb not in parent:
                    parent[nb] = node
                    queue.append(nb)
        path = [target]
        while parent[path[-1]] != -1:
            path.append(parent[path[-1]])
        # path runs from column ej back to row ei; cells alternate -, +, -, ...
        cells = []
        for p, q in zip(path[:-1], path[1:]):
            cells.append((q, p - n) if q < n else (p, q - n))
        minus = cells[0::2]
        plus = cells[1::2]
        theta = min(flow[c] for c in minus)
        leave = next(c for c in minus if flow[c] == theta)
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        li, lj = leave
        del flow[leave]
        adj[li].discard(n + lj)
        adj[n + lj].discard(li)
        add(ei, ej, theta)
        degenerate_run = degenerate_run + 1 if theta <= 0 else 0
    else:
        raise RuntimeError("transportation simplex did not terminate")

    cells = sorted(c for c, x in flow.items() if x > 0)
    rows = np.array([c[0] for c in cells], dtype=np.int64)
    cols = np.array([c[1] for c in cells], dtype=np.int64)
    mass = np.array([flow[c] for c in cells])
    cost = float(mass @ C[rows, cols]) if len(cells) else 0.0
    return rows, cols, mass, cost, u.copy(), v.copy()


def _lp_coupling(nu: DiscreteLaw, mu: DiscreteLaw) -> Coupling:
    rows, cols, mass, _, _, _ = solve_transport(nu.masses, mu.masses, sq_dist_matrix(nu.locations, mu.locations))
    return Coupling(nu, mu, rows, cols, mass)


def optimal_coupling(nu: DiscreteLaw, mu: DiscreteLaw, method: str = "auto") -> Coupling:
    """Optimal coupling for squared Euclidean cost.

    ``method="auto"`` uses the comonotone coupling for m = 1 and the
    transportation simplex otherwise; ``"quantile"`` and ``"lp"`` force a path.
    """
    m = _check_dims([nu, mu])
    if method == "auto":
        method = "quantile" if m == 1 else "lp"
    if method == "quantile":
        if m != 1:
            raise DomainError("quantile coupling needs one-dimensional laws")
        return _comonotone(nu, mu)
    if method == "lp":
        return _lp_coupling(nu, mu)
    raise ValueError(f"unknown method {method!r}")


def w2_sq(nu: DiscreteLaw, mu: DiscreteLaw, method: str = "auto") -> float:
    """Squared Wasserstein-2 distance."""
    m = _check_dims([nu, mu])
    if method == "auto":
        method = "quantile" if m == 1 else "lp"
    if method == "quantile":
        if m != 1:
            raise DomainError("quantile formula needs one-dimensional laws")
        lengths, index = quantile_grid([nu, mu])
        d = nu.locations[index[0], 0] - mu.locations[index[1], 0]
        return float(lengths @ (d * d))
    return optimal_coupling(nu, mu, method).cost()


def barycenter_objective(candidate: DiscreteLaw, laws: Sequence[DiscreteLaw], weights) -> float:
    return float(sum(w * w2_sq(candidate, law) for law, w in zip(laws, weights)))


def barycenter(laws: Sequence[DiscreteLaw], weights) -> DiscreteLaw:
    """Weighted W2 barycenter.

    Exact for m = 1 (the quantile function is the weighted mean of the input
    quantile functions).  For m > 1 the result is supported on the union of
    the input supports and carries ``approximate=True``.
    """
    laws = list(laws)
    weights = np.asarray(weights, dtype=float)
    if len(laws) == 0 or len(laws) != len(weights):
        raise DomainError("need one weight per law")
    if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise DomainError("barycenter weights must be positive and sum to 1")
    m = _check_dims(laws)
    if len(laws) == 1:
        return laws[0]
    if m == 1:
        lengths, index = quantile_grid(laws)
        locs = sum(w * law.locations[idx, 0] for w, law, idx in zip(weights, laws, index))
        return DiscreteLaw.from_atoms(locs, lengths)
    return _fixed_support_barycenter(laws, weights)


def _fixed_support_barycenter(laws: list[DiscreteLaw], weights: np.ndarray) -> DiscreteLaw:
    # mirror descent on the simplex over the union support, using LP duals as gradients
    all_loc = np.concatenate([law.locations for law in laws])
    all_mass = np.concatenate([w * law.masses for w, law in zip(weights, laws)])
    support, a, _ = merge_atoms(all_loc, all_mass, MERGE_TOL)
    costs = [sq_dist_matrix(support, law.locations) for law in laws]

    def evaluate(a):
        active = np.flatnonzero(a > 0)
        total = 0.0
        grad = np.zeros(len(a))
        for w, law, C in zip(weights, laws, costs):
            _, _, _, cost, u, _ = solve_transport(a[active], law.masses, C[active])
            total += w * cost
            grad[active] += w * u
        grad[active] -= a[active] @ grad[active]
        return total, grad

    obj, grad = evaluate(a)
    step = 1.0 / max(np.abs(grad).max(), 1e-300)
    for _ in range(BARY_MAX_ITER):
        trial = a * np.exp(-step * np.clip(grad, -50 / step, 50 / step))
        trial /= trial.sum()
        trial[trial < BARY_PRUNE] = 0.0
        trial /= trial.sum()
        new_obj, new_grad = evaluate(trial)
        if new_obj < obj:
            decrease = obj - new_obj
            a, obj, grad = trial, new_obj, new_grad
            step *= 1.5
            if decrease < BARY_MIN_DECREASE:
                break
        else:
            step *= 0.25
    keep = a > 0
    return DiscreteLaw(support[keep], a[keep] / a[keep].sum(), approximate=True)
