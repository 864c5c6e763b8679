"""Decomposition of a martingale into martingales with independent increments.

A mean-zero increment ``xi`` (``E[xi | A] = 0``) is approximated by the
closest random vector ``eta`` that is independent of ``A``; the residual
``xi - eta`` is treated the same way, and so on.  A vector independent of
``A`` has the same law ``mu`` on every block of ``A``, and for a fixed ``mu``
the best achievable squared error on block ``B`` is ``W2^2(nu_B, mu)``.  The
optimal common law is therefore the W2 barycenter of the block laws
``nu_B`` weighted by ``P(B)``, and ``eta`` is realized by splitting sample
points along the optimal couplings ``nu_B -> mu``.

Running this for every time step ``k`` (with ``A = P_{k-1}``) and summing the
``n``-th pieces over time gives the martingales ``Z^n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateStageError, DomainError, PreconditionError
from .space import (
    DiscreteLaw,
    Filtration,
    Partition,
    Refinement,
    WeightedSpace,
    as_vector,
    cluster,
    cond_exp,
    lift,
    martingale_defect,
    merge_atoms,
    refine,
    split,
)
from .transport import barycenter, optimal_coupling

CENTER_TOL = 1e-9
RECENTER_TOL = 1e-12
MEASURABLE_TOL = 1e-9
# coupling cut points closer than this (relative to the block weight) coincide
SNAP_TOL = 1e-13
DEFAULT_TOL_REL = 1e-6
DEFAULT_N_MAX = 64
# a step stops (unconverged) once the refined space exceeds this many points;
# the m > 1 barycenter solves one LP per block on the union support, so it gets a smaller budget
MAX_POINTS_SCALAR = 20_000
MAX_POINTS_VECTOR = 500


def default_max_points(m: int) -> int:
    return MAX_POINTS_SCALAR if m == 1 else MAX_POINTS_VECTOR


def conditional_mean_defect(xi, A: Partition, space: WeightedSpace) -> float:
    return float(np.linalg.norm(cond_exp(xi, A, space), axis=1).max())


def level_set_partition(eta, tol: float = 1e-9) -> Partition:
    """Partition into the level sets of ``eta`` (values within ``tol`` coincide)."""
    labels, _ = cluster(as_vector(eta), tol)
    return Partition(labels)


def self_consistency_defect(xi, eta, space: WeightedSpace) -> float:
    """``max |eta - E[xi | eta]|`` over the points."""
    eta = as_vector(eta, space.size)
    proj = cond_exp(xi, level_set_partition(eta), space)
    return float(np.linalg.norm(eta - proj, axis=1).max())


def _atoms(xi: np.ndarray, info: Partition, space: WeightedSpace):
    """Weights and values of ``xi`` on the blocks of ``info``."""
    w = space.weights
    atom_w = np.bincount(info.labels, weights=w, minlength=info.n_blocks)
    atom_val = np.empty((info.n_blocks, xi.shape[1]))
    for c in range(xi.shape[1]):
        atom_val[:, c] = np.bincount(info.labels, weights=w * xi[:, c], minlength=info.n_blocks) / atom_w
    off = np.linalg.norm(xi - atom_val[info.labels], axis=1)
    if off.max() > MEASURABLE_TOL:
        i = int(np.argmax(off))
        raise DomainError(f"xi is not measurable w.r.t. the information partition at point {space.ids[i]!r}")
    return atom_w, atom_val


def _cut(S: np.ndarray, T: np.ndarray, eps: float):
    """Intersect two partitions of ``[0, S[-1]]`` given by their cumulative ends.

    ``T[-1]`` must equal ``S[-1]``.  Cut points of ``T`` within ``eps`` of a
    cut of ``S`` are moved onto it, so no sliver pieces appear.  Returns
    ``(s_index, t_index, length)`` per piece, in order.
    """
    pos = np.searchsorted(S, T)
    lo = np.clip(pos - 1, 0, len(S) - 1)
    hi = np.clip(pos, 0, len(S) - 1)
    T = T.copy()
    for near in (S[lo], S[hi]):
        close = np.abs(T - near) <= eps
        T[close] = near[close]
    edges = np.unique(np.concatenate([[0.0], S, T]))
    length = np.diff(edges)
    mids = edges[:-1] + 0.5 * length
    return np.searchsorted(S, mids), np.searchsorted(T, mids), length


def best_independent_approx(xi, A: Partition, space: WeightedSpace, info: Partition | None = None):
    """Best L2 approximation of ``xi`` among random vectors independent of ``A``.

    ``info`` is the partition ``xi`` is measurable with respect to (default:
    the finest one).  Every block of ``info`` is split by the same
    proportions, so the new randomness stays independent of anything finer
    than ``info``.

    Returns ``(eta, refinement, barycenter)``; ``eta`` lives on
    ``refine(space, refinement)``.
    """
    xi = as_vector(xi, space.size)
    if A.size != space.size:
        raise DomainError("partition and space differ in size")
    defect = conditional_mean_defect(xi, A, space)
    if defect > CENTER_TOL:
        raise PreconditionError(f"E[xi | A] is not zero (max {defect:.3g})")
    if info is None:
        info = Partition.finest(space.size)
    if info.size != space.size or not info.refines(A):
        raise DomainError("information partition must refine A")

    m = xi.shape[1]
    atom_w, atom_val = _atoms(xi, info, space)
    first_point = np.full(info.n_blocks, -1)
    first_point[info.labels[::-1]] = np.arange(space.size)[::-1]
    atom_block = A.labels[first_point]

    block_atoms = [np.flatnonzero(atom_block == b) for b in range(A.n_blocks)]
    block_w = np.array([atom_w[a].sum() for a in block_atoms])
    laws, merged = [], []
    for atoms in block_atoms:
        loc, mass, lab = merge_atoms(atom_val[atoms], atom_w[atoms] / atom_w[atoms].sum())
        laws.append(DiscreteLaw(loc, mass / mass.sum()))
        merged.append(lab)
    bary = barycenter(laws, block_w / block_w.sum())

    # pieces of every information atom: (atom, target atom of bary, length)
    piece_atom, piece_target, piece_len = [], [], []
    for atoms, nu, lab, W in zip(block_atoms, laws, merged, block_w):
        plan = optimal_coupling(nu, bary)
        # members grouped by law atom; coupling rows rescaled to the members' total
        members = atoms[np.argsort(lab, kind="stable")]
        S = np.cumsum(atom_w[members])
        row_total = np.bincount(lab, weights=atom_w[atoms], minlength=nu.size)
        row_end = np.cumsum(row_total)
        row_end[-1] = S[-1]
        row_start = row_end - row_total
        order = np.lexsort((plan.cols, plan.rows))
        rows, cols, mass = plan.rows[order], plan.cols[order], plan.mass[order]
        row_mass = np.bincount(rows, weights=mass, minlength=nu.size)
        within = np.cumsum(mass) - (np.cumsum(row_mass) - row_mass)[rows]
        # a law atom lighter than the grid tolerance may receive no coupling mass;
        # its members then fall to the neighbouring target
        scale = np.divide(row_total, row_mass, out=np.zeros_like(row_total), where=row_mass > 0)
        T = row_start[rows] + within * scale[rows]
        last = np.r_[rows[1:] != rows[:-1], True]
        T[last] = row_end[rows[last]]
        T[-1] = S[-1]
        si, ti, length = _cut(S, T, SNAP_TOL * W)
        piece_atom.append(members[si])
        piece_target.append(cols[ti])
        piece_len.append(length)
    piece_atom = np.concatenate(piece_atom)
    piece_target = np.concatenate(piece_target)
    piece_frac = np.concatenate(piece_len) / atom_w[piece_atom]
    order = np.argsort(piece_atom, kind="stable")
    piece_atom, piece_target, piece_frac = piece_atom[order], piece_target[order], piece_frac[order]
    count = np.bincount(piece_atom, minlength=info.n_blocks)
    offset = np.cumsum(count) - count

    per_point = count[info.labels]
    parent = np.repeat(np.arange(space.size), per_point)
    rank = np.arange(len(parent)) - np.repeat(np.cumsum(per_point) - per_point, per_point)
    piece = offset[info.labels[parent]] + rank
    r = Refinement(parent, space.weights[parent] * piece_frac[piece], piece_target[piece])
    branch = r.branch
    eta = bary.locations[branch].copy()

    if m > 1:
        # move every target atom to the conditional mean of what is shipped to it,
        # which makes eta = E[xi | eta] without touching the block laws
        xi_up = xi[r.parent]
        k = bary.size
        mass = np.bincount(branch, weights=r.child_weight, minlength=k)
        loc = np.empty((k, m))
        for c in range(m):
            loc[:, c] = np.bincount(branch, weights=r.child_weight * xi_up[:, c], minlength=k) / mass
        eta = loc[branch]
        bary = DiscreteLaw.from_atoms(loc, bary.masses, approximate=True)
    return eta, r, bary


@dataclass(frozen=True, eq=False)
class Stage:
    """One pass of the approximation: ``xi_n -> (eta_n, xi_{n+1})``."""

    index: int
    eta: np.ndarray
    residual: np.ndarray
    refinement: Refinement
    barycenter: DiscreteLaw
    space: WeightedSpace
    xi_norm_sq: float
    xi_l1: float
    eta_norm_sq: float
    residual_norm_sq: float
    residual_l1: float
    self_consistency: float


@dataclass(frozen=True, eq=False)
class StepDecomposition:
    """Result of iterating :func:`best_independent_approx` on one increment.

    ``etas`` and ``residual`` are lifted to the final ``space``;
    ``refinement`` maps the input space onto it.
    """

    stages: tuple[Stage, ...]
    space: WeightedSpace
    partition: Partition
    info: Partition
    refinement: Refinement
    etas: tuple[np.ndarray, ...]
    residual: np.ndarray
    xi_norm_sq: float
    terminal_residual_norm_sq: float
    converged: bool
    k: int | None = None


def _centered(xi: np.ndarray, A: Partition, space: WeightedSpace) -> np.ndarray:
    defect = conditional_mean_defect(xi, A, space)
    if defect > CENTER_TOL:
        raise PreconditionError(f"E[xi | A] is not zero (max {defect:.3g})")
    if defect > RECENTER_TOL:
        xi = xi - cond_exp(xi, A, space)
    return xi


def stage_decompose(
    xi,
    A: Partition,
    space: WeightedSpace,
    tol_rel: float = DEFAULT_TOL_REL,
    n_max: int = DEFAULT_N_MAX,
    info: Partition | None = None,
    k: int | None = None,
    max_points: int | None = None,
) -> StepDecomposition:
    """Iterate ``xi_{n+1} = xi_n - eta_n`` until ``|xi_{n+1}| <= tol_rel |xi_1|``.

    Also stops after ``n_max`` stages, or once the refined space has more than
    ``max_points`` points; the step is then flagged as not converged.
    """
    if not 0 < tol_rel < 1:
        raise ValueError("tol_rel must lie in (0, 1)")
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    xi = _centered(as_vector(xi, space.size), A, space)
    if max_points is None:
        max_points = default_max_points(xi.shape[1])
    if info is None:
        info = Partition.finest(space.size)
    start = space
    total = Refinement.identity(space)
    xi1_sq = space.norm_sq(xi)
    stages: list[Stage] = []
    etas: list[np.ndarray] = []
    residual_sq = xi1_sq
    converged = xi1_sq == 0.0

    while not converged and len(stages) < n_max and space.size <= max_points:
        n = len(stages) + 1
        xi_sq, xi_l1 = space.norm_sq(xi), space.l1_norm(xi)
        eta, r, bary = best_independent_approx(xi, A, space, info)
        new_space = refine(space, r)
        eta_sq = new_space.norm_sq(eta)
        if eta_sq <= 1e-30 * xi_sq:
            raise DegenerateStageError(f"stage {n}: eta vanishes while |xi_n|^2 = {xi_sq:.3g}")
        xi_up = lift(xi, r)
        residual = xi_up - eta
        residual_sq = new_space.norm_sq(residual)
        stages.append(
            Stage(
                index=n,
                eta=eta,
                residual=residual,
                refinement=r,
                barycenter=bary,
                space=new_space,
                xi_norm_sq=xi_sq,
                xi_l1=xi_l1,
                eta_norm_sq=eta_sq,
                residual_norm_sq=residual_sq,
                residual_l1=new_space.l1_norm(residual),
                self_consistency=self_consistency_defect(xi_up, eta, new_space),
            )
        )
        etas = [lift(e, r) for e in etas] + [eta]
        total = total.then(r)
        space, xi = new_space, residual
        A, info = lift(A, r), split(info, r)
        converged = residual_sq <= tol_rel**2 * xi1_sq

    return StepDecomposition(
        stages=tuple(stages),
        space=space,
        partition=A,
        info=info,
        refinement=total if stages else Refinement.identity(start),
        etas=tuple(etas),
        residual=xi,
        xi_norm_sq=xi1_sq,
        terminal_residual_norm_sq=residual_sq if stages else xi1_sq,
        converged=bool(converged),
        k=k,
    )


@dataclass(frozen=True)
class StepSummary:
    """Per-time-step record kept in a :class:`Decomposition`."""

    k: int
    converged: bool
    xi_norm_sq: float
    eta_norm_sq: tuple[float, ...]
    residual_norm_sq: tuple[float, ...]
    self_consistency: tuple[float, ...]
    barycenters: tuple[DiscreteLaw, ...] = field(default=(), compare=False)

    @property
    def n_stages(self) -> int:
        return len(self.eta_norm_sq)

    @property
    def terminal_residual_norm_sq(self) -> float:
        return self.residual_norm_sq[-1] if self.residual_norm_sq else self.xi_norm_sq


@dataclass(frozen=True, eq=False)
class Decomposition:
    """All pieces ``Y[n-1, k-1]`` and martingales ``Z[n-1, k-1]`` on one final space.

    ``X`` has shape ``(K, P, m)``; ``Y`` and ``Z`` have shape ``(N, K, P, m)``
    where ``N`` is the largest stage count over the time steps.
    """

    space: WeightedSpace
    filtration: Filtration
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    steps: tuple[StepSummary, ...]
    tol_rel: float = DEFAULT_TOL_REL
    n_max: int = DEFAULT_N_MAX
    max_points: int | None = None

    @property
    def K(self) -> int:
        return self.X.shape[0]

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[2]

    def increments(self) -> np.ndarray:
        """``dX[k-1] = X_k - X_{k-1}``."""
        return np.diff(self.X, axis=0, prepend=np.zeros_like(self.X[:1]))

    def norm_sq(self, V) -> float:
        return self.space.norm_sq(V)

    def norm_table(self) -> list[dict]:
        dX = self.increments()
        rows = []
        for n in range(self.N):
            for k in range(self.K):
                step = self.steps[k]
                res = step.residual_norm_sq
                rows.append(
                    {
                        "n": n + 1,
                        "k": k + 1,
                        "norm_sq_Y": self.norm_sq(self.Y[n, k]),
                        "norm_sq_Z": self.norm_sq(self.Z[n, k]),
                        "norm_sq_dX": self.norm_sq(dX[k]),
                        "norm_sq_X": self.norm_sq(self.X[k]),
                        "residual": res[n] if n < len(res) else step.terminal_residual_norm_sq,
                    }
                )
        return rows


def decompose_martingale(
    Xs: Sequence,
    F: Filtration,
    space: WeightedSpace,
    tol_rel: float = DEFAULT_TOL_REL,
    n_max: int = DEFAULT_N_MAX,
    max_points: int | None = None,
) -> Decomposition:
    """Split ``X_1..X_K`` (with ``X_0 = 0``) into martingales with independent increments."""
    Xs = [as_vector(X, space.size) for X in Xs]
    if len(Xs) != F.K:
        raise DomainError(f"filtration has horizon {F.K} but {len(Xs)} process values were given")
    if len({X.shape[1] for X in Xs}) != 1:
        raise DomainError("process values differ in dimension")
    defect, k_bad, i_bad = martingale_defect(Xs, F, space)
    if defect > CENTER_TOL:
        raise PreconditionError(
            f"not a martingale: |E[X_{k_bad} | P_{k_bad - 1}] - X_{k_bad - 1}| = {defect:.3g} at point {space.ids[i_bad]!r}"
        )
    K = F.K
    parts = list(F.partitions)
    pieces: list[list[np.ndarray]] = []
    summaries = []
    for k in range(1, K + 1):
        dX = Xs[k - 1] - (Xs[k - 2] if k > 1 else 0.0)
        step = stage_decompose(dX, parts[k - 1], space, tol_rel, n_max, info=parts[k], k=k, max_points=max_points)
        for stage in step.stages:
            r = stage.refinement
            parts = [lift(P, r) if j < k else split(P, r) for j, P in enumerate(parts)]
        r = step.refinement
        Xs = [lift(X, r) for X in Xs]
        pieces = [[lift(e, r) for e in etas] for etas in pieces] + [list(step.etas)]
        space = step.space
        summaries.append(
            StepSummary(
                k=k,
                converged=step.converged,
                xi_norm_sq=step.xi_norm_sq,
                eta_norm_sq=tuple(s.eta_norm_sq for s in step.stages),
                residual_norm_sq=tuple(s.residual_norm_sq for s in step.stages),
                self_consistency=tuple(s.self_consistency for s in step.stages),
                barycenters=tuple(s.barycenter for s in step.stages),
            )
        )

    m = Xs[0].shape[1]
    N = max((len(p) for p in pieces), default=0)
    Y = np.zeros((N, K, space.size, m))
    for k, etas in enumerate(pieces):
        for n, eta in enumerate(etas):
            Y[n, k] = eta
    return Decomposition(
        space=space,
        filtration=Filtration(tuple(parts)),
        X=np.stack(Xs),
        Y=Y,
        Z=np.cumsum(Y, axis=1),
        steps=tuple(summaries),
        tol_rel=tol_rel,
        n_max=n_max,
        max_points=max_points if max_points is not None else default_max_points(m),
    )


def closed_tail(d: Decomposition, k: int, N: int) -> tuple[float, float]:
    """Both sides of ``|sum_{n<=N} (Z^n_K - Z^n_k)|^2 <= 4 sum_{s>k} |X_s - X_{s-1}|^2``."""
    if not 0 <= k <= d.K:
        raise IndexError(f"k={k} outside 0..{d.K}")
    if N < 1:
        raise IndexError("N must be at least 1")
    n = min(N, d.N)
    at_k = d.Z[:n, k - 1].sum(axis=0) if k > 0 else 0.0
    tail = d.Z[:n, d.K - 1].sum(axis=0) - at_k if n else np.zeros_like(d.X[0])
    lhs = d.norm_sq(tail) if n else 0.0
    dX = d.increments()
    rhs = 4.0 * sum(d.norm_sq(dX[s]) for s in range(k, d.K))
    return lhs, rhs


def _prefix_labels(paths, k):
    seen: dict[tuple, int] = {}
    return [seen.setdefault(p[:k], len(seen)) for p in paths]


def _composition(rng, total: int, parts: int) -> np.ndarray:
    """Uniform random composition of ``total`` into ``parts`` positive integers."""
    cuts = np.sort(rng.choice(np.arange(1, total), size=parts - 1, replace=False))
    return np.diff(np.concatenate([[0], cuts, [total]])).astype(float)


def generate_random_martingale(
    seed: int,
    K: int,
    m: int = 1,
    branching: int | Sequence[int] = 2,
    distribution: str = "normal",
    weights: str = "lattice",
    resolution: int = 6,
):
    """Random martingale on a tree filtration: ``X_k = E[X_K | P_k]``, ``X_0 = 0``.

    ``branching`` is a single fan-out or one per time step.  Conditional
    probabilities of siblings are either random multiples of
    ``1 / resolution`` (``weights="lattice"``) or uniform draws from [0.5, 1.5]
    renormalized (``"continuous"``).  Lattice weights keep the refined space
    bounded: every cut made by the decomposition stays on the lattice.
    Terminal values come from ``distribution`` ("normal", "uniform" or
    "integer") and are centered.  Returns ``(space, filtration, [X_1, ..., X_K])``.
    """
    if K < 1 or m < 1:
        raise ValueError("K and m must be at least 1")
    fan = [int(branching)] * K if np.isscalar(branching) else [int(b) for b in branching]
    if len(fan) != K or min(fan) < 2:
        raise ValueError("need a branching of at least 2 for each of the K steps")
    rng = np.random.default_rng(seed)

    paths: list[tuple[int, ...]] = [()]
    leaf_w = np.ones(1)
    if weights == "lattice" and resolution < max(fan):
        raise ValueError("lattice resolution must be at least the branching")
    for b in fan:
        if weights == "lattice":
            cond = np.array([_composition(rng, resolution, b) for _ in paths]) / resolution
        elif weights == "continuous":
            cond = rng.uniform(0.5, 1.5, size=(len(paths), b))
            cond /= cond.sum(axis=1, keepdims=True)
        else:
            raise ValueError(f"unknown weights {weights!r}")
        leaf_w = (leaf_w[:, None] * cond).ravel()
        paths = [p + (c,) for p in paths for c in range(b)]
    leaf_w /= leaf_w.sum()
    space = WeightedSpace(tuple("p" + ".".join(map(str, p)) for p in paths), leaf_w)
    F = Filtration(tuple(Partition(_prefix_labels(paths, k)) for k in range(K + 1)))

    P = len(paths)
    if distribution == "normal":
        terminal = rng.standard_normal((P, m))
    elif distribution == "uniform":
        terminal = rng.uniform(-1.0, 1.0, (P, m))
    elif distribution == "integer":
        terminal = rng.integers(-3, 4, (P, m)).astype(float)
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    terminal = terminal - space.mean(terminal)
    Xs = [cond_exp(terminal, F[k], space) for k in range(1, K)] + [terminal]
    return space, F, Xs


CORPUS_SEEDS = tuple(range(1, 51))


def corpus_params(seed: int) -> tuple[int, tuple[int, ...]]:
    """Horizon and branching profile of corpus instance ``seed``.

    ``K`` is drawn from 1..4 and each step fans out by 2 or 3, redrawn until
    the tree has at most 64 leaves.  Feed the result, with the same seed, to
    :func:`generate_random_martingale`.
    """
    rng = np.random.default_rng(1000 + seed)
    K = int(rng.integers(1, 5))
    while True:
        fan = tuple(int(rng.integers(2, 4)) for _ in range(K))
        if np.prod(fan) <= 64:
            return K, fan


def corpus_instance(seed: int, m: int = 1):
    """``generate_random_martingale`` at the corpus parameters of ``seed``."""
    K, fan = corpus_params(seed)
    return generate_random_martingale(seed, K, m, fan)
