"""Finite filtered probability spaces.

A sample space is a finite list of named points with strictly positive
weights.  Sigma-algebras are partitions of the point set, random vectors are
``(n_points, m)`` float arrays whose row order follows the space, and a
:class:`Refinement` splits points into weighted children to supply the extra
randomness that couplings need.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import DomainError, InvariantError, MeasurabilityError

WEIGHT_TOL = 1e-12
MERGE_TOL = 1e-9
CHILD_SEP = "/"


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


def as_vector(values, n_points: int | None = None) -> np.ndarray:
    """Return ``values`` as a 2-D float array of shape ``(n_points, m)``.

    1-D input is read as a scalar-valued (m = 1) random variable.
    """
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise DomainError(f"random vector must be 1-D or 2-D, got shape {arr.shape}")
    if n_points is not None and arr.shape[0] != n_points:
        raise DomainError(f"random vector has {arr.shape[0]} values, space has {n_points} points")
    return arr


def cluster(values: np.ndarray, tol: float = MERGE_TOL) -> tuple[np.ndarray, int]:
    """Group rows of ``values`` lying within ``tol`` of a cluster's first member.

    Clusters are numbered in lexicographic order of their first member.
    Returns ``(labels, n_clusters)``.
    """
    values = as_vector(values)
    n, m = values.shape
    labels = np.empty(n, dtype=np.int64)
    if n == 0:
        return labels, 0
    order = np.lexsort(values.T[::-1])
    if m == 1:
        v = values[order, 0]
        start = 0
        count = 0
        for pos in range(n):
            if v[pos] - v[start] > tol:
                start = pos
                count += 1
            labels[order[pos]] = count
        return labels, count + 1
    reps: list[np.ndarray] = []
    window: list[int] = []
    for idx in order:
        x = values[idx]
        window = [c for c in window if x[0] - reps[c][0] <= tol]
        hit = -1
        for c in window:
            if np.linalg.norm(x - reps[c]) <= tol:
                hit = c
                break
        if hit < 0:
            hit = len(reps)
            reps.append(x)
            window.append(hit)
        labels[idx] = hit
    return labels, len(reps)


def merge_atoms(locations, masses, tol: float = MERGE_TOL):
    """Merge atoms closer than ``tol``; merged location is the mass-weighted mean.

    Returns ``(locations, masses, labels)`` where ``labels[i]`` is the merged
    atom that input atom ``i`` went to.
    """
    locations = as_vector(locations)
    masses = np.asarray(masses, dtype=float)
    labels, k = cluster(locations, tol)
    merged_mass = np.bincount(labels, weights=masses, minlength=k)
    merged_loc = np.empty((k, locations.shape[1]))
    for c in range(locations.shape[1]):
        merged_loc[:, c] = np.bincount(labels, weights=masses * locations[:, c], minlength=k) / merged_mass
    # a single-member cluster keeps its exact location
    singles = np.bincount(labels, minlength=k) == 1
    if singles.any():
        first = np.full(k, -1)
        first[labels[::-1]] = np.arange(len(labels))[::-1]
        merged_loc[singles] = locations[first[singles]]
    return merged_loc, merged_mass, labels


@dataclass(frozen=True, eq=False)
class WeightedSpace:
    """Finite sample space with strictly positive probability weights."""

    ids: tuple[str, ...]
    weights: np.ndarray

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        weights = np.asarray(self.weights, dtype=float)
        if weights.ndim != 1 or len(weights) != len(ids):
            raise InvariantError("one weight per point required")
        if len(ids) == 0:
            raise InvariantError("empty sample space")
        if len(set(ids)) != len(ids):
            raise InvariantError("point identifiers must be unique")
        if not np.all(weights > 0):
            bad = ids[int(np.argmin(weights))]
            raise InvariantError(f"weight of point {bad!r} is not strictly positive")
        if abs(weights.sum() - 1.0) > WEIGHT_TOL:
            raise InvariantError(f"weights sum to {weights.sum()!r}, not 1")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "weights", _frozen(weights))

    @classmethod
    def uniform(cls, n: int, prefix: str = "w") -> "WeightedSpace":
        return cls(tuple(f"{prefix}{i}" for i in range(n)), np.full(n, 1.0 / n))

    @property
    def size(self) -> int:
        return len(self.ids)

    def index(self, ids: Iterable[str]) -> np.ndarray:
        lookup = {p: i for i, p in enumerate(self.ids)}
        try:
            return np.array([lookup[p] for p in ids], dtype=np.int64)
        except KeyError as exc:
            raise DomainError(f"unknown point {exc.args[0]!r}") from None

    def mean(self, X) -> np.ndarray:
        X = as_vector(X, self.size)
        return self.weights @ X

    def norm_sq(self, X) -> float:
        X = as_vector(X, self.size)
        return float(self.weights @ np.einsum("ij,ij->i", X, X))

    def norm(self, X) -> float:
        return float(np.sqrt(self.norm_sq(X)))

    def l1_norm(self, X) -> float:
        X = as_vector(X, self.size)
        return float(self.weights @ np.linalg.norm(X, axis=1))


class Partition:
    """Partition of the points ``0..n-1`` stored as canonical block labels.

    Labels are renumbered by first appearance, so two partitions with the same
    blocks compare equal regardless of how they were built.
    """

    __slots__ = ("labels", "n_blocks")

    def __init__(self, labels):
        labels = np.asarray(labels)
        if labels.ndim != 1:
            raise InvariantError("partition labels must be 1-D")
        if len(labels) == 0:
            raise InvariantError("partition of an empty set")
        _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
        rank = np.empty(len(first), dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(len(first))
        self.labels = _frozen(rank[inverse.ravel()])
        self.n_blocks = len(first)

    @classmethod
    def trivial(cls, n: int) -> "Partition":
        return cls(np.zeros(n, dtype=np.int64))

    @classmethod
    def finest(cls, n: int) -> "Partition":
        return cls(np.arange(n))

    @classmethod
    def from_blocks(cls, blocks: Sequence[Sequence[int]], n: int) -> "Partition":
        labels = np.full(n, -1, dtype=np.int64)
        for b, block in enumerate(blocks):
            block = np.asarray(list(block), dtype=np.int64)
            if len(block) == 0:
                raise InvariantError("empty partition block")
            if np.any((block < 0) | (block >= n)):
                raise DomainError("partition block refers to a point outside the space")
            if np.any(labels[block] >= 0) or len(np.unique(block)) != len(block):
                raise InvariantError("partition blocks overlap")
            labels[block] = b
        if np.any(labels < 0):
            raise InvariantError("partition blocks do not cover the space")
        return cls(labels)

    @classmethod
    def from_id_blocks(cls, blocks: Sequence[Sequence[str]], space: WeightedSpace) -> "Partition":
        return cls.from_blocks([space.index(b) for b in blocks], space.size)

    @property
    def size(self) -> int:
        return len(self.labels)

    def blocks(self) -> list[np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        cuts = np.cumsum(np.bincount(self.labels, minlength=self.n_blocks))[:-1]
        return np.split(order, cuts)

    def refines(self, other: "Partition") -> bool:
        """True if every block of ``self`` lies inside a block of ``other``."""
        if other.size != self.size:
            raise DomainError("partitions live on different spaces")
        pairs = np.unique(np.stack([self.labels, other.labels]), axis=1)
        return pairs.shape[1] == self.n_blocks

    def __eq__(self, other):
        return isinstance(other, Partition) and np.array_equal(self.labels, other.labels)

    def __hash__(self):
        return hash(self.labels.tobytes())

    def __repr__(self):
        return f"Partition(n={self.size}, blocks={self.n_blocks})"


@dataclass(frozen=True, eq=False)
class Filtration:
    """Refining sequence ``[P_0, ..., P_K]`` with ``P_0`` trivial."""

    partitions: tuple[Partition, ...]

    def __post_init__(self):
        parts = tuple(self.partitions)
        if len(parts) < 2:
            raise InvariantError("filtration needs a horizon K >= 1")
        n = parts[0].size
        if any(p.size != n for p in parts):
            raise DomainError("filtration partitions live on different spaces")
        if parts[0].n_blocks != 1:
            raise InvariantError("P_0 must be the trivial partition")
        for k in range(1, len(parts)):
            if not parts[k].refines(parts[k - 1]):
                raise InvariantError(f"P_{k} does not refine P_{k - 1}")
        object.__setattr__(self, "partitions", parts)

    @property
    def K(self) -> int:
        return len(self.partitions) - 1

    def __getitem__(self, k: int) -> Partition:
        return self.partitions[k]

    def __len__(self):
        return len(self.partitions)


@dataclass(frozen=True, eq=False)
class Refinement:
    """Split of every point of a space into one or more weighted children.

    ``parent[j]`` is the old point of new point ``j`` and must be
    nondecreasing; ``branch[j]`` is a label that distinguishes siblings (used
    by :func:`split` to refine partitions).
    """

    parent: np.ndarray
    child_weight: np.ndarray
    branch: np.ndarray = field(default=None)

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=np.int64)
        cw = np.asarray(self.child_weight, dtype=float)
        branch = np.zeros(len(parent), dtype=np.int64) if self.branch is None else np.asarray(self.branch, dtype=np.int64)
        if not (parent.ndim == cw.ndim == branch.ndim == 1) or not (len(parent) == len(cw) == len(branch)):
            raise InvariantError("refinement arrays must be 1-D of equal length")
        if len(parent) and np.any(np.diff(parent) < 0):
            raise InvariantError("children must be listed in parent order")
        if not np.all(cw > 0):
            raise InvariantError("child weights must be strictly positive")
        object.__setattr__(self, "parent", _frozen(parent))
        object.__setattr__(self, "child_weight", _frozen(cw))
        object.__setattr__(self, "branch", _frozen(branch))

    @classmethod
    def identity(cls, space: WeightedSpace) -> "Refinement":
        return cls(np.arange(space.size), space.weights)

    @property
    def size(self) -> int:
        return len(self.parent)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.parent, np.arange(self.size)))

    def then(self, other: "Refinement") -> "Refinement":
        """Composite refinement: apply ``self`` first, then ``other``."""
        return Refinement(self.parent[other.parent], other.child_weight, other.branch)


def refine(space: WeightedSpace, r: Refinement) -> WeightedSpace:
    """Apply ``r`` to ``space``; an unsplit point keeps its identifier."""
    if r.size and (r.parent[0] != 0 or r.parent[-1] != space.size - 1):
        raise DomainError("refinement parents do not match the space")
    counts = np.bincount(r.parent, minlength=space.size)
    if len(counts) != space.size or np.any(counts == 0):
        raise DomainError("refinement parents do not cover the space")
    total = np.bincount(r.parent, weights=r.child_weight, minlength=space.size)
    bad = np.abs(total - space.weights) > WEIGHT_TOL
    if bad.any():
        i = int(np.argmax(bad))
        raise InvariantError(f"children of {space.ids[i]!r} carry {total[i]!r}, parent has {space.weights[i]!r}")
    ids = []
    sibling = 0
    for j, p in enumerate(r.parent):
        sibling = sibling + 1 if j and r.parent[j - 1] == p else 0
        pid = space.ids[p]
        ids.append(pid if counts[p] == 1 else f"{pid}{CHILD_SEP}{sibling}")
    try:
        return WeightedSpace(tuple(ids), r.child_weight)
    except InvariantError as exc:
        raise InvariantError(f"refined space is invalid: {exc}") from None


Liftable = Union[np.ndarray, Partition, Filtration]


def lift(obj, r: Refinement):
    """Carry a random vector, partition or filtration to the refined space.

    Children inherit their parent's value or block.
    """
    if isinstance(obj, Filtration):
        return Filtration(tuple(lift(p, r) for p in obj.partitions))
    if isinstance(obj, Partition):
        _check_parents(obj.size, r)
        return Partition(obj.labels[r.parent])
    X = as_vector(obj)
    _check_parents(X.shape[0], r)
    return X[r.parent]


def split(P: Partition, r: Refinement) -> Partition:
    """Lift ``P`` and additionally separate children with different branch labels."""
    _check_parents(P.size, r)
    width = int(r.branch.max()) + 1 if r.size else 1
    return Partition(P.labels[r.parent] * width + r.branch)


def _check_parents(n: int, r: Refinement):
    # parents are nondecreasing, so they cover 0..n-1 iff they start at 0, end at n-1 and never skip
    p = r.parent
    if r.size == 0 or p[0] != 0 or p[-1] != n - 1 or np.any(np.diff(p) > 1):
        raise DomainError(f"refinement parents do not match a space of {n} points")


def cond_exp(X, A: Partition, space: WeightedSpace) -> np.ndarray:
    """Per-block weighted mean of ``X``, broadcast back to the points."""
    X = as_vector(X, space.size)
    if A.size != space.size:
        raise DomainError("partition and random vector live on different spaces")
    w = space.weights
    block_w = np.bincount(A.labels, weights=w, minlength=A.n_blocks)
    out = np.empty_like(X)
    for c in range(X.shape[1]):
        sums = np.bincount(A.labels, weights=w * X[:, c], minlength=A.n_blocks)
        out[:, c] = (sums / block_w)[A.labels]
    return out


@dataclass(frozen=True, eq=False)
class DiscreteLaw:
    """Finitely supported probability measure on R^m.

    Atoms are kept in lexicographic order of location. ``approximate`` marks
    laws produced by a heuristic (for example a multivariate barycenter).
    """

    locations: np.ndarray
    masses: np.ndarray
    approximate: bool = False

    def __post_init__(self):
        loc = as_vector(self.locations)
        mass = np.asarray(self.masses, dtype=float)
        if mass.ndim != 1 or len(mass) != loc.shape[0] or len(mass) == 0:
            raise InvariantError("one mass per atom required")
        if not np.all(mass > 0):
            raise InvariantError("atom masses must be strictly positive")
        if abs(mass.sum() - 1.0) > WEIGHT_TOL:
            raise InvariantError(f"masses sum to {mass.sum()!r}, not 1")
        object.__setattr__(self, "locations", _frozen(loc))
        object.__setattr__(self, "masses", _frozen(mass))

    @classmethod
    def from_atoms(cls, locations, masses, tol: float = MERGE_TOL, approximate: bool = False) -> "DiscreteLaw":
        """Build a law from possibly repeated atoms, merging those closer than ``tol``."""
        loc, mass, _ = merge_atoms(locations, masses, tol)
        return cls(loc, mass, approximate)

    @classmethod
    def point_mass(cls, location) -> "DiscreteLaw":
        return cls(np.atleast_2d(np.asarray(location, dtype=float)), [1.0])

    @property
    def dim(self) -> int:
        return self.locations.shape[1]

    @property
    def size(self) -> int:
        return len(self.masses)

    def mean(self) -> np.ndarray:
        return self.masses @ self.locations

    def second_moment(self) -> float:
        return float(self.masses @ np.einsum("ij,ij->i", self.locations, self.locations))

    def cdf_breaks(self) -> np.ndarray:
        """Cumulative masses, last entry pinned to exactly 1."""
        c = np.cumsum(self.masses)
        c[-1] = 1.0
        return c

    def isclose(self, other: "DiscreteLaw", tol: float = 1e-12) -> bool:
        return (
            self.size == other.size
            and self.dim == other.dim
            and bool(np.allclose(self.locations, other.locations, rtol=0, atol=tol))
            and bool(np.allclose(self.masses, other.masses, rtol=0, atol=tol))
        )

    def __repr__(self):
        atoms = ", ".join(f"{m:.6g}@{[round(v, 6) for v in x.tolist()]}" for x, m in zip(self.locations, self.masses))
        return f"DiscreteLaw([{atoms}]{', approximate' if self.approximate else ''})"


def _block_indices(block, space: WeightedSpace) -> np.ndarray:
    block = list(block)
    if len(block) == 0:
        raise DomainError("empty block")
    if isinstance(block[0], str):
        return space.index(block)
    idx = np.asarray(block, dtype=np.int64)
    if idx.min() < 0 or idx.max() >= space.size:
        raise DomainError("block is not contained in the space")
    return idx


def conditional_law(X, block, space: WeightedSpace) -> DiscreteLaw:
    """Law of ``X`` restricted to ``block`` (indices or ids), renormalized."""
    X = as_vector(X, space.size)
    idx = _block_indices(block, space)
    w = space.weights[idx]
    return DiscreteLaw.from_atoms(X[idx], w / w.sum())


def law(X, space: WeightedSpace) -> DiscreteLaw:
    return conditional_law(X, np.arange(space.size), space)


def martingale_defect(Xs: Sequence, F: Filtration, space: WeightedSpace, tol: float = 1e-9):
    """Largest ``|E[X_k | P_{k-1}] - X_{k-1}|`` with its location ``(defect, k, point)``.

    ``X_0`` is taken to be 0. Raises :class:`MeasurabilityError` when some
    ``X_k`` is not constant (within ``tol``) on the blocks of ``P_k``.
    """
    if len(Xs) != F.K:
        raise DomainError(f"expected {F.K} process values, got {len(Xs)}")
    if F[0].size != space.size:
        raise DomainError("filtration and space differ in size")
    prev = None
    worst = (0.0, 0, 0)
    for k, Xk in enumerate(Xs, start=1):
        Xk = as_vector(Xk, space.size)
        if prev is None:
            prev = np.zeros_like(Xk)
        if Xk.shape[1] != prev.shape[1]:
            raise DomainError("process values differ in dimension")
        off = np.linalg.norm(Xk - cond_exp(Xk, F[k], space), axis=1)
        if off.max() > tol:
            i = int(np.argmax(off))
            raise MeasurabilityError(f"X_{k} is not P_{k}-measurable at point {space.ids[i]!r} (off by {off[i]:.3g})")
        gap = np.linalg.norm(cond_exp(Xk, F[k - 1], space) - prev, axis=1)
        i = int(np.argmax(gap))
        if gap[i] > worst[0]:
            worst = (float(gap[i]), k, i)
        prev = Xk
    return worst


def is_martingale(Xs: Sequence, F: Filtration, space: WeightedSpace, tol: float = 1e-9) -> float:
    """Max martingale defect of ``X_1..X_K`` w.r.t. ``F`` (``X_0 = 0``)."""
    return martingale_defect(Xs, F, space, tol)[0]
