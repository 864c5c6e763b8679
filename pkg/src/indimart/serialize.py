"""JSON and CSV reading and writing.

Every writer is byte-deterministic: keys keep insertion order, floats are
written with ``repr`` precision and points appear in space order.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .decompose import Decomposition, StepSummary
from .errors import IndimartError, SchemaError
from .space import DiscreteLaw, Filtration, Partition, WeightedSpace

FORMAT = "indimart-decomposition"
VERSION = 1

NORM_COLUMNS = ("n", "k", "norm_sq_Y", "norm_sq_Z", "norm_sq_dX", "norm_sq_X", "residual")
DECAY_COLUMNS = ("k", "n", "residual_norm")


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False) + "\n"


def _require(cond: bool, msg: str):
    if not cond:
        raise SchemaError(msg)


def _number(x, where: str) -> float:
    _require(isinstance(x, (int, float)) and not isinstance(x, bool), f"{where}: expected a number, got {x!r}")
    x = float(x)
    _require(math.isfinite(x), f"{where}: value is not finite")
    return x


def _values(V, space: WeightedSpace) -> dict:
    return {pid: [float(v) for v in row] for pid, row in zip(space.ids, V)}


def _read_values(obj, space: WeightedSpace, m: int, where: str) -> np.ndarray:
    _require(isinstance(obj, dict), f"{where}: expected an object keyed by point id")
    extra = set(obj) - set(space.ids)
    if extra:
        raise SchemaError(f"{where}: unknown point id {sorted(extra)[0]!r}")
    out = np.empty((space.size, m))
    for i, pid in enumerate(space.ids):
        _require(pid in obj, f"{where}: missing point {pid!r}")
        row = obj[pid]
        if not isinstance(row, list):
            row = [row]
        _require(len(row) == m, f"{where}[{pid!r}]: expected {m} components, got {len(row)}")
        out[i] = [_number(v, f"{where}[{pid!r}]") for v in row]
    return out


def _space_to_json(space: WeightedSpace) -> list:
    return [{"id": pid, "weight": float(w)} for pid, w in zip(space.ids, space.weights)]


def _space_from_json(obj) -> WeightedSpace:
    _require(isinstance(obj, list) and obj, "points: expected a non-empty list")
    ids, weights = [], []
    for i, p in enumerate(obj):
        _require(isinstance(p, dict) and "id" in p and "weight" in p, f"points[{i}]: needs 'id' and 'weight'")
        _require(isinstance(p["id"], str), f"points[{i}].id: expected a string")
        ids.append(p["id"])
        weights.append(_number(p["weight"], f"points[{i}].weight"))
    try:
        return WeightedSpace(tuple(ids), np.array(weights))
    except IndimartError as exc:
        raise SchemaError(f"points: {exc}") from exc


def _filtration_to_json(F: Filtration, space: WeightedSpace) -> list:
    ids = np.array(space.ids, dtype=object)
    return [[ids[b].tolist() for b in P.blocks()] for P in F.partitions]


def _filtration_from_json(obj, space: WeightedSpace) -> Filtration:
    _require(isinstance(obj, list) and obj, "filtration: expected a non-empty list of partitions")
    known = set(space.ids)
    parts = []
    for t, blocks in enumerate(obj):
        where = f"filtration[{t}]"
        _require(isinstance(blocks, list), f"{where}: expected a list of blocks")
        seen: set = set()
        for j, block in enumerate(blocks):
            _require(isinstance(block, list) and block, f"{where}[{j}]: expected a non-empty list of ids")
            for pid in block:
                _require(isinstance(pid, str) and pid in known, f"{where}[{j}]: unknown point id {pid!r}")
                _require(pid not in seen, f"{where}: point {pid!r} appears twice")
                seen.add(pid)
        missing = [pid for pid in space.ids if pid not in seen]
        if missing:
            raise SchemaError(f"{where}: point {missing[0]!r} is not covered")
        parts.append(Partition.from_id_blocks(blocks, space))
    try:
        return Filtration(tuple(parts))
    except IndimartError as exc:
        raise SchemaError(f"filtration: {exc}") from exc


def _martingale_from_json(obj, space: WeightedSpace, m: int, K: int) -> list[np.ndarray]:
    _require(isinstance(obj, list), "martingale: expected a list of {t, values}")
    by_t: dict[int, np.ndarray] = {}
    for i, entry in enumerate(obj):
        _require(isinstance(entry, dict) and "t" in entry and "values" in entry, f"martingale[{i}]: needs 't' and 'values'")
        t = entry["t"]
        _require(isinstance(t, int) and not isinstance(t, bool), f"martingale[{i}].t: expected an integer")
        _require(0 <= t <= K, f"martingale[{i}].t = {t} outside 0..{K}")
        _require(t not in by_t, f"martingale: time {t} given twice")
        by_t[t] = _read_values(entry["values"], space, m, f"martingale[t={t}].values")
    if 0 in by_t:
        _require(bool(np.all(by_t[0] == 0)), "martingale[t=0]: X_0 must be 0")
    for t in range(1, K + 1):
        _require(t in by_t, f"martingale: time {t} is missing")
    return [by_t[t] for t in range(1, K + 1)]


def _read_json(source) -> dict:
    try:
        if isinstance(source, dict):
            return source
        text = Path(source).read_text()
        obj = json.loads(text)
    except (OSError, UnicodeDecodeError) as exc:
        raise SchemaError(f"cannot read {source}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from exc
    _require(isinstance(obj, dict), "top level: expected an object")
    return obj


def martingale_to_json(space: WeightedSpace, F: Filtration, Xs) -> dict:
    Xs = [np.asarray(X, dtype=float).reshape(space.size, -1) for X in Xs]
    return {
        "points": _space_to_json(space),
        "filtration": _filtration_to_json(F, space),
        "m": int(Xs[0].shape[1]),
        "martingale": [{"t": t, "values": _values(X, space)} for t, X in enumerate(Xs, start=1)],
    }


def write_martingale(path, space: WeightedSpace, F: Filtration, Xs):
    Path(path).write_text(_dump(martingale_to_json(space, F, Xs)))


def read_martingale(source) -> tuple[WeightedSpace, Filtration, list[np.ndarray]]:
    """Parse a martingale file (or already-loaded dict); raises :class:`SchemaError`."""
    obj = _read_json(source)
    for key in ("points", "filtration", "m", "martingale"):
        _require(key in obj, f"missing key {key!r}")
    m = obj["m"]
    _require(isinstance(m, int) and not isinstance(m, bool) and m >= 1, "m: expected a positive integer")
    space = _space_from_json(obj["points"])
    F = _filtration_from_json(obj["filtration"], space)
    _require(F.K >= 1, "filtration: need at least one step after the trivial partition")
    Xs = _martingale_from_json(obj["martingale"], space, m, F.K)
    return space, F, Xs


def _law_to_json(law: DiscreteLaw) -> dict:
    return {
        "locations": law.locations.tolist(),
        "masses": law.masses.tolist(),
        "approximate": bool(law.approximate),
    }


def decomposition_to_json(d: Decomposition) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "points": _space_to_json(d.space),
        "filtration": _filtration_to_json(d.filtration, d.space),
        "m": d.m,
        "K": d.K,
        "N": d.N,
        "martingale": [{"t": t, "values": _values(X, d.space)} for t, X in enumerate(d.X, start=1)],
        "increments": [
            {"n": n + 1, "k": k + 1, "Y": _values(d.Y[n, k], d.space), "Z": _values(d.Z[n, k], d.space)}
            for n in range(d.N)
            for k in range(d.K)
        ],
        "steps": [
            {
                "k": s.k,
                "converged": s.converged,
                "n_stages": s.n_stages,
                "xi_norm_sq": s.xi_norm_sq,
                "eta_norm_sq": list(s.eta_norm_sq),
                "residual_norm_sq": list(s.residual_norm_sq),
                "terminal_residual_norm_sq": s.terminal_residual_norm_sq,
                "self_consistency": list(s.self_consistency),
                "barycenters": [_law_to_json(b) for b in s.barycenters],
            }
            for s in d.steps
        ],
        "truncation": {"tol_rel": d.tol_rel, "n_max": d.n_max, "max_points": d.max_points},
        "norm_table": d.norm_table(),
    }


def write_decomposition(path, d: Decomposition):
    Path(path).write_text(_dump(decomposition_to_json(d)))


def read_decomposition(source) -> Decomposition:
    """Parse a decomposition file; the norm table is ignored and recomputed on demand."""
    obj = _read_json(source)
    _require(obj.get("format") == FORMAT, f"format: expected {FORMAT!r}")
    _require(obj.get("version") == VERSION, f"version: expected {VERSION}")
    for key in ("K", "N", "steps", "increments", "truncation"):
        _require(key in obj, f"missing key {key!r}")
    space, F, Xs = read_martingale(obj)
    K, N, m = F.K, obj["N"], obj["m"]
    _require(obj["K"] == K, "K does not match the filtration")
    _require(isinstance(N, int) and N >= 0, "N: expected a non-negative integer")
    Y = np.zeros((N, K, space.size, m))
    Z = np.zeros_like(Y)
    seen = set()
    for i, e in enumerate(obj["increments"]):
        _require(isinstance(e, dict) and {"n", "k", "Y", "Z"} <= set(e), f"increments[{i}]: needs n, k, Y, Z")
        n, k = e["n"], e["k"]
        _require(isinstance(n, int) and isinstance(k, int), f"increments[{i}]: n and k must be integers")
        _require(1 <= n <= N and 1 <= k <= K, f"increments[{i}]: (n, k) = ({n}, {k}) out of range")
        _require((n, k) not in seen, f"increments: (n, k) = ({n}, {k}) given twice")
        seen.add((n, k))
        Y[n - 1, k - 1] = _read_values(e["Y"], space, m, f"increments[n={n},k={k}].Y")
        Z[n - 1, k - 1] = _read_values(e["Z"], space, m, f"increments[n={n},k={k}].Z")
    _require(len(seen) == N * K, "increments: some (n, k) entries are missing")
    _require(isinstance(obj["steps"], list) and len(obj["steps"]) == K, "steps: expected one entry per time step")
    steps = []
    for i, s in enumerate(obj["steps"]):
        try:
            steps.append(
                StepSummary(
                    k=int(s["k"]),
                    converged=bool(s["converged"]),
                    xi_norm_sq=_number(s["xi_norm_sq"], f"steps[{i}].xi_norm_sq"),
                    eta_norm_sq=tuple(_number(v, f"steps[{i}].eta_norm_sq") for v in s["eta_norm_sq"]),
                    residual_norm_sq=tuple(_number(v, f"steps[{i}].residual_norm_sq") for v in s["residual_norm_sq"]),
                    self_consistency=tuple(_number(v, f"steps[{i}].self_consistency") for v in s["self_consistency"]),
                    barycenters=tuple(
                        DiscreteLaw(np.array(b["locations"], dtype=float), np.array(b["masses"], dtype=float), bool(b["approximate"]))
                        for b in s.get("barycenters", [])
                    ),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"steps[{i}]: {exc!r}") from exc
    trunc = obj["truncation"]
    _require(isinstance(trunc, dict) and {"tol_rel", "n_max"} <= set(trunc), "truncation: needs tol_rel and n_max")
    return Decomposition(
        space=space,
        filtration=F,
        X=np.stack(Xs),
        Y=Y,
        Z=Z,
        steps=tuple(steps),
        tol_rel=_number(trunc["tol_rel"], "truncation.tol_rel"),
        n_max=int(trunc["n_max"]),
        max_points=None if trunc.get("max_points") is None else int(trunc["max_points"]),
    )


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def norm_table_csv(d: Decomposition) -> str:
    """Columns ``n,k,norm_sq_Y,norm_sq_Z,norm_sq_dX,norm_sq_X,residual`` (``residual`` is ``|xi_{n+1}|^2``)."""
    return _csv(NORM_COLUMNS, ([row[c] for c in NORM_COLUMNS] for row in d.norm_table()))


def stage_decay_csv(d: Decomposition) -> str:
    """``|xi_{n+1}|`` per step and stage, with ``n = 0`` giving ``|xi_1|``."""
    rows = []
    for s in d.steps:
        rows.append((s.k, 0, math.sqrt(s.xi_norm_sq)))
        rows.extend((s.k, n, math.sqrt(r)) for n, r in enumerate(s.residual_norm_sq, start=1))
    return _csv(DECAY_COLUMNS, rows)


def report_to_json(report) -> str:
    return json.dumps(report.to_dict(), indent=2, allow_nan=True) + "\n"
