"""Radial feeder description, tree topology and incidence matrices.

Buses are stored with dense indices: the slack bus is 0 and the remaining
buses are 1..N in file order. Line ``j - 1`` is the unique line feeding bus
``j`` (its receiving end), so lines and buses share one ordering.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import solve_triangular


class CaseError(ValueError):
    """Raised when a case description is malformed or not a radial tree."""


def _frozen(a) -> NDArray[np.float64]:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NetworkCase:
    """Static description of a radial feeder in per unit.

    ``p_load`` and ``q_load`` are nominal injections, so consumption is
    negative. DER VAr limits are either fixed (``fixed_limits[i]``) or derived
    from the inverter capacity as ``+/- sqrt(S^2 - p^2)``.
    """

    labels: tuple[str, ...]
    parent: tuple[int, ...]
    r: NDArray[np.float64]
    x: NDArray[np.float64]
    p_load: NDArray[np.float64]
    q_load: NDArray[np.float64]
    der_capacity: NDArray[np.float64]
    q_min: NDArray[np.float64]
    q_max: NDArray[np.float64]
    fixed_limits: tuple[bool, ...]
    slack_voltage: float = 1.0
    base_kv: float = 4.16
    base_kva: float = 100.0
    name: str = ""

    def __post_init__(self):
        n = len(self.labels) - 1
        for attr in ("r", "x", "p_load", "q_load", "der_capacity", "q_min", "q_max"):
            arr = _frozen(getattr(self, attr))
            if arr.shape != (n,):
                raise CaseError(f"{attr} has shape {arr.shape}, expected ({n},)")
            object.__setattr__(self, attr, arr)
        if len(self.parent) != n or len(self.fixed_limits) != n:
            raise CaseError("parent/fixed_limits length must equal bus count")
        if np.any(self.x <= 0):
            j = int(np.argmax(self.x <= 0)) + 1
            raise CaseError(f"nonpositive reactance on line into bus {self.labels[j]!r}")
        if np.any(self.r < 0):
            raise CaseError("negative resistance")
        if np.any(self.q_min > self.q_max):
            raise CaseError("q_min exceeds q_max")
        if np.any(self.der_capacity < 0):
            raise CaseError("negative DER capacity")
        # raises on cycles / unreachable buses
        build_topology(self)

    @property
    def n_bus(self) -> int:
        """Number of non-slack buses N."""
        return len(self.labels) - 1

    @property
    def lines(self) -> list[tuple[int, int, float, float]]:
        """Lines as ``(from, to, r, x)`` with line ``j - 1`` feeding bus ``j``."""
        return [
            (self.parent[j - 1], j, float(self.r[j - 1]), float(self.x[j - 1]))
            for j in range(1, self.n_bus + 1)
        ]

    @property
    def z_base(self) -> float:
        return self.base_kv**2 * 1000.0 / self.base_kva

    def var_limits(self, p_der=None) -> tuple[NDArray, NDArray]:
        """VAr box for given DER real power (pu); ``None`` means zero output."""
        if p_der is None:
            p_der = np.zeros(self.n_bus)
        head = np.sqrt(np.maximum(self.der_capacity**2 - np.asarray(p_der) ** 2, 0.0))
        fixed = np.asarray(self.fixed_limits)
        lo = np.where(fixed, np.clip(self.q_min, -head, head), -head)
        hi = np.where(fixed, np.clip(self.q_max, -head, head), head)
        return lo, hi

    def with_loads(self, p_load=None, q_load=None) -> "NetworkCase":
        from dataclasses import replace

        return replace(
            self,
            p_load=self.p_load if p_load is None else p_load,
            q_load=self.q_load if q_load is None else q_load,
        )


@dataclass(frozen=True)
class Topology:
    """Parent/children/descendant structure of a radial feeder.

    ``order`` is the BFS order of non-slack buses from the slack, visiting
    children by ascending index, so every parent precedes its children.
    """

    parent: tuple[int, ...]
    children: tuple[tuple[int, ...], ...]
    descendants: tuple[frozenset[int], ...]
    order: tuple[int, ...]
    depth: tuple[int, ...]

    @property
    def n_bus(self) -> int:
        return len(self.children) - 1

    def parent_of(self, j: int) -> int:
        return self.parent[j]

    def path_to_root(self, j: int) -> list[int]:
        """Buses on the path from ``j`` up to (excluding) the slack."""
        path = []
        while j != 0:
            path.append(j)
            j = self.parent[j]
        return path

    def subtree_matrix(self) -> NDArray[np.float64]:
        """``T[j-1, k-1] = 1`` when bus k lies in the subtree rooted at bus j."""
        n = self.n_bus
        t = np.eye(n)
        for j in range(1, n + 1):
            for k in self.descendants[j]:
                t[j - 1, k - 1] = 1.0
        return t


@dataclass(frozen=True)
class IncidenceDecomposition:
    """Reduced incidence matrix of the tree.

    Column ``j - 1`` (line feeding bus j) has +1 at the sending bus and -1 at
    bus j. ``m0`` is the slack row and ``M`` the N x N block for buses 1..N.
    """

    m0: NDArray[np.float64]
    M: NDArray[np.float64]
    order: tuple[int, ...]
    _perm: NDArray[np.intp] = field(repr=False)
    _upper: NDArray[np.float64] = field(repr=False)

    @property
    def full(self) -> NDArray[np.float64]:
        """The (N+1) x N incidence matrix with the slack row on top."""
        return np.vstack([self.m0, self.M])

    def solve(self, b) -> NDArray[np.float64]:
        """Solve ``M z = b`` by a triangular solve in topological order."""
        b = np.asarray(b, dtype=float)
        p = self._perm
        z = solve_triangular(self._upper, b[p], lower=False)
        out = np.empty_like(z)
        out[p] = z
        return out

    def solve_t(self, b) -> NDArray[np.float64]:
        """Solve ``M^T z = b``."""
        b = np.asarray(b, dtype=float)
        p = self._perm
        z = solve_triangular(self._upper, b[p], lower=False, trans="T")
        out = np.empty_like(z)
        out[p] = z
        return out


def build_topology(case: NetworkCase) -> Topology:
    n = case.n_bus
    parent = (-1,) + tuple(int(p) for p in case.parent)
    kids: list[list[int]] = [[] for _ in range(n + 1)]
    for j in range(1, n + 1):
        pj = parent[j]
        if not 0 <= pj <= n or pj == j:
            raise CaseError(f"bus {case.labels[j]!r} has invalid predecessor")
        kids[pj].append(j)
    children = tuple(tuple(sorted(c)) for c in kids)

    order: list[int] = []
    depth = [0] * (n + 1)
    seen = {0}
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in children[i]:
            if j in seen:
                raise CaseError("cycle detected")
            seen.add(j)
            depth[j] = depth[i] + 1
            order.append(j)
            queue.append(j)
    if len(order) != n:
        missing = sorted(set(range(1, n + 1)) - seen)
        raise CaseError(
            "cycle detected or bus unreachable from slack: "
            + ", ".join(repr(case.labels[j]) for j in missing)
        )

    desc: list[set[int]] = [set() for _ in range(n + 1)]
    for j in reversed(order):
        for c in children[j]:
            desc[j].add(c)
            desc[j] |= desc[c]
    desc[0] = set(order)
    return Topology(
        parent=parent,
        children=children,
        descendants=tuple(frozenset(d) for d in desc),
        order=tuple(order),
        depth=tuple(depth),
    )


def incidence(case: NetworkCase, topo: Topology) -> IncidenceDecomposition:
    n = case.n_bus
    full = np.zeros((n + 1, n))
    for j in range(1, n + 1):
        full[topo.parent[j], j - 1] = 1.0
        full[j, j - 1] = -1.0
    m0, M = full[0].copy(), full[1:].copy()
    perm = np.array(topo.order, dtype=np.intp) - 1
    upper = M[np.ix_(perm, perm)]
    if not np.allclose(upper, np.triu(upper)):  # pragma: no cover - tree property
        raise CaseError("incidence matrix is not triangular in topological order")
    for a in (m0, M, upper):
        a.setflags(write=False)
    return IncidenceDecomposition(m0=m0, M=M, order=topo.order, _perm=perm, _upper=upper)


# --------------------------------------------------------------------------
# case files


def _num(entry: dict, key: str, default: float = 0.0) -> float:
    val = entry.get(key, default)
    if val is None:
        return default
    try:
        return float(val)
    except (TypeError, ValueError):
        raise CaseError(f"field {key!r} is not numeric: {val!r}") from None


def case_from_dict(doc: dict[str, Any], name: str = "") -> NetworkCase:
    """Build a validated case from the JSON document structure."""
    try:
        base_kv = float(doc["base_kv"])
        base_kva = float(doc["base_kva"])
        v0 = float(doc.get("slack_voltage", 1.0))
        buses = list(doc["buses"])
        lines = list(doc["lines"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseError(f"case document missing or malformed field: {exc}") from None
    if base_kv <= 0 or base_kva <= 0:
        raise CaseError("bases must be positive")

    slack = str(doc.get("slack_bus", 0))
    labels = [slack]
    for b in buses:
        lab = str(b["id"])
        if lab in labels:
            raise CaseError(f"duplicate bus id {lab!r}")
        labels.append(lab)
    index = {lab: i for i, lab in enumerate(labels)}
    n = len(labels) - 1
    if len(lines) != n:
        raise CaseError(f"not radial: {len(lines)} lines for {n} non-slack buses")

    ohm = [("r_ohm" in ln or "x_ohm" in ln) for ln in lines]
    pu = [("r_pu" in ln or "x_pu" in ln) for ln in lines]
    if any(o and p for o, p in zip(ohm, pu)) or (any(ohm) and any(pu)):
        raise CaseError("impedances must be all-ohm or all-pu, never mixed")
    z_base = base_kv**2 * 1000.0 / base_kva
    scale = 1.0 / z_base if any(ohm) else 1.0
    rkey, xkey = ("r_ohm", "x_ohm") if any(ohm) else ("r_pu", "x_pu")

    parent = [None] * n
    r = np.zeros(n)
    x = np.zeros(n)
    for ln in lines:
        try:
            a, b = index[str(ln["from"])], index[str(ln["to"])]
        except KeyError as exc:
            raise CaseError(f"line references unknown bus {exc}") from None
        if b == 0:
            raise CaseError("not radial: line feeds the slack bus")
        if parent[b - 1] is not None:
            raise CaseError(f"not radial: duplicate line into bus {labels[b]!r}")
        parent[b - 1] = a
        r[b - 1] = _num(ln, rkey) * scale
        x[b - 1] = _num(ln, xkey) * scale
        if x[b - 1] <= 0:
            raise CaseError(f"nonpositive reactance on line into bus {labels[b]!r}")

    p_load = np.array([-_num(b, "p_load_kw") / base_kva for b in buses])
    q_load = np.array([-_num(b, "q_load_kvar") / base_kva for b in buses])
    cap = np.zeros(n)
    qmin = np.zeros(n)
    qmax = np.zeros(n)
    fixed = [False] * n
    for i, b in enumerate(buses):
        der = b.get("der") or {}
        cap[i] = _num(der, "capacity_kva") / base_kva
        has_box = der.get("q_min_kvar") is not None or der.get("q_max_kvar") is not None
        if has_box:
            fixed[i] = True
            qmin[i] = _num(der, "q_min_kvar") / base_kva
            qmax[i] = _num(der, "q_max_kvar") / base_kva
            if cap[i] == 0:
                cap[i] = max(abs(qmin[i]), abs(qmax[i]))
        else:
            qmin[i], qmax[i] = -cap[i], cap[i]
    return NetworkCase(
        labels=tuple(labels),
        parent=tuple(parent),
        r=r,
        x=x,
        p_load=p_load,
        q_load=q_load,
        der_capacity=cap,
        q_min=qmin,
        q_max=qmax,
        fixed_limits=tuple(fixed),
        slack_voltage=v0,
        base_kv=base_kv,
        base_kva=base_kva,
        name=name or str(doc.get("name", "")),
    )


def load_case(path) -> NetworkCase:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path}: parse failure: {exc}") from None
    return case_from_dict(doc, name=path.stem)


def case_to_dict(case: NetworkCase) -> dict[str, Any]:
    """Inverse of :func:`case_from_dict` using per-unit impedances."""
    kva = case.base_kva
    buses = []
    for i in range(case.n_bus):
        der: dict[str, float] = {"capacity_kva": float(case.der_capacity[i] * kva)}
        if case.fixed_limits[i]:
            der["q_min_kvar"] = float(case.q_min[i] * kva)
            der["q_max_kvar"] = float(case.q_max[i] * kva)
        buses.append(
            {
                "id": case.labels[i + 1],
                "p_load_kw": float(-case.p_load[i] * kva),
                "q_load_kvar": float(-case.q_load[i] * kva),
                "der": der,
            }
        )
    lines = [
        {"from": case.labels[a], "to": case.labels[b], "r_pu": r, "x_pu": x}
        for a, b, r, x in case.lines
    ]
    return {
        "name": case.name,
        "base_kv": case.base_kv,
        "base_kva": case.base_kva,
        "slack_voltage": case.slack_voltage,
        "slack_bus": case.labels[0],
        "buses": buses,
        "lines": lines,
    }


def save_case(case: NetworkCase, path) -> None:
    Path(path).write_text(json.dumps(case_to_dict(case), indent=1))


def simple_case(
    parents: Sequence[int],
    r: Sequence[float],
    x: Sequence[float],
    p_load: Sequence[float] | None = None,
    q_load: Sequence[float] | None = None,
    q_bound: float | Sequence[float] = 1.0,
    slack_voltage: float = 1.0,
    name: str = "",
) -> NetworkCase:
    """Per-unit case from parent indices; handy for desk checks and tests."""
    n = len(parents)
    qb = np.broadcast_to(np.asarray(q_bound, dtype=float), (n,))
    return NetworkCase(
        labels=tuple(str(i) for i in range(n + 1)),
        parent=tuple(int(p) for p in parents),
        r=np.asarray(r, dtype=float),
        x=np.asarray(x, dtype=float),
        p_load=np.zeros(n) if p_load is None else np.asarray(p_load, dtype=float),
        q_load=np.zeros(n) if q_load is None else np.asarray(q_load, dtype=float),
        der_capacity=qb.copy(),
        q_min=-qb,
        q_max=qb.copy(),
        fixed_limits=(True,) * n,
        slack_voltage=slack_voltage,
        name=name,
    )
