"""Areal adjacency graphs, iCAR structure matrices and domain partitions.

Areas are indexed ``0..I-1`` in the order of their labels.  The structure
matrix of the intrinsic CAR prior is the graph Laplacian ``Q = D_w - W``
where ``W`` is the binary adjacency matrix and ``D_w`` holds the number of
neighbours of each area.  Partitions assign every area to one home
subdomain; a k-order partition grows each subdomain by k graph hops so
that border areas see their neighbours from adjacent subdomains.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .errors import ConfigError, GraphError

__all__ = [
    "AreaGraph",
    "StructureMatrix",
    "PartitionPlan",
    "build_graph",
    "structure_matrix",
    "connected_components",
    "expand_partition",
    "subgraph",
    "read_edge_list",
    "read_partition",
    "write_edge_list",
    "write_partition",
    "path_graph",
    "cycle_graph",
    "lattice_graph",
    "block_partition",
]


@dataclass(frozen=True, eq=False)
class AreaGraph:
    """Undirected binary adjacency between ``n_areas`` areal units.

    ``edges`` is an ``(m, 2)`` integer array with ``i < j`` in every row,
    sorted lexicographically.  ``global_index`` maps local indices back to
    the parent graph when the graph was produced by :func:`subgraph`.
    """

    n_areas: int
    edges: np.ndarray
    area_ids: tuple[str, ...]
    global_index: np.ndarray | None = None
    _adj: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        n = int(self.n_areas)
        if n < 1:
            raise GraphError("a graph needs at least one area")
        if len(self.area_ids) != n:
            raise GraphError(f"{len(self.area_ids)} labels for {n} areas")
        if len(set(self.area_ids)) != n:
            raise GraphError("duplicate area label")
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise GraphError("edge index out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise GraphError("self-loop in edge set")
            if np.any(edges[:, 0] > edges[:, 1]):
                raise GraphError("edges must be stored with i < j")
            if len(np.unique(edges, axis=0)) != len(edges):
                raise GraphError("duplicate edge")
        edges = edges.copy()
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "n_areas", n)
        object.__setattr__(self, "area_ids", tuple(str(a) for a in self.area_ids))
        gi = self.global_index
        if gi is None:
            gi = np.arange(n)
        gi = np.asarray(gi, dtype=np.int64).copy()
        if gi.shape != (n,):
            raise GraphError("global_index must have one entry per area")
        gi.setflags(write=False)
        object.__setattr__(self, "global_index", gi)
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
        object.__setattr__(self, "_adj", adj)

    @property
    def adjacency(self) -> sp.csr_matrix:
        """Binary adjacency matrix ``W`` (a copy)."""
        return self._adj.copy()

    @property
    def degrees(self) -> np.ndarray:
        return np.asarray(self._adj.sum(axis=1)).ravel().astype(np.int64)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def index_of(self, label: str) -> int:
        try:
            return self._label_index()[label]
        except KeyError:
            raise GraphError(f"unknown area label {label!r}") from None

    def _label_index(self) -> dict[str, int]:
        cache = self.__dict__.get("_label_cache")
        if cache is None:
            cache = {lab: i for i, lab in enumerate(self.area_ids)}
            object.__setattr__(self, "_label_cache", cache)
        return cache

    def neighbours(self, i: int) -> np.ndarray:
        lo, hi = self._adj.indptr[i], self._adj.indptr[i + 1]
        return np.sort(self._adj.indices[lo:hi])


@dataclass(frozen=True, eq=False)
class StructureMatrix:
    """iCAR structure matrix ``Q = D_w - W`` with component bookkeeping.

    ``Q`` always stores every diagonal entry explicitly (zero for isolated
    areas) so that its sparsity pattern does not depend on values.
    """

    Q: sp.csr_matrix
    n_components: int
    component_labels: np.ndarray

    @property
    def rank_deficiency(self) -> int:
        return self.n_components

    @property
    def n_areas(self) -> int:
        return self.Q.shape[0]

    def components(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.component_labels == c) for c in range(self.n_components)]


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    """Assignment of areas to ``n_subdomains`` home subdomains plus k-order growth.

    ``home[i]`` is the 0-based subdomain of area ``i``; ``expanded[d]`` is the
    sorted array of member indices of subdomain ``d`` after ``order`` hops.
    ``subdomain_ids`` carries the external names in first-appearance order.
    """

    home: np.ndarray
    order: int
    expanded: tuple[np.ndarray, ...]
    subdomain_ids: tuple[str, ...]

    @property
    def n_subdomains(self) -> int:
        return len(self.expanded)

    @property
    def n_areas(self) -> int:
        return len(self.home)

    def home_members(self, d: int) -> np.ndarray:
        return np.flatnonzero(self.home == d)

    def memberships(self, i: int) -> list[int]:
        """Subdomains whose expanded set contains area ``i``."""
        return [d for d, members in enumerate(self.expanded) if _contains(members, i)]


def _contains(sorted_arr: np.ndarray, value: int) -> bool:
    pos = np.searchsorted(sorted_arr, value)
    return bool(pos < len(sorted_arr) and sorted_arr[pos] == value)


def build_graph(edge_list: Iterable[tuple[str, str]], labels: Sequence[str]) -> AreaGraph:
    """Build an :class:`AreaGraph` from label pairs.

    Indices follow the order of ``labels``.  Pairs listed in both
    directions, or repeated, collapse to one undirected edge.

    >>> g = build_graph([("A", "B"), ("B", "C")], ["A", "B", "C"])
    >>> g.degrees.tolist()
    [1, 2, 1]
    """
    labels = [str(x) for x in labels]
    index: dict[str, int] = {}
    for i, lab in enumerate(labels):
        if lab in index:
            raise GraphError(f"duplicate label {lab!r}")
        index[lab] = i
    pairs = set()
    for a, b in edge_list:
        a, b = str(a), str(b)
        for lab in (a, b):
            if lab not in index:
                raise GraphError(f"unknown area label {lab!r}")
        if a == b:
            raise GraphError(f"self-loop on area {a!r}")
        i, j = index[a], index[b]
        pairs.add((min(i, j), max(i, j)))
    edges = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    return AreaGraph(len(labels), edges, tuple(labels))


def structure_matrix(g: AreaGraph) -> StructureMatrix:
    """Return ``Q = D_w - W`` for ``g`` together with its connected components."""
    W = g._adj
    n = g.n_areas
    deg = np.asarray(W.sum(axis=1)).ravel()
    # explicit diagonal keeps isolated areas in the pattern
    e = g.edges
    rows = np.concatenate([np.arange(n), e[:, 0], e[:, 1]])
    cols = np.concatenate([np.arange(n), e[:, 1], e[:, 0]])
    vals = np.concatenate([deg, -np.ones(2 * len(e))])
    Q = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    Q.sort_indices()
    ncomp, labels = _component_labels(g)
    return StructureMatrix(Q, ncomp, labels)


def _component_labels(g: AreaGraph) -> tuple[int, np.ndarray]:
    ncomp, labels = csgraph.connected_components(g._adj, directed=False)
    # relabel so components are numbered by their smallest member
    first = np.full(ncomp, g.n_areas, dtype=np.int64)
    np.minimum.at(first, labels, np.arange(g.n_areas))
    order = np.argsort(first, kind="stable")
    remap = np.empty(ncomp, dtype=np.int64)
    remap[order] = np.arange(ncomp)
    return int(ncomp), remap[labels]


def connected_components(g: AreaGraph) -> list[np.ndarray]:
    """Connected components as sorted index arrays, ordered by smallest member."""
    ncomp, labels = _component_labels(g)
    return [np.flatnonzero(labels == c) for c in range(ncomp)]


def expand_partition(
    g: AreaGraph,
    home: Mapping[int, int] | Sequence[int] | np.ndarray,
    k: int,
    subdomain_ids: Sequence[str] | None = None,
) -> PartitionPlan:
    """Grow each home set by its ``k``-hop closed neighbourhood in ``g``.

    ``home`` maps every area index to a 0-based subdomain index, either as a
    sequence of length ``n_areas`` or as a mapping.  Subdomains are numbered
    ``0..D-1`` and each must own at least one area.
    """
    if k < 0:
        raise GraphError("expansion order must be >= 0")
    n = g.n_areas
    if isinstance(home, Mapping):
        missing = [i for i in range(n) if i not in home]
        if missing:
            raise GraphError(f"home assignment missing for areas {missing[:5]}")
        home_arr = np.array([home[i] for i in range(n)], dtype=np.int64)
    else:
        home_arr = np.asarray(home, dtype=np.int64).copy()
        if home_arr.shape != (n,):
            raise GraphError("home assignment must cover every area exactly once")
    if home_arr.min() < 0:
        raise GraphError("subdomain indices must be >= 0")
    n_sub = int(home_arr.max()) + 1
    counts = np.bincount(home_arr, minlength=n_sub)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0).tolist()
        raise GraphError(f"subdomain(s) {empty} own no areas")
    if subdomain_ids is None:
        subdomain_ids = [str(d + 1) for d in range(n_sub)]
    if len(subdomain_ids) != n_sub:
        raise GraphError("one id per subdomain required")

    W = g._adj
    expanded = []
    for d in range(n_sub):
        member = home_arr == d
        frontier = member.copy()
        for _ in range(k):
            reach = (W @ frontier.astype(np.float64)) > 0
            frontier = reach & ~member
            if not frontier.any():
                break
            member |= frontier
        expanded.append(np.flatnonzero(member))
    home_arr.setflags(write=False)
    for arr in expanded:
        arr.setflags(write=False)
    return PartitionPlan(home_arr, int(k), tuple(expanded), tuple(str(s) for s in subdomain_ids))


def subgraph(g: AreaGraph, members: Iterable[int]) -> AreaGraph:
    """Induced subgraph on ``members``, re-indexed in ascending order.

    The result's ``global_index`` maps each local index to the index in the
    root graph (composing through nested subgraphs).
    """
    members = np.unique(np.asarray(list(members) if not isinstance(members, np.ndarray) else members, dtype=np.int64))
    if members.size == 0:
        raise GraphError("subgraph needs at least one member")
    if members[0] < 0 or members[-1] >= g.n_areas:
        raise GraphError("member index out of range")
    local = np.full(g.n_areas, -1, dtype=np.int64)
    local[members] = np.arange(members.size)
    e = g.edges
    keep = (local[e[:, 0]] >= 0) & (local[e[:, 1]] >= 0) if e.size else np.zeros(0, dtype=bool)
    sub_edges = local[e[keep]] if e.size else np.zeros((0, 2), dtype=np.int64)
    labels = tuple(g.area_ids[i] for i in members)
    return AreaGraph(members.size, sub_edges, labels, global_index=g.global_index[members])


# ------------------------------------------------------------------ #
# File formats
# ------------------------------------------------------------------ #


def _data_lines(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].rstrip("\r\n")
            if not line.strip():
                continue
            yield lineno, line


def read_edge_list(path: str | Path, labels: Sequence[str] | None = None) -> AreaGraph:
    """Read a ``label_a<TAB>label_b`` edge list.

    When ``labels`` is omitted, areas are ordered by first appearance in the
    file, which cannot represent isolated areas; pass ``labels`` for those.
    """
    pairs = []
    seen: dict[str, None] = {}
    for lineno, line in _data_lines(path):
        parts = [p.strip() for p in line.split("\t")]
        if len(parts) != 2 or not all(parts):
            raise ConfigError(f"{path}:{lineno}: expected 'label_a<TAB>label_b'")
        pairs.append((parts[0], parts[1]))
        seen.setdefault(parts[0])
        seen.setdefault(parts[1])
    if labels is None:
        labels = list(seen)
    return build_graph(pairs, labels)


def read_partition(path: str | Path, g: AreaGraph) -> tuple[np.ndarray, tuple[str, ...]]:
    """Read ``label<TAB>subdomain_id`` lines into a home array for ``g``.

    Subdomain ids are mapped to ``0..D-1`` in order of first appearance.
    """
    ids: dict[str, int] = {}
    home = np.full(g.n_areas, -1, dtype=np.int64)
    for lineno, line in _data_lines(path):
        parts = [p.strip() for p in line.split("\t")]
        if len(parts) != 2 or not all(parts):
            raise ConfigError(f"{path}:{lineno}: expected 'label<TAB>subdomain_id'")
        label, sub = parts
        i = g.index_of(label)
        if home[i] >= 0:
            raise ConfigError(f"{path}:{lineno}: area {label!r} assigned twice")
        home[i] = ids.setdefault(sub, len(ids))
    if np.any(home < 0):
        missing = [g.area_ids[i] for i in np.flatnonzero(home < 0)[:5]]
        raise ConfigError(f"{path}: no subdomain for areas {missing}")
    return home, tuple(ids)


def write_edge_list(g: AreaGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, j in g.edges:
            fh.write(f"{g.area_ids[i]}\t{g.area_ids[j]}\n")


def write_partition(g: AreaGraph, home: np.ndarray, path: str | Path, subdomain_ids: Sequence[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, d in enumerate(home):
            sid = subdomain_ids[d] if subdomain_ids is not None else str(int(d) + 1)
            fh.write(f"{g.area_ids[i]}\t{sid}\n")


# ------------------------------------------------------------------ #
# Synthetic graphs
# ------------------------------------------------------------------ #


def path_graph(n: int, prefix: str = "a") -> AreaGraph:
    edges = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    return AreaGraph(n, edges, tuple(f"{prefix}{i}" for i in range(n)))


def cycle_graph(n: int, prefix: str = "a") -> AreaGraph:
    if n < 3:
        raise GraphError("a cycle needs at least 3 areas")
    edges = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    edges = np.vstack([[0, n - 1], edges])
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    return AreaGraph(n, edges, tuple(f"{prefix}{i}" for i in range(n)))


def lattice_graph(nrow: int, ncol: int) -> AreaGraph:
    """Rook-adjacency lattice; area ``r*ncol + c`` is labelled ``r{r}c{c}``."""
    idx = np.arange(nrow * ncol).reshape(nrow, ncol)
    right = np.column_stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()])
    down = np.column_stack([idx[:-1, :].ravel(), idx[1:, :].ravel()])
    edges = np.vstack([right, down])
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    w = max(len(str(nrow - 1)), len(str(ncol - 1)))
    labels = tuple(f"r{r:0{w}d}c{c:0{w}d}" for r in range(nrow) for c in range(ncol))
    return AreaGraph(nrow * ncol, edges, labels)


def block_partition(nrow: int, ncol: int, brow: int, bcol: int) -> np.ndarray:
    """Home array splitting an ``nrow x ncol`` lattice into ``brow x bcol`` blocks."""
    rb = np.minimum(np.arange(nrow) * brow // nrow, brow - 1)
    cb = np.minimum(np.arange(ncol) * bcol // ncol, bcol - 1)
    return (rb[:, None] * bcol + cb[None, :]).ravel().astype(np.int64)
