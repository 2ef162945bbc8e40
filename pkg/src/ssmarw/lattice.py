"""Finite graph geometry: tori, boxes with an absorbing halo, cycles and paths.

Sites are dense integer ids in coordinate-lexicographic order. Neighbour
lists are stored as a padded ``(n_sites, max_degree)`` array so the numba
kernels can use them directly.
"""
from __future__ import annotations

import itertools
import re
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

SiteSet = frozenset  # sets of site ids; canonical order is ascending id

GRAPH_METRIC = "graph"
INF_METRIC = "inf"


class HaloSiteError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """Finite lattice graph.

    ``kind`` is one of ``torus``, ``box``, ``cycle`` or ``path``. For boxes the
    active region is ``{-L..L}^d`` and the halo holds the sites at graph
    distance one outside it; halo sites are absorbing.
    """

    kind: str
    size: int  # n for torus/cycle/path, L for box
    dim: int
    coords: np.ndarray = field(repr=False)
    nbr: np.ndarray = field(repr=False)
    deg: np.ndarray = field(repr=False)
    halo: np.ndarray = field(repr=False)
    _index: dict = field(repr=False)

    @property
    def n_sites(self) -> int:
        return len(self.coords)

    @property
    def degree(self) -> int:
        """Maximal degree over active sites (uniform on tori, cycles and boxes)."""
        return int(self.deg[~self.halo].max())

    @cached_property
    def active_sites(self) -> SiteSet:
        return SiteSet(np.flatnonzero(~self.halo).tolist())

    @cached_property
    def halo_sites(self) -> SiteSet:
        return SiteSet(np.flatnonzero(self.halo).tolist())

    @cached_property
    def keys(self) -> np.ndarray:
        """Coordinate keys for random draws; equal coordinates give equal keys across graphs."""
        if self.dim > 3:
            raise ValueError("coordinate keys support d <= 3")
        off = (self.coords + (1 << 20)) & ((1 << 21) - 1)
        return (off << (21 * np.arange(self.dim, dtype=np.int64))).sum(axis=1).astype(np.int64)

    @property
    def is_torus(self) -> bool:
        return self.kind in ("torus", "cycle")

    def site(self, coord) -> int:
        if np.isscalar(coord):
            coord = (coord,)
        c = tuple(int(v) for v in coord)
        if self.is_torus:
            c = tuple(v % self.size for v in c)
        try:
            return self._index[c]
        except KeyError:
            raise ValueError(f"coordinate {coord} is not a site of {self}") from None

    def coord(self, x: int) -> tuple:
        return tuple(int(v) for v in self.coords[x])

    def origin(self) -> int:
        return self.site((0,) * self.dim)

    def spec(self) -> str:
        if self.kind == "torus":
            return f"torus:n={self.size},d={self.dim}"
        if self.kind == "box":
            return f"box:L={self.size},d={self.dim}"
        return f"{self.kind}:n={self.size}"

    def __repr__(self) -> str:
        return f"Graph({self.spec()})"

    def mask(self, sites) -> np.ndarray:
        m = np.zeros(self.n_sites, dtype=np.bool_)
        m[list(sites)] = True
        return m


def _build(kind, size, dim, coords, offsets_fn) -> Graph:
    coords = [tuple(c) for c in coords]
    coords.sort()
    index = {c: i for i, c in enumerate(coords)}
    n = len(coords)
    lists = []
    halo = np.zeros(n, dtype=np.bool_)
    for i, c in enumerate(coords):
        nb, is_halo = offsets_fn(c, index)
        halo[i] = is_halo
        lists.append(nb)
    maxdeg = max(len(nb) for nb in lists)
    nbr = np.full((n, maxdeg), -1, dtype=np.int64)
    deg = np.zeros(n, dtype=np.int64)
    for i, nb in enumerate(lists):
        nbr[i, : len(nb)] = nb
        deg[i] = len(nb)
    return Graph(kind, size, dim, np.array(coords, dtype=np.int64).reshape(n, dim),
                 nbr, deg, halo, index)


def _unit_offsets(dim):
    # per dimension: minus then plus
    for k in range(dim):
        for s in (-1, 1):
            off = [0] * dim
            off[k] = s
            yield tuple(off)


def torus(n: int, d: int) -> Graph:
    if n < 3 or d < 1:
        raise ValueError("torus needs n >= 3 and d >= 1")

    def nbrs(c, index):
        return [index[tuple((a + o) % n for a, o in zip(c, off))] for off in _unit_offsets(d)], False

    return _build("torus", n, d, itertools.product(range(n), repeat=d), nbrs)


def cycle(n: int) -> Graph:
    g = torus(n, 1)
    return Graph("cycle", n, 1, g.coords, g.nbr, g.deg, g.halo, g._index)


def path(n: int) -> Graph:
    """Path graph 0 - 1 - ... - n-1 with free ends (end sites have degree one)."""
    if n < 2:
        raise ValueError("path needs n >= 2")

    def nbrs(c, index):
        out = [index[(c[0] + s,)] for s in (-1, 1) if (c[0] + s,) in index]
        return out, False

    return _build("path", n, 1, [(i,) for i in range(n)], nbrs)


def box(L: int, d: int) -> Graph:
    """Box ``{-L..L}^d`` plus a one-site absorbing halo."""
    if L < 0 or d < 1:
        raise ValueError("box needs L >= 0 and d >= 1")
    inner = list(itertools.product(range(-L, L + 1), repeat=d))
    halo_coords = set()
    for c in inner:
        for off in _unit_offsets(d):
            y = tuple(a + o for a, o in zip(c, off))
            if max(abs(v) for v in y) > L:
                halo_coords.add(y)

    def nbrs(c, index):
        is_halo = max(abs(v) for v in c) > L
        out = []
        for off in _unit_offsets(d):
            y = tuple(a + o for a, o in zip(c, off))
            if y not in index:
                continue
            if is_halo and max(abs(v) for v in y) > L:
                continue
            out.append(index[y])
        return out, is_halo

    return _build("box", L, d, inner + sorted(halo_coords), nbrs)


_SPEC_RE = re.compile(r"^(torus|box|cycle|path):(.*)$")


def parse_graph(spec: str) -> Graph:
    """Parse ``torus:n=32,d=2``, ``box:L=50,d=1``, ``cycle:n=100`` or ``path:n=4``."""
    m = _SPEC_RE.match(spec.strip())
    if not m:
        raise ValueError(f"bad graph spec {spec!r}")
    kind, rest = m.groups()
    kw = {}
    for part in filter(None, rest.split(",")):
        k, _, v = part.partition("=")
        kw[k.strip()] = int(v)
    try:
        if kind == "torus":
            return torus(kw["n"], kw.get("d", 2))
        if kind == "box":
            return box(kw["L"], kw.get("d", 1))
        if kind == "cycle":
            return cycle(kw["n"])
        return path(kw["n"])
    except KeyError as e:
        raise ValueError(f"graph spec {spec!r} is missing {e.args[0]}") from None


def neighbors(g: Graph, x: int) -> list[int]:
    if g.halo[x]:
        raise HaloSiteError("absorbing site has no outgoing instructions")
    return g.nbr[x, : g.deg[x]].tolist()


def _require_torus(g: Graph):
    if not g.is_torus:
        raise ValueError(f"{g} is not a torus")


def torus_distance(g: Graph, x: int, y: int) -> int:
    """Infinity-norm distance minimised over lifts to Z^d."""
    _require_torus(g)
    diff = np.abs(g.coords[x] - g.coords[y])
    return int(np.minimum(diff, g.size - diff).max())


def torus_distances(g: Graph, xs, ys) -> np.ndarray:
    """Pairwise torus distance matrix between two site lists."""
    _require_torus(g)
    a = g.coords[np.asarray(list(xs), dtype=np.int64)]
    b = g.coords[np.asarray(list(ys), dtype=np.int64)]
    diff = np.abs(a[:, None, :] - b[None, :, :])
    return np.minimum(diff, g.size - diff).max(axis=2)


def graph_distances(g: Graph, x: int) -> np.ndarray:
    """BFS distances from ``x`` (-1 where unreachable)."""
    dist = np.full(g.n_sites, -1, dtype=np.int64)
    dist[x] = 0
    q = deque([x])
    while q:
        u = q.popleft()
        for v in g.nbr[u, : g.deg[u]]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def ball(g: Graph, x: int, r: int, metric: str = GRAPH_METRIC) -> SiteSet:
    if r < 0:
        raise ValueError("radius must be non-negative")
    if metric == GRAPH_METRIC:
        dist = graph_distances(g, x)
        return SiteSet(np.flatnonzero((dist >= 0) & (dist <= r)).tolist())
    if metric == INF_METRIC:
        _require_torus(g)
        c = g.coords[x]
        rr = min(r, g.size // 2)
        out = set()
        for off in itertools.product(range(-rr, rr + 1), repeat=g.dim):
            out.add(g.site(tuple(c + np.array(off))))
        return SiteSet(out)
    raise ValueError(f"unknown metric {metric!r}")


def r_components(g: Graph, A, r: int) -> list[SiteSet]:
    """Maximal r-connected components of ``A`` under the torus distance.

    Components are returned sorted by their smallest site.
    """
    _require_torus(g)
    if r < 1:
        raise ValueError("r must be >= 1")
    sites = sorted(A)
    if not sites:
        return []
    k = len(sites)
    rows, cols = [], []
    chunk = max(1, 4_000_000 // k)
    for lo in range(0, k, chunk):
        dm = torus_distances(g, sites[lo:lo + chunk], sites)
        i, j = np.nonzero(dm <= r)
        rows.append(i + lo)
        cols.append(j)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    adj = coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(k, k))
    _, labels = connected_components(adj, directed=False)
    groups: dict[int, list[int]] = {}
    for s, lab in zip(sites, labels):
        groups.setdefault(int(lab), []).append(s)
    return sorted((SiteSet(v) for v in groups.values()), key=min)


def diameter(g: Graph, C) -> int:
    sites = sorted(C)
    if not sites:
        raise ValueError("diameter of an empty set")
    if len(sites) == 1:
        return 0
    best = 0
    chunk = max(1, 4_000_000 // len(sites))
    for lo in range(0, len(sites), chunk):
        best = max(best, int(torus_distances(g, sites[lo:lo + chunk], sites).max()))
    return best


def max_distance(g: Graph, C0, C1) -> int:
    """Largest torus distance between a site of ``C0`` and a site of ``C1``."""
    return int(torus_distances(g, sorted(C0), sorted(C1)).max())


def is_connected(g: Graph, A) -> bool:
    """Whether the subgraph induced by ``A`` is connected (the empty set is not)."""
    A = SiteSet(A)
    if not A:
        return False
    start = min(A)
    seen = {start}
    q = deque([start])
    while q:
        u = q.popleft()
        for v in g.nbr[u, : g.deg[u]].tolist():
            if v in A and v not in seen:
                seen.add(v)
                q.append(v)
    return len(seen) == len(A)
