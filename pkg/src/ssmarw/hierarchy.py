"""Dormitory hierarchies on tori with the ping-pong strategy and colored sleep masks.

Clusters are nodes of a binary merge tree. A cluster that is carried to the
next level without merging keeps its node, so ``C_j(x)`` for consecutive
levels can be the same object.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .arwd_engine import SubsetConfig, run_arwd
from .lattice import Graph, SiteSet, diameter, r_components, torus_distances
from .randomness import RandomStream, derive_seed

log = logging.getLogger(__name__)

RHO0 = 1.0 - 1.8 * math.exp(-0.8)  # P(Poisson(4/5) >= 2)


class HierarchyError(ValueError):
    """Invalid or unconstructible hierarchy; ``clause`` names the violated condition."""

    def __init__(self, clause: str, detail: str):
        super().__init__(f"{clause}: {detail}")
        self.clause = clause
        self.detail = detail


def cluster_radius(v: int, mu: float) -> int:
    """``r = 2 floor(sqrt(2v/mu))``, the connectivity radius of level-0 clusters."""
    return 2 * int(math.floor(math.sqrt(2 * v / mu)))


def diameter_budget(j: int, v: int, r: int) -> int:
    """``D_j = 6^j * 12 v r``."""
    return 6**j * 12 * v * r


@dataclass(eq=False)
class Cluster:
    cid: int
    level: int  # level at which the cluster first appears
    sites: SiteSet
    distinguished: int
    children: tuple = ()
    parent: Optional[int] = None
    top: int = 0  # last level at which the cluster is present

    @property
    def merged(self) -> bool:
        return len(self.children) == 2


@dataclass
class Hierarchy:
    graph: Graph
    A: SiteSet
    v: int
    r: int
    clusters: list
    levels: list  # levels[j] = list of cluster ids forming the partition C_j
    D: list = field(default_factory=list)

    @property
    def L(self) -> int:
        return len(self.levels) - 1

    def A_level(self, j: int) -> SiteSet:
        return SiteSet().union(*(self.clusters[c].sites for c in self.levels[j]))

    @property
    def root(self) -> Cluster:
        return self.clusters[self.levels[-1][0]]

    def cluster_of(self, x: int, j: int) -> Optional[Cluster]:
        """``C_j(x)``; None stands for the empty set."""
        if j < 0 or j > self.L:
            return None
        cid = int(self._membership[j][x])
        return None if cid < 0 else self.clusters[cid]

    def is_distinguished(self, x: int, j: int) -> bool:
        c = self.cluster_of(x, j)
        return c is not None and c.distinguished == x

    def distinguished_top(self, x: int) -> int:
        """Highest level at which ``x`` is distinguished, -1 if none."""
        return int(self._dist_top[x])

    def __post_init__(self):
        n = self.graph.n_sites
        self._membership = []
        for j, ids in enumerate(self.levels):
            m = np.full(n, -1, dtype=np.int64)
            for cid in ids:
                m[list(self.clusters[cid].sites)] = cid
            self._membership.append(m)
        self._dist_top = np.full(n, -1, dtype=np.int64)
        for j in range(len(self.levels)):
            for cid in self.levels[j]:
                x = self.clusters[cid].distinguished
                if self._dist_top[x] == j - 1:
                    self._dist_top[x] = j

    def to_json(self) -> str:
        rows = [{"level": c.level, "cluster_id": c.cid, "sites": sorted(c.sites),
                 "distinguished": c.distinguished, "parent": c.parent}
                for c in self.clusters]
        return json.dumps({"v": self.v, "r": self.r, "L": self.L, "clusters": rows})


def _new_cluster(clusters, level, sites, xstar, children=()):
    c = Cluster(len(clusters), level, SiteSet(sites), int(xstar), tuple(children), top=level)
    clusters.append(c)
    for ch in children:
        clusters[ch].parent = c.cid
    return c.cid


def _merge_distinguished(c0: Cluster, c1: Cluster) -> int:
    if len(c0.sites) != len(c1.sites):
        return (c0 if len(c0.sites) > len(c1.sites) else c1).distinguished
    return (c0 if sorted(c0.sites) < sorted(c1.sites) else c1).distinguished


def build_hierarchy(g: Graph, A, v: int, mu: float, validate: bool = True) -> Hierarchy:
    """Greedy dormitory hierarchy on ``A``.

    Level 0 holds the r-connected components of size at least ``v``. At each
    level the disjoint pairs with the smallest union diameter are merged while
    that diameter stays within ``D_j``; unmatched clusters move up when they
    are large enough for the next level and are dropped otherwise.
    """
    if not g.is_torus:
        raise ValueError("hierarchies are built on tori")
    A = SiteSet(A)
    r = cluster_radius(v, mu)
    if r < 1:
        raise ValueError("mu too large for v: r = 0")
    if g.size < r + 1:
        raise HierarchyError("precondition", f"n = {g.size} < r + 1 = {r + 1}")
    if len(A) < mu * g.n_sites:
        raise HierarchyError("precondition", f"|A| = {len(A)} < mu n^d = {mu * g.n_sites:g}")
    clusters: list = []
    level0 = [_new_cluster(clusters, 0, C, min(C)) for C in r_components(g, A, r) if len(C) >= v]
    if not level0:
        raise HierarchyError("(i)", "no r-connected component reaches size v")
    levels = [level0]
    D = [diameter_budget(0, v, r)]
    while len(levels[-1]) > 1:
        j = len(levels) - 1
        cur = levels[-1]
        Dj = diameter_budget(j, v, r)
        pairs = []
        for a in range(len(cur)):
            for b in range(a + 1, len(cur)):
                ca, cb = clusters[cur[a]], clusters[cur[b]]
                d = max(diameter(g, ca.sites), diameter(g, cb.sites),
                        int(torus_distances(g, sorted(ca.sites), sorted(cb.sites)).max()))
                if d <= Dj:
                    pairs.append((d, min(ca.sites), min(cb.sites), a, b))
        pairs.sort()
        used: set = set()
        nxt = []
        for _, _, _, a, b in pairs:
            if a in used or b in used:
                continue
            used.update((a, b))
            c0, c1 = clusters[cur[a]], clusters[cur[b]]
            nxt.append(_new_cluster(clusters, j + 1, c0.sites | c1.sites,
                                    _merge_distinguished(c0, c1), (c0.cid, c1.cid)))
        need = 2 ** ((j + 1) // 2) * v
        for a, cid in enumerate(cur):
            if a not in used and len(clusters[cid].sites) >= need:
                clusters[cid].top = j + 1
                nxt.append(cid)
        if not nxt:
            raise HierarchyError("(iii)", f"every cluster was dropped at level {j + 1}")
        nxt.sort(key=lambda c: min(clusters[c].sites))
        levels.append(nxt)
        D.append(Dj)
        if len(levels) > 64:
            raise HierarchyError("(iii)", "merging does not converge")
    h = Hierarchy(g, A, v, r, clusters, levels, D)
    if validate:
        validate_hierarchy(h, mu)
    return h


def build_trivial_hierarchy(g: Graph, A) -> Hierarchy:
    """One level with the single cluster ``A``."""
    A = SiteSet(A)
    if not A:
        raise ValueError("empty settling set")
    clusters: list = []
    cid = _new_cluster(clusters, 0, A, min(A))
    return Hierarchy(g, A, len(A), 0, clusters, [[cid]], [])


def validate_hierarchy(h: Hierarchy, mu: Optional[float] = None) -> None:
    """Independent check of the hierarchy conditions; raises HierarchyError on the first failure."""
    g, v = h.graph, h.v
    prev: Optional[SiteSet] = None
    for j, ids in enumerate(h.levels):
        parts = [h.clusters[c].sites for c in ids]
        Aj = SiteSet().union(*parts) if parts else SiteSet()
        if sum(len(p) for p in parts) != len(Aj):
            raise HierarchyError("partition", f"clusters at level {j} overlap")
        if not Aj <= (h.A if prev is None else prev):
            raise HierarchyError("nesting", f"A_{j} is not contained in the level below")
        for c in ids:
            if len(h.clusters[c].sites) < 2 ** (j // 2) * v:
                raise HierarchyError("(i)", f"cluster {c} at level {j} is too small")
        if j > 0:
            below = set(h.levels[j - 1])
            for c in ids:
                if c in below:
                    continue
                C = h.clusters[c]
                if not C.merged or any(ch not in below for ch in C.children):
                    raise HierarchyError("(ii)", f"cluster {c} at level {j} is not a union of two level-{j - 1} clusters")
                c0, c1 = (h.clusters[ch] for ch in C.children)
                if c0.sites | c1.sites != C.sites:
                    raise HierarchyError("(ii)", f"cluster {c} differs from the union of its children")
                if diameter(g, C.sites) > diameter_budget(j - 1, v, h.r):
                    raise HierarchyError("(ii)", f"cluster {c} exceeds D_{j - 1}")
                big = max((c0, c1), key=lambda k: len(k.sites))
                if C.distinguished not in (c0.distinguished, c1.distinguished) or (
                        len(c0.sites) != len(c1.sites) and C.distinguished != big.distinguished):
                    raise HierarchyError("distinguished", f"cluster {c} does not inherit from its larger child")
        prev = Aj
    if len(h.levels[-1]) != 1:
        raise HierarchyError("(iii)", "top level has more than one cluster")
    if 4 * len(h.A_level(h.L)) < len(h.A):
        raise HierarchyError("|A_L| >= |A|/4", f"|A_L| = {len(h.A_level(h.L))}, |A| = {len(h.A)}")
    if h.r >= 1:
        for c in h.levels[0]:
            C = h.clusters[c]
            if len(r_components(g, C.sites, h.r)) != 1:
                raise HierarchyError("r-connected", f"level-0 cluster {c} is not r-connected")
            if C.distinguished != min(C.sites):
                raise HierarchyError("distinguished", f"level-0 cluster {c} is not led by its minimum")


# ---------------------------------------------------------------------------
# toppling procedures and the ping-pong strategy


class TopplingProcedure:
    """``p_C``: the distinguished site if active, else the active site with most sleepers nearby.

    The neighbourhood is the infinity-norm ball of radius ``16 v r``. With
    ``beta`` set, choices that miss the density goal ``(1 - beta) v`` while
    ``0 < |U| <= beta |C|`` are logged and counted in ``violations``.
    """

    def __init__(self, g: Graph, C: Cluster, v: int, r: int, beta: Optional[float] = None):
        self.g = g
        self.C = C
        self.sites = np.array(sorted(C.sites), dtype=np.int64)
        self.radius = 16 * v * r
        self.v = v
        self.beta = beta
        self.violations = 0
        self._dist = None
        if self.radius < g.size // 2:
            self._dist = torus_distances(g, self.sites, self.sites) <= self.radius

    def scores(self, active: np.ndarray) -> np.ndarray:
        """Sleepers of C within the ball around each site of C (``active`` is a mask on C)."""
        sleepers = ~active
        if self._dist is None:
            return np.full(len(self.sites), int(sleepers.sum()))
        return self._dist[:, sleepers].sum(axis=1)

    def __call__(self, active: np.ndarray) -> int:
        if not active.any():
            raise ValueError("toppling procedure needs a non-empty active set")
        xstar = self.C.distinguished
        idx = np.flatnonzero(active)
        if xstar in set(self.sites[idx].tolist()):
            return xstar
        sc = self.scores(active)[idx]
        best = int(idx[int(np.argmax(sc))])  # argmax keeps the first, i.e. smallest site
        if self.beta is not None and len(idx) <= self.beta * len(self.sites):
            if sc.max() < (1 - self.beta) * self.v:
                self.violations += 1
                log.debug("density goal missed in cluster %d: %d < %.2f", self.C.cid,
                          int(sc.max()), (1 - self.beta) * self.v)
        return int(self.sites[best])


def toppling_procedure_pC(g: Graph, C: Cluster, U, v: int, r: int, beta=None) -> int:
    """One-shot ``p_C(U)`` for a set ``U`` of active sites of ``C``."""
    U = SiteSet(U)
    if not U:
        raise ValueError("U must be non-empty")
    if not U <= C.sites:
        raise ValueError("U must lie in C")
    proc = TopplingProcedure(g, C, v, r, beta)
    return proc(np.array([x in U for x in proc.sites]))


class PingPong:
    """Incremental ping-pong strategy ``f`` and colored sleep mask ``g^j`` for one run.

    ``observe(U)`` must be called with ``U_t`` for t = 0, 1, ... in order;
    ``choose()`` then returns ``f(U_0..U_t)`` and ``mask(x)`` the set
    ``g^j(U_0..U_t)`` for the color of step t.
    """

    def __init__(self, h: Hierarchy, colors: Optional["ColorSequence"] = None,
                 beta: Optional[float] = None):
        self.h = h
        self.colors = colors
        n = h.graph.n_sites
        self.active = np.zeros(n, dtype=np.bool_)
        self.count = {c.cid: 0 for c in h.clusters}
        self.last_empty = {c.cid: -math.inf for c in h.clusters}
        self.ever_empty = {c.cid: False for c in h.clusters}
        self.chain = [[] for _ in range(n)]  # clusters containing each site, any level
        for c in h.clusters:
            for x in c.sites:
                self.chain[x].append(c.cid)
        self.procs = {cid: TopplingProcedure(h.graph, h.clusters[cid], h.v, h.r, beta)
                      for cid in h.levels[0]}
        self.t = -1

    def observe(self, U) -> None:
        new = np.zeros_like(self.active)
        new[list(U)] = True
        self.t += 1
        changed = np.flatnonzero(new != self.active).tolist()
        before = {}
        for x in changed:
            for cid in self.chain[x]:
                before.setdefault(cid, self.count[cid])
                self.count[cid] += 1 if new[x] else -1
        self.active = new
        for cid, old in before.items():
            if old == 0 and self.count[cid] > 0 and self.t > 0:
                self.last_empty[cid] = self.t - 1
        for cid, k in self.count.items():
            if k == 0:
                self.ever_empty[cid] = True

    def T(self, cid: int) -> float:
        return self.t if self.count[cid] == 0 else self.last_empty[cid]

    def choose(self) -> Optional[int]:
        c = self.h.root
        while c.merged:
            c0, c1 = c.children
            c = self.h.clusters[c0 if self.T(c0) <= self.T(c1) else c1]
        if self.count[c.cid] == 0:
            return None
        proc = self.procs[c.cid]
        return proc(self.active[proc.sites])

    def mask(self, x: int, j: int) -> SiteSet:
        case = mask_case(self.h, x, j, self.ever_empty)
        if case in (1, 3):
            return SiteSet()
        if case == 2:
            up, cur = self.h.cluster_of(x, j + 1), self.h.cluster_of(x, j)
            return SiteSet() if up is None else up.sites - cur.sites
        return self.h.cluster_of(x, 0).sites


def mask_case(h: Hierarchy, x: int, j: int, ever_empty: dict) -> int:
    """Which of the four sleep-mask cases applies to ``(x, j)``; asserts exactly one does."""
    def dist(level):
        return h.is_distinguished(x, level)

    cj = h.cluster_of(x, j)
    p1 = dist(j + 1) and cj is not None and not ever_empty[cj.cid]
    hits = [p1, (not p1) and dist(j), dist(0) and not dist(j), not dist(0)]
    if sum(hits) != 1:
        raise AssertionError(f"sleep mask cases overlap or miss for x={x}, j={j}")
    return hits.index(True) + 1


def literal_T(history: list, C: SiteSet) -> float:
    """``sup{s <= t : U_s and C disjoint}`` over an explicit history of active sets."""
    for s in range(len(history) - 1, -1, -1):
        if not (history[s] & C):
            return s
    return -math.inf


def literal_f(h: Hierarchy, history: list, procs: dict) -> Optional[int]:
    """The strategy evaluated from its definition by scanning the whole history."""
    c = h.root
    while c.merged:
        c0, c1 = (h.clusters[k] for k in c.children)
        c = c0 if literal_T(history, c0.sites) <= literal_T(history, c1.sites) else c1
    U = history[-1] & c.sites
    if not U:
        return None
    proc = procs[c.cid]
    return proc(np.array([x in U for x in proc.sites]))


class ColorSequence:
    """Colors ``j_t`` with ``1 + j_t`` geometric(1/2), drawn lazily and memoised."""

    def __init__(self, seed: int):
        self.stream = RandomStream(derive_seed(seed, "colors"))
        self._values: list = []

    def __getitem__(self, t: int) -> int:
        while len(self._values) <= t:
            self._values.append(self.stream.geometric(0.5) - 1)
        return self._values[t]


def sleep_mask_g(h: Hierarchy, colors: ColorSequence, dynamics: PingPong):
    """Mask callable ``(cfg, t, x) -> W`` for ``run_arwd`` backed by ``dynamics``."""
    def g(cfg, t, x):
        return dynamics.mask(x, colors[t])
    return g


def strategy_f(h: Hierarchy, beta: Optional[float] = None):
    """ARWD strategy callable ``(cfg, t) -> site`` plus its bookkeeping object."""
    dyn = PingPong(h, beta=beta)
    A_idx = np.array(sorted(h.A), dtype=np.int64)

    def f(cfg, t):
        dyn.observe(A_idx[cfg[A_idx] == 1].tolist())
        return dyn.choose()
    return f, dyn


@dataclass
class HierarchyRun:
    T: int
    hstar: int  # steps performed by the distinguished particle of the top cluster
    status: str
    violations: int


def run_hierarchy_arwd(h: Hierarchy, lam: float, U0, seed: int, cap: int = 10**6,
                       beta: Optional[float] = None) -> HierarchyRun:
    """ARWD on ``A_L`` with the ping-pong strategy and colored sleep mask."""
    AL = h.A_level(h.L)
    f, dyn = strategy_f(h, beta)
    colors = ColorSequence(seed)
    cfg0 = SubsetConfig(SiteSet(U0) & AL, AL).to_config(h.graph)
    run = run_arwd(h.graph, AL, lam, f, cfg0, seed, cap=cap, mask=sleep_mask_g(h, colors, dyn))
    xstar = h.root.distinguished
    return HierarchyRun(run.T, run.hstar.get(xstar, 0), run.status,
                        sum(p.violations for p in dyn.procs.values()))


# ---------------------------------------------------------------------------
# parameter pack


def potential_kernel_2d(radius: float) -> float:
    """Asymptotic planar potential kernel, normalised so ``a(e1) = 1``."""
    gamma = 0.5772156649015329
    return (2 / math.pi) * math.log(radius) + (2 * gamma + math.log(8)) / math.pi


def upsilon_bound(d: int, r: int) -> float:
    """Value used for ``Upsilon_d(r)`` in the feasibility report.

    Exact for d = 1. For d = 2 it is the infinite-lattice value
    ``1 / (2 a(x))`` at the farthest point of the infinity-norm ball, with the
    potential kernel replaced by its asymptotic expansion.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    if d == 1:
        return 1.0 / (2 * r)
    if d == 2:
        return 1.0 / (2 * potential_kernel_2d(r * math.sqrt(2)))
    raise ValueError("only d in {1, 2} is supported")


@dataclass
class ParameterPack:
    v: int
    mu: float
    lam: float
    pbar: float = 0.1
    d: int = 2

    @property
    def rho0(self) -> float:
        return RHO0

    @property
    def beta(self) -> float:
        return RHO0 / 2

    @property
    def r(self) -> int:
        return cluster_radius(self.v, self.mu)

    def D(self, j: int) -> int:
        return diameter_budget(j, self.v, self.r)

    def alpha(self, j: int) -> float:
        return (1 + 2 ** (-j / 4)) / (2 * math.sqrt(self.v))

    @property
    def p(self) -> float:
        return min(self.pbar, math.sqrt(self.mu) / 384, 1 / (2 * (1 + self.lam)))

    def p_j(self, j: int) -> float:
        return self.p / (6**j * self.v**1.5)

    def feasibility(self, levels: int) -> list:
        """Per-level evaluation of the two step conditions (reported, never enforced)."""
        rows = []
        for j in range(levels + 1):
            pj, aj, Dj = self.p_j(j), self.alpha(j), self.D(j)
            cap_pj = min(self.pbar, 1 / (2 ** (j + 1) * (1 + self.lam)),
                         (32 * aj * (Dj + 1) ** self.d) ** -0.5)
            lhs = 2 ** (j / 2 + 2) * self.v
            log_rhs = (6 * math.log(pj) + math.log(upsilon_bound(self.d, Dj))
                       + (aj - self.alpha(j + 1)) * 2 ** (j / 2) * self.v)
            rows.append({"j": j, "p_j": pj, "p_j_cap": cap_pj, "p_j_ok": pj <= cap_pj,
                         "growth_lhs": lhs, "growth_log_rhs": log_rhs,
                         "growth_ok": math.log(lhs) <= log_rhs})
        return rows

    def to_dict(self, levels: int = 0) -> dict:
        return {"v": self.v, "mu": self.mu, "lambda": self.lam, "pbar": self.pbar,
                "r": self.r, "beta": self.beta, "rho0": self.rho0, "p": self.p,
                "D": [self.D(j) for j in range(levels + 1)],
                "alpha": [self.alpha(j) for j in range(levels + 1)],
                "feasibility": self.feasibility(levels)}


def random_settling_set(g: Graph, mu: float, stream: RandomStream, kind: str = "uniform",
                        r: int = 1) -> SiteSet:
    """Random ``A`` with ``|A| >= mu n^d``: uniform sites, stripes or blobs with gaps wider than ``r``."""
    n = g.size
    target = math.ceil(mu * g.n_sites)
    coords = g.coords
    if kind == "uniform":
        keys = np.array([stream.uniform01() for _ in range(g.n_sites)])
        return SiteSet(np.argsort(keys)[:target].tolist())
    if kind == "stripes":
        # k stripes separated by gaps of r + 1 columns; keep the gaps empty when
        # the density allows it
        gap = r + 1
        options = [k for k in range(2, 7) if n - k * gap >= k and (n - k * gap) // k * k * n >= target]
        k = options[int(stream.uniform01() * len(options))] if options else 2
        width = max(1, (n - k * gap) // k)
        period = width + gap
        keep = ((coords[:, 0] % period) < width) & (coords[:, 0] < k * period)
    elif kind == "blobs":
        side = max(2, int(n * (0.3 + 0.3 * stream.uniform01())))
        step = side + r + 1
        keep = ((coords[:, 0] % step) < side) & ((coords[:, 1] % step) < side)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    base = set(np.flatnonzero(keep).tolist())
    rest = [x for x in np.argsort([stream.uniform01() for _ in range(g.n_sites)]).tolist()
            if x not in base]
    out = sorted(base)
    out += rest[: max(0, target - len(out))]
    return SiteSet(out)

