"""Stochastic sandpile dynamics in the Diaconis-Fulton representation.

Odometers are stored doubled (``h2 = 2h``) so a half-toppling adds one and a
full toppling adds two. Instruction ``j`` at ``x`` is consumed by the
half-toppling that raises ``h2[x]`` from ``j - 1`` to ``j``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numba as nb
import numpy as np

from .lattice import Graph, HaloSiteError, SiteSet, ball
from .randomness import (InstructionField, RandomStream, TruncatedField,
                         instruction_index, poisson_inv, to_u64, uniform01)

FULL, HALF, ASTAB, WEAK = 0, 1, 2, 3
_MODE_CODES = {"full": FULL, "half": HALF, "a_stab": ASTAB, "weak": WEAK}
POLICIES = {"lexicographic": 0, "random": 1, "stack": 2}

STABLE = "stable"
CAPPED = "capped"


class InadmissibleToppling(ValueError):
    pass


@dataclass(frozen=True)
class StabilityMode:
    kind: str
    A: Optional[SiteSet] = None
    x0: Optional[int] = None

    @classmethod
    def full(cls):
        return cls("full")

    @classmethod
    def half(cls):
        return cls("half")

    @classmethod
    def a_stab(cls, A):
        return cls("a_stab", A=SiteSet(A))

    @classmethod
    def weak(cls, x0: int):
        return cls("weak", x0=int(x0))

    @property
    def code(self) -> int:
        return _MODE_CODES[self.kind]

    @property
    def half_steps(self) -> int:
        """Half-topplings per elementary action of the mode."""
        return 2 if self.kind in ("full", "weak") else 1


@dataclass
class SsmState:
    eta: np.ndarray
    h2: np.ndarray

    @classmethod
    def from_counts(cls, eta, h2=None) -> "SsmState":
        eta = np.asarray(eta, dtype=np.int64).copy()
        h2 = np.zeros_like(eta) if h2 is None else np.asarray(h2, dtype=np.int64).copy()
        return cls(eta, h2)

    def copy(self) -> "SsmState":
        return SsmState(self.eta.copy(), self.h2.copy())

    @property
    def total(self) -> int:
        return int(self.eta.sum())

    def to_json(self) -> str:
        return json.dumps({"sites": len(self.eta), "eta": self.eta.tolist(), "h2": self.h2.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "SsmState":
        d = json.loads(text)
        if len(d["eta"]) != d["sites"] or len(d["h2"]) != d["sites"]:
            raise ValueError("state dump has inconsistent lengths")
        return cls.from_counts(d["eta"], d["h2"])


@dataclass
class StabilizeResult:
    state: SsmState
    odometer: np.ndarray  # half-topplings performed per site
    status: str
    ix_visited: bool = False  # weak mode: I_x0 was occupied at some point
    trace: Optional[list] = None

    @property
    def total(self) -> int:
        return int(self.odometer.sum())


def interaction_set(g: Graph, x: int) -> SiteSet:
    """``I_x``: sites at graph distance at most one from ``x``."""
    return ball(g, x, 1)


def is_unstable(s: SsmState, x: int, mode: StabilityMode, g: Optional[Graph] = None) -> bool:
    """Whether ``x`` may be toppled under ``mode`` (weak mode ignores the I_x side condition)."""
    if g is not None and g.halo[x]:
        raise HaloSiteError("absorbing site has no outgoing instructions")
    e = int(s.eta[x])
    odd = bool(s.h2[x] & 1)
    if mode.kind in ("full", "weak"):
        return e >= 2
    if mode.kind == "half":
        return e >= 2 or (e == 1 and odd)
    if mode.kind == "a_stab":
        if x in mode.A:
            return e >= 2 or (e == 1 and odd)
        return e >= 1
    raise ValueError(f"unknown mode {mode.kind}")


def half_topple(s: SsmState, g: Graph, x: int, fld) -> SsmState:
    """Send one particle from ``x`` along its next instruction (in place)."""
    if g.halo[x]:
        raise HaloSiteError("absorbing site has no outgoing instructions")
    if s.eta[x] < 1:
        raise InadmissibleToppling("inadmissible half-toppling")
    y = fld.instruction(g, x, int(s.h2[x]) + 1)
    s.eta[x] -= 1
    s.eta[y] += 1
    s.h2[x] += 1
    return s


def topple(s: SsmState, g: Graph, x: int, fld) -> SsmState:
    """Full toppling: two half-topplings, legal only on an unstable site."""
    if s.eta[x] < 2:
        raise InadmissibleToppling("illegal toppling of a stable site")
    half_topple(s, g, x, fld)
    return half_topple(s, g, x, fld)


# ---------------------------------------------------------------------------
# numba kernel


@nb.njit(cache=True, nogil=True, inline="always")
def _toppleable(x, eta, h2, in_vp, in_a, in_ix, ix_sites, mode):
    if not in_vp[x]:
        return False
    e = eta[x]
    if mode == 0:
        return e >= 2
    if mode == 1:
        return e >= 2 or (e == 1 and (h2[x] & 1) == 1)
    if mode == 2:
        if in_a[x]:
            return e >= 2 or (e == 1 and (h2[x] & 1) == 1)
        return e >= 1
    # weak
    if e >= 3:
        return True
    if e < 2:
        return False
    if not in_ix[x]:
        return True
    for z in ix_sites:
        if z != x and eta[z] >= 1:
            return True
    return False


@nb.njit(cache=True, nogil=True)
def stabilize_kernel(nbr, deg, keys, eta, h2, in_vp, in_a, in_ix, ix_sites, mode, policy,
                     field_seed, policy_seed, cap):
    """Drive ``eta``/``h2`` (in place) to a mode-stable state inside ``in_vp``.

    Returns ``(status, half_topplings, ix_visited)``; status 0 = stable, 1 = capped.
    """
    n = eta.shape[0]
    steps = 2 if (mode == 0 or mode == 3) else 1
    work = np.empty(n, dtype=np.int64)
    inlist = np.zeros(n, dtype=np.bool_)
    size = 0
    for x in range(n):
        if in_vp[x]:
            work[size] = x
            inlist[x] = True
            size += 1
    ix_visited = False
    for z in ix_sites:
        if eta[z] >= 1:
            ix_visited = True
    count = 0
    draws = 0
    while True:
        x = -1
        if policy == 0:
            for i in range(n):
                if _toppleable(i, eta, h2, in_vp, in_a, in_ix, ix_sites, mode):
                    x = i
                    break
            if x < 0:
                return 0, count, ix_visited
        elif policy == 1:
            while size > 0:
                u = uniform01(policy_seed, 0, draws)
                draws += 1
                k = int(u * size)
                cand = work[k]
                if _toppleable(cand, eta, h2, in_vp, in_a, in_ix, ix_sites, mode):
                    x = cand
                    break
                size -= 1
                work[k] = work[size]
                inlist[cand] = False
            if x < 0:
                return 0, count, ix_visited
        else:
            while size > 0:
                size -= 1
                cand = work[size]
                inlist[cand] = False
                if _toppleable(cand, eta, h2, in_vp, in_a, in_ix, ix_sites, mode):
                    x = cand
                    break
            if x < 0:
                return 0, count, ix_visited
            work[size] = x
            inlist[x] = True
            size += 1
        if count + steps > cap:
            return 1, count, ix_visited
        touched_ix = in_ix[x]
        for _ in range(steps):
            j = h2[x] + 1
            k = instruction_index(field_seed, keys[x], j, deg[x])
            y = nbr[x, k]
            eta[x] -= 1
            eta[y] += 1
            h2[x] += 1
            count += 1
            if in_ix[y]:
                ix_visited = True
                touched_ix = True
            if in_vp[y] and not inlist[y]:
                work[size] = y
                inlist[y] = True
                size += 1
        if mode == 3 and touched_ix:
            for z in ix_sites:
                if in_vp[z] and not inlist[z]:
                    work[size] = z
                    inlist[z] = True
                    size += 1


# ---------------------------------------------------------------------------
# drivers


def _masks(g: Graph, Vp, mode: StabilityMode):
    if Vp is None:
        Vp = g.active_sites
    if any(g.halo[x] for x in Vp):
        raise HaloSiteError("absorbing site has no outgoing instructions")
    in_vp = g.mask(Vp)
    in_a = g.mask(mode.A) if mode.A is not None else np.zeros(g.n_sites, dtype=np.bool_)
    if mode.kind == "weak":
        if mode.x0 not in Vp:
            raise ValueError("weak stabilisation centre must lie in V'")
        ix = sorted(interaction_set(g, mode.x0))
    else:
        ix = []
    ix_sites = np.array(ix, dtype=np.int64)
    in_ix = g.mask(ix)
    return Vp, in_vp, in_a, in_ix, ix_sites


def stabilize(g: Graph, s: SsmState, Vp=None, mode: StabilityMode = StabilityMode.full(),
              fld=None, policy: str = "stack", cap: int = 10**7, seed: int = 0,
              trace: bool = False, engine: str = "auto") -> StabilizeResult:
    """Stabilise ``s`` inside ``Vp`` under ``mode`` using instructions from ``fld``.

    ``policy`` picks the next unstable site: ``lexicographic`` (smallest id),
    ``random`` (uniform, driven by ``seed``) or ``stack`` (LIFO worklist). The
    input state is not modified. Hash fields run through the numba kernel;
    truncated fields, ``trace=True`` or ``engine='python'`` use the reference
    loop.
    """
    if cap <= 0:
        raise ValueError("cap must be positive")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    fld = fld if fld is not None else InstructionField(0)
    Vp, in_vp, in_a, in_ix, ix_sites = _masks(g, Vp, mode)
    out = s.copy()
    use_kernel = isinstance(fld, InstructionField) and not trace and engine != "python"
    if use_kernel:
        status, _, visited = stabilize_kernel(
            g.nbr, g.deg, g.keys, out.eta, out.h2, in_vp, in_a, in_ix, ix_sites, mode.code,
            POLICIES[policy], np.uint64(to_u64(fld.seed)), np.uint64(to_u64(seed)), cap)
        return StabilizeResult(out, out.h2 - s.h2, CAPPED if status else STABLE, bool(visited))
    return _stabilize_python(g, s, out, in_vp, mode, ix_sites, fld, policy, cap, seed, trace)


def _weak_toppleable(s: SsmState, x: int, ix: SiteSet) -> bool:
    e = int(s.eta[x])
    if e >= 3:
        return True
    if e < 2:
        return False
    if x not in ix:
        return True
    return any(s.eta[z] >= 1 for z in ix if z != x)


def _stabilize_python(g, s0, s, in_vp, mode, ix_sites, fld, policy, cap, seed, trace):
    ix = SiteSet(ix_sites.tolist())
    vp = np.flatnonzero(in_vp).tolist()
    rng = RandomStream(seed)
    log = [] if trace else None
    visited = any(s.eta[z] >= 1 for z in ix)
    count = 0
    stack = list(vp)

    def ok(x):
        if mode.kind == "weak":
            return _weak_toppleable(s, x, ix)
        return is_unstable(s, x, mode)

    while True:
        if policy == "lexicographic":
            x = next((v for v in vp if ok(v)), None)
        elif policy == "random":
            cands = [v for v in vp if ok(v)]
            x = cands[int(rng.uniform01() * len(cands))] if cands else None
        else:
            x = None
            while stack:
                v = stack.pop()
                if ok(v):
                    x = v
                    break
        if x is None:
            break
        if count + mode.half_steps > cap:
            return StabilizeResult(s, s.h2 - s0.h2, CAPPED, visited, log)
        for _ in range(mode.half_steps):
            y = fld.instruction(g, x, int(s.h2[x]) + 1)
            half_topple(s, g, x, fld)
            count += 1
            if log is not None:
                log.append(x)
            if y in ix:
                visited = True
            if policy == "stack" and in_vp[y]:
                stack.append(y)
        if policy == "stack":
            stack.append(x)
            if mode.kind == "weak" and (x in ix or any(s.eta[z] for z in ix)):
                stack.extend(z for z in ix if in_vp[z])
    return StabilizeResult(s, s.h2 - s0.h2, STABLE, visited, log)


def is_stable_config(g: Graph, s: SsmState, Vp, mode: StabilityMode) -> bool:
    if mode.kind == "weak":
        ix = interaction_set(g, mode.x0)
        return not any(_weak_toppleable(s, x, ix) for x in Vp)
    return not any(is_unstable(s, x, mode) for x in Vp)


# ---------------------------------------------------------------------------
# abelian property


@dataclass
class AbelianReport:
    consistent: bool
    trials: int
    distinct_outcomes: int
    capped: int
    outcomes: list = field(default_factory=list, repr=False)

    @property
    def conclusive(self) -> bool:
        return self.capped == 0


def abelian_probe(g: Graph, s: SsmState, Vp, mode: StabilityMode, fld, trials: int,
                  seed: int = 0, cap: int = 10**6) -> AbelianReport:
    """Stabilise with ``trials`` random selection orders on one field; compare outcomes."""
    if mode.kind == "weak":
        raise ValueError("mode unsupported: weak stabilisation is not abelian-tested")
    outcomes = set()
    capped = 0
    for t in range(trials):
        res = stabilize(g, s, Vp, mode, fld, policy="random", cap=cap, seed=seed + 7919 * t)
        if res.status == CAPPED:
            capped += 1
            continue
        outcomes.add((res.state.eta.tobytes(), res.odometer.tobytes()))
    return AbelianReport(len(outcomes) <= 1, trials, len(outcomes), capped, sorted(outcomes))


def enumerate_orders(g: Graph, s: SsmState, Vp, mode: StabilityMode, fld,
                     max_states: int = 200_000):
    """Every legal toppling order explored through a memoised sequence tree.

    Returns ``(tree_nodes, outcomes)`` where ``tree_nodes`` is the exact size
    of the (unmemoised) sequence tree and ``outcomes`` the set of distinct
    ``(eta, odometer)`` end results over all complete orders; ``None`` when the
    number of distinct intermediate states exceeds ``max_states``.
    """
    if mode.kind == "weak":
        raise ValueError("mode unsupported: weak stabilisation is not abelian-tested")
    Vp = sorted(g.active_sites if Vp is None else Vp)
    h0 = s.h2.copy()
    memo: dict = {}

    def visit(state: SsmState):
        key = (state.eta.tobytes(), state.h2.tobytes())
        if key in memo:
            return memo[key]
        if len(memo) >= max_states:
            raise _Budget
        moves = [x for x in Vp if is_unstable(state, x, mode)]
        if not moves:
            result = (1, frozenset({(state.eta.tobytes(), (state.h2 - h0).tobytes())}))
        else:
            nodes = 1
            outs = set()
            for x in moves:
                child = state.copy()
                for _ in range(mode.half_steps):
                    half_topple(child, g, x, fld)
                n_child, o_child = visit(child)
                nodes += n_child
                outs |= o_child
            result = (nodes, frozenset(outs))
        memo[key] = result
        return result

    try:
        return visit(s.copy())
    except _Budget:
        return None


class _Budget(Exception):
    pass


# ---------------------------------------------------------------------------
# initial configurations


@nb.njit(cache=True, nogil=True)
def _poisson_fill(eta, sites, keys, mu, seed):
    for i in range(sites.shape[0]):
        eta[sites[i]] = poisson_inv(uniform01(seed, 1, keys[sites[i]]), mu)


def poisson_init(g: Graph, mu: float, stream: RandomStream) -> SsmState:
    """I.i.d. Poisson(mu) particles on every active site, zero odometer.

    One stream draw seeds a per-coordinate uniform, and counts come from
    inversion, so for a fixed stream state the configurations are pointwise
    increasing in ``mu`` and agree on common coordinates across box sizes.
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    base = np.uint64(to_u64(int(stream.uniform01() * 2.0**53)))
    sites = np.flatnonzero(~g.halo).astype(np.int64)
    eta = np.zeros(g.n_sites, dtype=np.int64)
    _poisson_fill(eta, sites, g.keys, float(mu), base)
    return SsmState.from_counts(eta)


# ---------------------------------------------------------------------------
# certain non-termination


def two_colouring(g: Graph) -> Optional[np.ndarray]:
    """Proper 2-colouring of the active sites, or None if the graph is not bipartite."""
    col = np.full(g.n_sites, -1, dtype=np.int64)
    for root in range(g.n_sites):
        if col[root] >= 0 or g.halo[root]:
            continue
        col[root] = 0
        queue = [root]
        while queue:
            x = queue.pop()
            for y in g.nbr[x, : g.deg[x]].tolist():
                if g.halo[y]:
                    continue
                if col[y] < 0:
                    col[y] = 1 - col[x]
                    queue.append(y)
                elif col[y] == col[x]:
                    return None
    return col


def astab_never_terminates(g: Graph, s: SsmState, A) -> bool:
    """True when A-stabilising ``s`` on a graph without sinks surely never ends.

    Mass is conserved, so more than ``|A|`` particles can never settle. With
    exactly ``|V|`` particles and ``A = V`` the only A-stable end state is
    ``1_V`` with every odometer integer; on a bipartite graph each
    half-toppling moves one particle across the bipartition, which fixes the
    parity of the total doubled odometer and can rule that state out.
    """
    if g.halo.any():
        return False
    A = SiteSet(A)
    total = s.total
    if total > len(A):
        return True
    if len(A) != g.n_sites or total != g.n_sites:
        return False
    col = two_colouring(g)
    if col is None:
        return False
    moves = int(s.eta[col == 0].sum()) - int((col == 0).sum())
    return (int(s.h2.sum()) + moves) % 2 == 1


def full_never_terminates(g: Graph, s: SsmState) -> bool:
    """True when full stabilisation on a graph without sinks surely never ends.

    More than ``|V|`` particles cannot settle. With exactly ``|V|`` the end
    state is ``1_V``; on a bipartite graph a toppling moves two particles
    across the bipartition, so the particle count on one colour class keeps
    its parity.
    """
    if g.halo.any():
        return False
    total = s.total
    if total != g.n_sites:
        return total > g.n_sites
    col = two_colouring(g)
    if col is None:
        return False
    return (int(s.eta[col == 0].sum()) - int((col == 0).sum())) % 2 == 1
