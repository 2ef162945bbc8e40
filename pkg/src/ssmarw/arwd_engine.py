"""Activated random walks with instantaneous deactivation (ARWD).

Configurations are int64 arrays over sites with ``SLEEP = -1`` standing for a
single sleeping particle, so ``0 < SLEEP < 1 < 2`` is the model's order once
``SLEEP`` is read as one half. Unstable sites hold a value ``>= 1``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

import numba as nb
import numpy as np

from .lattice import Graph, SiteSet
from .randomness import (InstructionField, RandomStream, derive_seed, instruction_index,
                         to_u64, trial_seed)
from .ssm_engine import CAPPED, SsmState, StabilityMode, astab_never_terminates, stabilize

SLEEP = -1
WALK_BUDGET = 10**8
STABILISED = "stabilised"


class StrategyError(ValueError):
    pass


def arwd_total(cfg: np.ndarray) -> int:
    """``|eta|`` with a sleeping particle counting one."""
    return int(np.where(cfg == SLEEP, 1, cfg).sum())


def unstable_sites(cfg: np.ndarray) -> np.ndarray:
    return np.flatnonzero(cfg >= 1)


def is_stable_on(cfg: np.ndarray, sites) -> bool:
    return all(cfg[x] in (0, SLEEP) for x in sites)


def make_config(g: Graph, active=(), sleeping=(), counts=None) -> np.ndarray:
    cfg = np.zeros(g.n_sites, dtype=np.int64)
    if counts is not None:
        for x, k in counts.items():
            cfg[x] = k
    for x in active:
        cfg[x] = 1
    for x in sleeping:
        cfg[x] = SLEEP
    return cfg


@dataclass(frozen=True)
class SubsetConfig:
    """One particle on each site of ``A``; ``U`` holds the active ones."""

    U: SiteSet
    A: SiteSet

    def __post_init__(self):
        if not self.U <= self.A:
            raise ValueError("active set must lie inside A")

    def to_config(self, g: Graph) -> np.ndarray:
        return make_config(g, active=self.U, sleeping=self.A - self.U)

    @classmethod
    def from_config(cls, cfg: np.ndarray, A) -> "SubsetConfig":
        A = SiteSet(A)
        outside = [x for x in np.flatnonzero(cfg != 0).tolist() if x not in A]
        if outside or any(cfg[x] not in (1, SLEEP) for x in A):
            raise ValueError("configuration is not one particle per site of A")
        return cls(SiteSet(x for x in A if cfg[x] == 1), A)


# ---------------------------------------------------------------------------
# strategies and masks
#
# A strategy is called once per time step, in order, with the current
# configuration and the step index; history-dependent strategies keep their
# own record. It returns a site or None for the empty choice.


class GreedyStrategy:
    """Smallest unstable site of ``sites`` (all sites when None)."""

    def __init__(self, sites=None):
        self.sites = None if sites is None else np.array(sorted(sites), dtype=np.int64)

    def __call__(self, cfg, t):
        cand = unstable_sites(cfg) if self.sites is None else self.sites[cfg[self.sites] >= 1]
        return int(cand[0]) if len(cand) else None


class HistoryStrategy:
    """Adapter for a pure function of the full configuration history."""

    def __init__(self, fn: Callable):
        self.fn = fn
        self.history: list = []

    def __call__(self, cfg, t):
        self.history.append(cfg.copy())
        return self.fn(self.history)


# ---------------------------------------------------------------------------
# walks


@nb.njit(cache=True, nogil=True)
def walk_kernel(nbr, deg, keys, start, stop_mask, wake_mask, cfg, field_seed, counters,
                budget, visits):
    """Walk from ``start`` by field instructions until ``stop_mask`` is hit at time >= 1.

    Sleeping particles on ``wake_mask`` met strictly before the hitting time are
    woken in ``cfg``. ``counters`` holds instructions used per site and
    ``visits`` accumulates departures per site. Returns ``(end, steps)`` with
    ``end = -1`` if the budget ran out.
    """
    x = start
    steps = 0
    while steps < budget:
        if cfg[x] == -1 and wake_mask[x]:
            cfg[x] = 1
        counters[x] += 1
        visits[x] += 1
        k = instruction_index(field_seed, keys[x], counters[x], deg[x])
        x = nbr[x, k]
        steps += 1
        if stop_mask[x]:
            return x, steps
    return -1, steps


@dataclass
class WalkSource:
    """Instruction field plus per-site counters driving ARWD walks."""

    seed: int
    counters: np.ndarray

    @classmethod
    def fresh(cls, g: Graph, seed: int) -> "WalkSource":
        return cls(to_u64(seed), np.zeros(g.n_sites, dtype=np.int64))


def sleep_probability(lam: float, in_a: bool, value: int) -> float:
    if not (in_a and value == 1):
        return 0.0
    return 1.0 if math.isinf(lam) else lam / (1.0 + lam)


def _step_inplace(g, cfg, A_mask, lam, x, W, walks: WalkSource, stream: RandomStream,
                  visits=None) -> str:
    if x is None:
        return "none"
    if cfg[x] < 1:
        raise StrategyError("strategy returned stable site")
    if stream.uniform01() < sleep_probability(lam, bool(A_mask[x]), int(cfg[x])):
        cfg[x] = SLEEP
        return "sleep"
    stop = A_mask & (cfg == 0)
    if A_mask[x] and cfg[x] == 1:
        stop[x] = True
    if not stop.any():
        raise StrategyError("no empty settling site")
    wake = np.ones(g.n_sites, dtype=np.bool_) if W is None else g.mask(W)
    if visits is None:
        visits = np.zeros(g.n_sites, dtype=np.int64)
    end, _ = walk_kernel(g.nbr, g.deg, g.keys, x, stop, wake, cfg, np.uint64(walks.seed),
                         walks.counters, WALK_BUDGET, visits)
    if end < 0:
        raise RuntimeError("walk exceeded its step budget")
    cfg[x] -= 1
    cfg[end] = SLEEP
    return "walk"


def arwd_step(g: Graph, cfg: np.ndarray, A, lam: float, x: Optional[int], W,
              walks: WalkSource, stream: RandomStream) -> np.ndarray:
    """One transition of the (masked) ARWD kernel; returns the new configuration.

    ``W = None`` wakes sleepers anywhere along the walk (the unmasked kernel).
    """
    out = cfg.copy()
    _step_inplace(g, out, g.mask(A), lam, x, W, walks, stream)
    return out


@dataclass
class ArwdRun:
    T: int
    hstar: dict
    config: np.ndarray
    status: str


def run_arwd(g: Graph, A, lam: float, f, cfg0: np.ndarray, seed: int, cap: int = 10**7,
             mask: Optional[Callable] = None, check: bool = True) -> ArwdRun:
    """Iterate the ARWD kernel until ``f`` returns None or ``cap`` steps.

    ``mask(cfg, t, x)`` gives the wakeable set for the step (None for all
    sites). ``hstar[x]`` counts the steps at which ``f`` chose ``x``.
    """
    A = SiteSet(A)
    A_mask = g.mask(A)
    cfg = cfg0.copy()
    n_particles = len(A)
    if check and arwd_total(cfg) != n_particles:
        raise ValueError("initial configuration must carry |A| particles")
    walks = WalkSource.fresh(g, derive_seed(seed, "walk"))
    stream = RandomStream(derive_seed(seed, "sleep"))
    hstar: dict = {}
    t = 0
    while t < cap:
        x = f(cfg, t)
        if x is None:
            return ArwdRun(t, hstar, cfg, STABILISED)
        W = mask(cfg, t, x) if mask is not None else None
        _step_inplace(g, cfg, A_mask, lam, x, W, walks, stream)
        hstar[x] = hstar.get(x, 0) + 1
        t += 1
        if check and arwd_total(cfg) != n_particles:
            raise AssertionError("particle number changed")
    return ArwdRun(t, hstar, cfg, CAPPED)


# ---------------------------------------------------------------------------
# domination experiment


def check_coupling_sets(g: Graph, A, B):
    A, B = SiteSet(A), SiteSet(B)
    if not B <= A:
        raise ValueError("B must be a subset of A")
    for x in B:
        if g.deg[x] < 2:
            raise ValueError(f"site {x} of B has degree < 2")
        if any(int(y) in B for y in g.nbr[x, : g.deg[x]]):
            raise ValueError("B must be totally disconnected")
    return A, B


def tilde_config(g: Graph, eta, A, B) -> np.ndarray:
    """``tilde eta 1_B``: active on ``{eta >= 2}`` and asleep elsewhere, restricted to B."""
    U = SiteSet(x for x in A if eta[x] >= 2)
    return make_config(g, active=U & B, sleeping=B - U)


@dataclass
class DominationSamples:
    ssm: list
    arwd: list
    flagged: int = 0
    infinite: bool = False
    rows: list = field(default_factory=list, repr=False)


def domination_experiment(g: Graph, A, B, eta, trials: int, seed: int, f=None,
                          cap: int = 10**7, threads: int = 1) -> DominationSamples:
    """Independent draws of the A-stabilisation size and of the ARWD time on B.

    ``rows`` holds ``(trial, seed, value, flag)`` for both sides, flag naming
    the side and marking capped SSM trials. When A-stabilisation provably never
    terminates the SSM draws are ``inf`` without simulation and ``infinite`` is
    set.
    """
    A, B = check_coupling_sets(g, A, B)
    eta = np.asarray(eta, dtype=np.int64)
    if int(eta.sum()) != len(A):
        raise ValueError("SSM configuration must carry |A| particles")
    lam = float(g.degree) ** 3
    start = tilde_config(g, eta, A, B)
    make_f = f if f is not None else (lambda: GreedyStrategy(B))
    mode = StabilityMode.a_stab(A)
    s0 = SsmState.from_counts(eta)
    infinite = astab_never_terminates(g, s0, A)

    def one(t):
        s_seed = trial_seed(seed, "domination-ssm", t)
        if infinite:
            m, status = math.inf, "infinite"
        else:
            res = stabilize(g, s0, g.active_sites, mode, InstructionField(s_seed), cap=cap)
            m, status = res.total, res.status
        a_seed = trial_seed(seed, "domination-arwd", t)
        run = run_arwd(g, B, lam, make_f(), start, a_seed, cap=cap)
        return t, s_seed, m, status, a_seed, run.T, run.status

    out = _map_trials(one, trials, threads)
    samples = DominationSamples([], [], infinite=infinite)
    for t, s_seed, m, status, a_seed, T, a_status in out:
        if status == CAPPED:
            samples.flagged += 1
            flag = "ssm-capped"
        else:
            samples.ssm.append(m)
            flag = "ssm-infinite" if status == "infinite" else "ssm"
        samples.arwd.append(T)
        samples.rows.append((t, s_seed, m, flag))
        samples.rows.append((t, a_seed, T, "arwd" if a_status == STABILISED else "arwd-capped"))
    return samples


def _map_trials(fn, trials, threads):
    if threads <= 1:
        return [fn(t) for t in range(trials)]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(threads) as ex:
        return sorted(ex.map(fn, range(trials)), key=lambda r: r[0])


def write_samples_csv(path, rows, header_comment: Optional[str] = None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(["trial", "seed", "value", "flag"])
        w.writerows(rows)


# ---------------------------------------------------------------------------
# exact parity probe for the coupled dynamics


def _solve_fraction(Q: list, R: list) -> list:
    """Solve ``(I - Q) X = R`` exactly by Gauss-Jordan elimination."""
    n = len(Q)
    if n == 0:
        return []
    m = len(R[0])
    M = [[(Fraction(int(i == j)) - Q[i][j]) for j in range(n)] + list(R[i]) for i in range(n)]
    for c in range(n):
        piv = next(r for r in range(c, n) if M[r][c] != 0)
        M[c], M[piv] = M[piv], M[c]
        inv = 1 / M[c][c]
        M[c] = [v * inv for v in M[c]]
        for r in range(n):
            if r != c and M[r][c] != 0:
                fac = M[r][c]
                M[r] = [a - fac * b for a, b in zip(M[r], M[c])]
    return [row[n:n + m] for row in M]


def walk_law(g: Graph, start: int, stop, tracked, parity_sites) -> dict:
    """Exact law of a simple random walk stopped on ``stop`` at time >= 1.

    Returns ``{(end, visited & tracked, flips): probability}`` where
    ``flips`` is the frozenset of ``parity_sites`` departed from an odd number
    of times. Probabilities are Fractions.
    """
    stop = SiteSet(stop)
    tracked = SiteSet(tracked)
    psites = sorted(parity_sites)
    pbit = {x: 1 << i for i, x in enumerate(psites)}
    tsorted = sorted(tracked)
    tbit = {x: 1 << i for i, x in enumerate(tsorted)}

    # transient state: walker at pos, about to depart, with marks so far
    states, index, frontier = [], {}, [(start, 0, 0)]
    index[(start, 0, 0)] = 0
    states.append((start, 0, 0))
    outcomes, oindex = [], {}
    edges = []
    while frontier:
        pos, vis, fl = frontier.pop()
        vis2 = vis | tbit.get(pos, 0)
        fl2 = fl ^ pbit.get(pos, 0)
        d = int(g.deg[pos])
        row = []
        for y in g.nbr[pos, :d].tolist():
            if y in stop:
                key = (y, vis2, fl2)
                if key not in oindex:
                    oindex[key] = len(outcomes)
                    outcomes.append(key)
                row.append(("out", oindex[key]))
            else:
                key = (y, vis2, fl2)
                if key not in index:
                    index[key] = len(states)
                    states.append(key)
                    frontier.append(key)
                row.append(("st", index[key]))
        edges.append((index[(pos, vis, fl)], d, row))
    n, m = len(states), len(outcomes)
    Q = [[Fraction(0)] * n for _ in range(n)]
    R = [[Fraction(0)] * m for _ in range(n)]
    for i, d, row in edges:
        w = Fraction(1, d)
        for kind, j in row:
            if kind == "st":
                Q[i][j] += w
            else:
                R[i][j] += w
    X = _solve_fraction(Q, R)
    law = {}
    for j, (y, vis, fl) in enumerate(outcomes):
        p = X[0][j]
        if p:
            visited = SiteSet(x for x in tsorted if vis & tbit[x])
            flips = SiteSet(x for x in psites if fl & pbit[x])
            law[(y, visited, flips)] = p
    return law


@dataclass
class ParityRecord:
    t: int
    x: int
    chosen: bool
    pi: Fraction
    holds: bool


@dataclass
class ParityReport:
    records: list
    branches: int
    bound: Fraction
    complete: bool = True

    @property
    def all_hold(self) -> bool:
        return all(r.holds for r in self.records)

    @property
    def min_pi(self):
        return min((r.pi for r in self.records), default=None)


class BranchBudgetExceeded(RuntimeError):
    def __init__(self, report: ParityReport):
        super().__init__(f"branch budget exceeded after {report.branches} branches")
        self.report = report


def _coupled_choice(cfg, A_sorted, A_mask, B, f_hist):
    outside = [x for x in range(len(cfg)) if not A_mask[x] and cfg[x] >= 1]
    if outside:
        return min(outside)
    crowded = [x for x in A_sorted if cfg[x] >= 2]
    if crowded:
        return crowded[0]
    if all(cfg[x] <= 1 for x in range(len(cfg)) if A_mask[x]) and not outside:
        return f_hist()
    return None


def coupled_parity_probe(g: Graph, A, B, eta0, steps: int, budget: int = 10**7) -> ParityReport:
    """Exact conditional parity of the odometer in the coupled ARWD dynamics.

    Branches are grouped by configuration history; each history carries the
    exact law of the odometer parities on ``B``. For every reachable history
    at time ``t`` and every ``x`` in ``B`` with ``eta_t(x) = 1`` the
    conditional probability that ``m_t(x)`` is odd is recorded and compared
    with ``1 / (1 + Delta^3)``. The strategy used once every site of A holds
    one particle is the smallest unstable site of B.
    """
    if g.n_sites > 6:
        raise ValueError("parity probe is limited to graphs with at most 6 sites")
    A, B = check_coupling_sets(g, A, B)
    eta0 = np.asarray(eta0, dtype=np.int64)
    if int(eta0.sum()) != len(A):
        raise ValueError("|eta0| must equal |A|")
    lam = g.degree ** 3
    bound = Fraction(1, 1 + lam)
    A_sorted = sorted(A)
    A_mask = g.mask(A)
    B_sorted = sorted(B)
    start = eta0.copy()
    for x in A:
        if start[x] == 1:
            start[x] = SLEEP
    # history (tuple of config tuples) -> {parity frozenset: weight}
    level = {(tuple(start.tolist()),): {SiteSet(): Fraction(1)}}
    records: list = []
    n_branches = 1
    walk_cache: dict = {}
    freeze = [1 if (A_mask[x] and x not in B) else (SLEEP if x in B else 0) for x in range(g.n_sites)]

    def frozen(cfg):
        return all(_le(cfg[x], freeze[x]) for x in range(len(cfg)))

    for t in range(steps + 1):
        nxt: dict = {}
        for hist, law in level.items():
            cfg = np.array(hist[-1], dtype=np.int64)
            total = sum(law.values())
            first = len(records)
            for x in B_sorted:
                if cfg[x] == 1:
                    pi = sum(w for par, w in law.items() if x in par) / total
                    records.append(ParityRecord(t, x, False, pi, pi >= bound))
            if t == steps:
                continue
            X = None
            if not frozen(cfg):
                X = _coupled_choice(cfg, A_sorted, A_mask, B,
                                    lambda: next((b for b in B_sorted if cfg[b] >= 1), None))
            if X is None:
                _merge(nxt, hist + (hist[-1],), law)
                continue
            if X in B and cfg[X] == 1:
                pi = sum(w for par, w in law.items() if X in par) / total
                for r in records[first:]:
                    r.chosen = r.chosen or r.x == X
                walk_p = min(Fraction(1), 1 / ((1 + lam) * pi)) if pi else Fraction(0)
            else:
                walk_p = None
            sleep_law, walk_in = {}, {}
            for par, w in law.items():
                if walk_p is None:
                    walk_in[par] = w
                elif X not in par:
                    sleep_law[par] = sleep_law.get(par, 0) + w
                else:
                    sleep_law[par] = sleep_law.get(par, 0) + w * (1 - walk_p)
                    walk_in[par] = w * walk_p
            sleep_law = {k: v for k, v in sleep_law.items() if v}
            if sleep_law:
                c2 = cfg.copy()
                c2[X] = SLEEP
                _merge(nxt, hist + (tuple(c2.tolist()),), sleep_law)
            walk_in = {k: v for k, v in walk_in.items() if v}
            if walk_in:
                waking = all(cfg[x] <= 1 for x in range(len(cfg)) if A_mask[x]) and not any(
                    cfg[x] >= 1 for x in range(len(cfg)) if not A_mask[x])
                stop = [z for z in A_sorted if (cfg[z] - (1 if z == X else 0)) == 0]
                sleepers = [z for z in range(len(cfg)) if cfg[z] == SLEEP] if waking else []
                key = (X, tuple(stop), tuple(sleepers))
                if key not in walk_cache:
                    walk_cache[key] = walk_law(g, X, stop, sleepers, B)
                for (y, woken, flips), q in walk_cache[key].items():
                    c2 = cfg.copy()
                    for z in woken:
                        c2[z] = 1
                    c2[X] -= 1
                    c2[y] = SLEEP
                    moved = {par ^ flips: w * q for par, w in walk_in.items()}
                    _merge(nxt, hist + (tuple(c2.tolist()),), moved)
            n_branches += sum(len(v) for v in nxt.values())
            if n_branches > budget:
                raise BranchBudgetExceeded(ParityReport(records, n_branches, bound, complete=False))
        level = nxt
    return ParityReport(records, n_branches, bound)


def _le(a, b) -> bool:
    # order 0 < s < 1 < 2 < ... with s encoded as -1
    def rank(v):
        return 0.5 if v == SLEEP else float(v)
    return rank(a) <= rank(b)


def _merge(dst: dict, key, law: dict):
    cur = dst.setdefault(key, {})
    for par, w in law.items():
        cur[par] = cur.get(par, 0) + w
