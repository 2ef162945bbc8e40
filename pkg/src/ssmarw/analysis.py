"""Exact solves and statistical probes: Green's functions, hitting probabilities,
ghost walks, dominance tests, the geometric-sum lemmas and scaling fits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numba as nb
import numpy as np

from .lattice import Graph, SiteSet, ball, graph_distances
from .randomness import (InstructionField, RandomStream, derive_seed, instruction_index,
                         to_u64, trial_seed)
from .ssm_engine import CAPPED, StabilityMode, poisson_init, stabilize


def _rng(seed: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *labels)))


# ---------------------------------------------------------------------------
# Green's functions and hitting probabilities


@dataclass
class GreenTable:
    Z: list
    G: np.ndarray
    residual: float
    _index: dict = field(repr=False, default_factory=dict)

    def __post_init__(self):
        self._index = {x: i for i, x in enumerate(self.Z)}

    def __call__(self, x: int, y: int) -> float:
        i, j = self._index.get(x), self._index.get(y)
        if i is None or j is None:
            return 0.0
        return float(self.G[i, j])

    def row_sum(self, x: int) -> float:
        i = self._index.get(x)
        return 0.0 if i is None else float(self.G[i].sum())

    def column(self, y: int) -> dict:
        j = self._index[y]
        return {x: float(self.G[i, j]) for i, x in enumerate(self.Z)}


def _killed_kernel(g: Graph, Z: list) -> np.ndarray:
    """Transition matrix of the simple random walk restricted to ``Z``."""
    idx = {x: i for i, x in enumerate(Z)}
    P = np.zeros((len(Z), len(Z)))
    for i, x in enumerate(Z):
        d = int(g.deg[x])
        for y in g.nbr[x, :d].tolist():
            j = idx.get(y)
            if j is not None:
                P[i, j] += 1.0 / d
    return P


def _check_window(g: Graph, Z) -> list:
    Z = sorted(SiteSet(Z))
    if not Z:
        raise ValueError("empty window")
    if any(g.halo[x] for x in Z):
        raise ValueError("window must avoid the absorbing halo")
    if len(Z) == g.n_sites or (g.is_torus and len(Z) == g.n_sites):
        raise ValueError("no absorbing boundary")
    return Z


def green_function(g: Graph, Z) -> GreenTable:
    """``G_Z = (I - P_Z)^{-1}``: expected visits before leaving ``Z``."""
    Z = _check_window(g, Z)
    M = np.eye(len(Z)) - _killed_kernel(g, Z)
    G = np.linalg.solve(M, np.eye(len(Z)))
    res = float(np.abs(M @ G - np.eye(len(Z))).max())
    if res > 1e-10:
        raise ArithmeticError(f"Green solve residual {res:.3g} above 1e-10")
    return GreenTable(Z, G, res)


def exit_times(g: Graph, Z) -> dict:
    """``E_x[tau_{Z^c}]`` from the exit-time equations ``t = 1 + P_Z t``."""
    Z = _check_window(g, Z)
    t = np.linalg.solve(np.eye(len(Z)) - _killed_kernel(g, Z), np.ones(len(Z)))
    return dict(zip(Z, t.tolist()))


def upsilon(g: Graph, x: int, y: int) -> float:
    """``P_x(tau_y < tau_x^+)`` on the finite graph, by an exact linear solve."""
    if x == y:
        raise ValueError("x and y must differ")
    if g.halo[x] or g.halo[y]:
        raise ValueError("x and y must be active sites")
    others = [z for z in range(g.n_sites) if z not in (x, y) and not g.halo[z]]
    idx = {z: i for i, z in enumerate(others)}
    M = np.eye(len(others))
    b = np.zeros(len(others))
    for z in others:
        i = idx[z]
        d = int(g.deg[z])
        for w in g.nbr[z, :d].tolist():
            if w == y:
                b[i] += 1.0 / d
            elif w in idx:
                M[i, idx[w]] -= 1.0 / d
    h = np.linalg.solve(M, b) if others else np.zeros(0)
    d = int(g.deg[x])
    total = 0.0
    for w in g.nbr[x, :d].tolist():
        total += 1.0 if w == y else (h[idx[w]] if w in idx else 0.0)
    return total / d


def upsilon_cycle_closed_form(n: int, r: int) -> float:
    """Finite-cycle value ``1/(2r) + 1/(2(n - r))`` (two-sided gambler's ruin)."""
    return 0.5 / r + 0.5 / (n - r)


def upsilon_line(r: int) -> float:
    """``P_0(tau_r < tau_0^+)`` for the walk on Z, solved exactly on ``{0..r}``.

    A first step to the left returns to 0 before reaching ``r`` almost surely
    (recurrence), so only the segment matters. This is the infimum over cycle
    sizes of the finite values.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    # h(k) = P_k(hit r before 0) for 1 <= k < r, h(0)=0, h(r)=1
    m = r - 1
    if m == 0:
        h1 = Fraction(1)
    else:
        M = [[Fraction(0)] * m for _ in range(m)]
        b = [Fraction(0)] * m
        for i in range(m):
            M[i][i] = Fraction(1)
            k = i + 1
            for nb_ in (k - 1, k + 1):
                if nb_ == r:
                    b[i] += Fraction(1, 2)
                elif nb_ >= 1:
                    M[i][nb_ - 1] -= Fraction(1, 2)
        h1 = _fraction_solve(M, b)[0]
    return float(Fraction(1, 2) * h1)


def _fraction_solve(M, b):
    n = len(M)
    A = [row[:] + [b[i]] for i, row in enumerate(M)]
    for c in range(n):
        piv = next(r for r in range(c, n) if A[r][c] != 0)
        A[c], A[piv] = A[piv], A[c]
        inv = 1 / A[c][c]
        A[c] = [v * inv for v in A[c]]
        for r in range(n):
            if r != c and A[r][c] != 0:
                f = A[r][c]
                A[r] = [a - f * bb for a, bb in zip(A[r], A[c])]
    return [A[i][n] for i in range(n)]


# ---------------------------------------------------------------------------
# ghost walks


@nb.njit(cache=True, nogil=True)
def _ghost_departures(nbr, deg, keys, halo, starts, target, seed):
    """Departures from ``target`` of independent walks from ``starts`` killed on the halo."""
    counters = np.zeros(nbr.shape[0], dtype=np.int64)
    total = 0
    for s in starts:
        x = s
        while not halo[x]:
            if x == target:
                total += 1
            counters[x] += 1
            k = instruction_index(seed, keys[x], counters[x], deg[x])
            x = nbr[x, k]
    return total


@dataclass
class GhostReport:
    trials: int
    mean: float = math.nan
    se: float = math.nan
    exact: float = math.nan
    z: float = math.nan
    excluded: int = 0
    interior_ratio: float = math.nan
    r: int = 1

    @property
    def consistent(self) -> bool:
        return self.trials > 0 and abs(self.mean - self.exact) <= 3 * self.se


def interior_green_ratio(g: Graph, r: int, table: Optional[GreenTable] = None) -> float:
    """``sum_{x in K_L} G(x,o) / sum_{x in B(L)} G(x,o)`` with ``K_L`` the sites whose r-ball stays inside."""
    o = g.origin()
    table = table or green_function(g, g.active_sites)
    col = table.column(o)
    inner = [x for x in col if all(not g.halo[y] for y in ball(g, x, r))]
    return sum(col[x] for x in inner) / sum(col.values())


def ghost_probe(g: Graph, mu: float, trials: int, seed: int, r: int = 1,
                cap: int = 10**7) -> GhostReport:
    """Monte Carlo of particle-plus-ghost departures from the origin against ``mu sum_x G(x, o)``."""
    if g.kind != "box" or g.size < 2:
        raise ValueError("ghost probe needs a box with L >= 2")
    table = green_function(g, g.active_sites)
    o = g.origin()
    exact = mu * sum(table.column(o).values())
    rep = GhostReport(trials, exact=exact, r=r, interior_ratio=interior_green_ratio(g, r, table))
    if trials == 0:
        return rep
    vals = []
    for t in range(trials):
        ts = trial_seed(seed, "ghost-probe", t)
        s = poisson_init(g, mu, RandomStream(derive_seed(ts, "init")))
        res = stabilize(g, s, g.active_sites, StabilityMode.full(), InstructionField(derive_seed(ts, "field")),
                        cap=cap)
        if res.status == CAPPED:
            rep.excluded += 1
            continue
        eta = res.state.eta
        starts = np.array([x for x in range(g.n_sites) if not g.halo[x] and eta[x] == 1], dtype=np.int64)
        w = _ghost_departures(g.nbr, g.deg, g.keys, g.halo, starts, o,
                              np.uint64(to_u64(derive_seed(ts, "ghost"))))
        vals.append(int(res.odometer[o]) + int(w))
    v = np.asarray(vals, dtype=float)
    rep.mean = float(v.mean())
    rep.se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else math.inf
    rep.z = (rep.mean - exact) / rep.se if rep.se > 0 else math.inf
    return rep


# ---------------------------------------------------------------------------
# dominance testing


@dataclass
class DominanceVerdict:
    rejected: bool
    max_violation: float
    dkw_band: float
    n1: int
    n2: int
    threshold: float = 0.0


def dkw_epsilon(n: int, alpha: float) -> float:
    return math.sqrt(math.log(2 / alpha) / (2 * n))


def dominance_test(s1, s2, alpha: float = 0.01) -> DominanceVerdict:
    """Test ``H0: s1`` stochastically dominates ``s2`` with summed DKW bands.

    Rejects when ``max_k F1(k) - F2(k)`` exceeds ``eps(n1) + eps(n2)``.
    """
    a = np.sort(np.asarray(s1, dtype=float))
    b = np.sort(np.asarray(s2, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("insufficient data: empty sample")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    grid = np.union1d(a, b)
    F1 = np.searchsorted(a, grid, side="right") / len(a)
    F2 = np.searchsorted(b, grid, side="right") / len(b)
    viol = float(max(0.0, (F1 - F2).max()))
    thr = dkw_epsilon(len(a), alpha) + dkw_epsilon(len(b), alpha)
    band = dkw_epsilon(min(len(a), len(b)), alpha)
    return DominanceVerdict(viol > thr, viol, band, len(a), len(b), thr)


# ---------------------------------------------------------------------------
# geometric lemmas


def composition_parameter(a: float, b: float) -> float:
    return a * b / (1 - b + a * b)


def composition_pmf(a: float, b: float, mass: float = 1e-12) -> np.ndarray:
    """Law of ``S = 1 + sum_{n <= N} (X_n - 1)`` with N ~ geom(a), X_n ~ geom(b).

    Entry ``k`` is ``P(S = k + 1)``, computed from the renewal equation
    ``F = a q + (1 - a) q * F`` with ``q`` the law of ``X - 1``; the support is
    truncated once the computed mass reaches ``1 - mass``.
    """
    if not (0 < a < 1 and 0 < b <= 1):
        raise ValueError("need a in (0, 1) and b in (0, 1]")
    if b == 1:
        return np.array([1.0])
    F: list = []
    qs: list = []
    acc = 0.0
    k = 0
    while acc < 1 - mass:
        qs.append(b * (1 - b) ** k)
        conv = sum(qs[i] * F[k - i] for i in range(1, k + 1)) if k else 0.0
        val = (a * qs[k] + (1 - a) * conv) / (1 - (1 - a) * qs[0])
        F.append(val)
        acc += val
        k += 1
        if k > 10**6:
            raise ArithmeticError("support truncation did not converge")
    return np.array(F)


def geometric_composition_check(a: float, b: float, tol: float = 1e-8) -> bool:
    pmf = composition_pmf(a, b)
    c = composition_parameter(a, b)
    k = np.arange(len(pmf))
    ref = c * (1 - c) ** k
    return bool(np.abs(pmf - ref).max() < tol)


def composition_max_deviation(a: float, b: float) -> float:
    pmf = composition_pmf(a, b)
    c = composition_parameter(a, b)
    return float(np.abs(pmf - c * (1 - c) ** np.arange(len(pmf))).max())


def epsilon_window(p: float) -> tuple:
    """``[exp(-1/(32 p^2)), p^3)``: the admissible range of epsilon."""
    return math.exp(-1 / (32 * p * p)), p**3


def _check_epsilon(p: float, eps: float):
    lo, hi = epsilon_window(p)
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    if eps < lo:
        raise ValueError(f"window violated: exp(-1/(32p^2)) = {lo:.4g} > eps = {eps:.4g}")
    if not eps < hi:
        raise ValueError(f"window violated: eps = {eps:.4g} >= p^3 = {hi:.4g}")


def bernoulli_geometric_samples(p: float, eps: float, trials: int, seed: int,
                                coupling: str = "independent") -> np.ndarray:
    """Draws of ``1 + X_1 + ... + X_T`` with ``T + 1 ~ geom(eps)``, ``X_n ~ Bernoulli(p)``.

    ``coupling='countermonotone'`` makes ``T`` a decreasing function of the
    index ``W`` of the first success among the ``X_n`` (through a randomised
    probability transform), which keeps both marginals and pushes mass toward
    ``S = 1``.
    """
    _check_epsilon(p, eps)
    if trials <= 0:
        raise ValueError("trials must be positive")
    rng = _rng(seed, "bernoulli-geometric", coupling)
    if coupling == "independent":
        T = rng.geometric(eps, trials) - 1
        return 1 + rng.binomial(T, p)
    if coupling != "countermonotone":
        raise ValueError(f"unknown coupling {coupling!r}")
    W = rng.geometric(p, trials)
    cdf_below = 1 - (1 - p) ** (W - 1)
    u = cdf_below + rng.random(trials) * (p * (1 - p) ** (W - 1))
    tail = np.clip(1 - u, 1e-300, 1.0)  # uniform on (0, 1]
    # T + 1 = min{k : 1 - (1 - eps)^k >= tail}
    Tp1 = np.maximum(1, np.ceil(np.log1p(-np.minimum(tail, 1 - 1e-16)) / math.log1p(-eps)))
    T = Tp1.astype(np.int64) - 1
    extra = np.where(T >= W, 1 + rng.binomial(np.maximum(T - W, 0), p), 0)
    return 1 + extra


def bernoulli_geometric_domination_check(p: float, eps: float, trials: int, seed: int,
                                         coupling: str = "independent",
                                         alpha: float = 0.01) -> DominanceVerdict:
    """Dominance of ``1 + X_1 + ... + X_T`` over geom(eps / p^3), tested by DKW."""
    s = bernoulli_geometric_samples(p, eps, trials, seed, coupling)
    ref = _rng(seed, "bernoulli-geometric-ref", coupling).geometric(eps / p**3, trials)
    return dominance_test(s, ref, alpha)


# ---------------------------------------------------------------------------
# constants and fits


@dataclass(frozen=True)
class Constants:
    degree: int
    weak_bound: float
    mu_lower: float
    lam: float

    @property
    def weak_bound_exact(self) -> Fraction:
        D = self.degree
        return Fraction(D - 1, D**3)

    @property
    def mu_lower_exact(self) -> Fraction:
        D = self.degree
        return Fraction(D - 1, 10 * D**6 * (D * D + 1))


def constants(degree: int) -> Constants:
    if degree < 2:
        raise ValueError("degree must be at least 2")
    D = degree
    return Constants(D, (D - 1) / D**3, (D - 1) / (10 * D**6 * (D * D + 1)), float(D**3))


@dataclass
class ExpFit:
    slope: float
    intercept: float
    r2: float
    slope_se: float

    @property
    def z(self) -> float:
        return self.slope / self.slope_se if self.slope_se > 0 else math.inf


def fit_exponential_time(ns, times, d: int = 1) -> ExpFit:
    """Least squares of ``log time`` on ``n^d``."""
    if len(ns) != len(times) or len(ns) < 3:
        raise ValueError("need at least 3 (n, time) points")
    x = np.asarray(ns, dtype=float) ** d
    y = np.log(np.asarray(times, dtype=float))
    if np.ptp(x) == 0:
        raise ValueError("degenerate design: all n equal")
    X = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    dof = len(x) - 2
    sigma2 = ss_res / dof if dof > 0 else 0.0
    se = math.sqrt(sigma2 / float(((x - x.mean()) ** 2).sum()))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ExpFit(float(coef[0]), float(coef[1]), r2, se)


def distances_from(g: Graph, x: int) -> np.ndarray:
    return graph_distances(g, x)
