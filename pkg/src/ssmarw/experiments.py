"""Experiment drivers behind the CLI subcommands.

Each driver returns an :class:`ExperimentResult` (CSV columns, rows and a
JSON-serialisable summary). Per-trial seeds come from
``derive_seed(seed, command, ...)`` and results are collected in trial order,
so the output does not depend on the number of worker threads.
"""
from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from . import analysis as an
from .arwd_engine import (GreedyStrategy, STABILISED, coupled_parity_probe, domination_experiment,
                          make_config, run_arwd)
from .hierarchy import (HierarchyError, build_hierarchy, literal_f, random_settling_set,
                        strategy_f, validate_hierarchy)
from .lattice import Graph, SiteSet, ball, box, cycle, is_connected, path, torus
from .randomness import InstructionField, RandomStream, derive_seed, trial_seed
from .ssm_engine import (CAPPED, SsmState, StabilityMode, abelian_probe, enumerate_orders,
                         full_never_terminates, poisson_init, stabilize)

log = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    name: str
    columns: list
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    ok: bool = True


def map_trials(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """``[fn(i) for i in items]``, optionally on a thread pool; order is preserved."""
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, items))


def fmt(x) -> str:
    """Stable text form for CSV cells."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, Fraction):
        return f"{x.numerator}/{x.denominator}"
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return format(x, ".10g")
    return str(x)


def _field_state(g: Graph, mu: float, ts: int):
    s = poisson_init(g, mu, RandomStream(derive_seed(ts, "init")))
    return s, InstructionField(derive_seed(ts, "field"))


# ---------------------------------------------------------------------------
# fixation scan


def fixation_scan(mus: Sequence[float], Ls: Sequence[int], trials: int, seed: int, d: int = 1,
                  threshold: Optional[int] = None, cap: int = 10**7,
                  threads: int = 1) -> ExperimentResult:
    """Fraction of trials with ``m(o) > 0`` and with ``m(o) >= threshold`` on ``B(L)``.

    The initial configuration and field of trial ``t`` do not depend on
    ``(mu, L)``, so the table is monotone in both pathwise.
    """
    cols = ["mu", "L", "trials", "active_frac", "growth_frac", "threshold", "capped", "seed"]
    res = ExperimentResult("fixation-scan", cols)
    cells = [(mu, L) for mu in mus for L in Ls]

    def one(args):
        mu, L, t = args
        g = box(L, d)
        ts = trial_seed(seed, "fixation-scan", t)
        s, fld = _field_state(g, mu, ts)
        out = stabilize(g, s, g.active_sites, StabilityMode.full(), fld, cap=cap)
        return int(out.odometer[g.origin()]), out.status == CAPPED

    for mu, L in cells:
        thr = threshold if threshold is not None else L
        vals = map_trials(one, [(mu, L, t) for t in range(trials)], threads)
        done = [m for m, capped in vals if not capped]
        capped = len(vals) - len(done)
        act = sum(m > 0 for m in done) / len(done) if done else math.nan
        grow = sum(m >= thr for m in done) / len(done) if done else math.nan
        res.rows.append([mu, L, trials, act, grow, thr, capped, seed])
    table = {}
    for r in res.rows:
        table.setdefault(r[1], []).append(r[3])
    res.summary = {
        "cells": len(cells),
        "monotone_in_mu": all(all(a <= b for a, b in zip(v, v[1:])) for v in table.values()),
    }
    return res


# ---------------------------------------------------------------------------
# torus stabilisation time


def torus_time(ns: Sequence[int], mu: float, trials: int, seed: int, d: int = 1,
               cap: int = 10**8, threads: int = 1) -> ExperimentResult:
    """Total half-topplings to stabilise Poisson(mu) on ``Z_n^d``, per ``n``.

    Trials that provably never stabilise (more than ``n^d`` particles, or
    exactly ``n^d`` with the wrong bipartite parity) are counted, not
    simulated; quantiles are over the stabilising trials.
    """
    cols = ["n", "trials", "stabilizable", "capped", "median", "q1", "q3", "seed"]
    res = ExperimentResult("torus-time", cols)
    warnings = []
    if mu >= 1:
        warnings.append("mu >= 1: stabilisation has zero probability as n grows")

    medians = []
    for n in ns:
        g = torus(n, d)

        def one(t, g=g, n=n):
            ts = derive_seed(seed, "torus-time", n, t)
            s, fld = _field_state(g, mu, ts)
            if full_never_terminates(g, s):
                return None
            out = stabilize(g, s, None, StabilityMode.full(), fld, cap=cap)
            return -1 if out.status == CAPPED else out.total

        vals = map_trials(one, range(trials), threads)
        ok = [v for v in vals if v is not None and v >= 0]
        capped = sum(1 for v in vals if v == -1)
        stab = sum(1 for v in vals if v is not None)
        if ok:
            q1, med, q3 = (float(q) for q in np.quantile(ok, [0.25, 0.5, 0.75]))
        else:
            q1 = med = q3 = math.nan
        medians.append(med)
        res.rows.append([n, trials, stab, capped, med, q1, q3, seed])

    fit = None
    good = [(n, m) for n, m in zip(ns, medians) if m > 0 and not math.isnan(m)]
    if len(good) >= 3:
        f = an.fit_exponential_time([n for n, _ in good], [m for _, m in good], d)
        fit = {"slope": f.slope, "intercept": f.intercept, "r2": f.r2, "slope_se": f.slope_se,
               "z": f.z}
    res.summary = {
        "fit": fit,
        "medians": medians,
        "strictly_increasing": all(a < b for a, b in zip(medians, medians[1:])),
        "warnings": warnings,
    }
    return res


# ---------------------------------------------------------------------------
# weak probe


def weak_probe(L: int, mu: float, trials: int, seed: int, d: int = 1, x: Optional[int] = None,
               cap: int = 10**7, threads: int = 1) -> ExperimentResult:
    """Estimate ``P(A_{x,L})`` and ``P(m(x) = 0)`` after full stabilisation of ``B(L)``.

    ``A_{x,L}`` is the event that ``B(x, 1)`` holds a particle at the end. The
    check is ``P(A) + P(m = 0) >= (D - 1)/D^3 - 3 SE`` with ``SE`` the
    standard error of the per-trial sum of both indicators.
    """
    g = box(L, d)
    x = g.origin() if x is None else x
    Ix = ball(g, x, 1)
    if any(g.halo[z] for z in Ix):
        raise ValueError("interior required: B(x, 1) touches the absorbing halo")
    Ix_arr = np.array(sorted(Ix), dtype=np.int64)
    if trials <= 0:
        raise ValueError("trials must be positive")

    def one(t):
        ts = trial_seed(seed, "weak-probe", t)
        s, fld = _field_state(g, mu, ts)
        out = stabilize(g, s, g.active_sites, StabilityMode.full(), fld, cap=cap)
        if out.status == CAPPED:
            return t, ts, None, None
        return t, ts, bool(out.state.eta[Ix_arr].sum() > 0), bool(out.odometer[x] == 0)

    vals = map_trials(one, range(trials), threads)
    res = ExperimentResult("weak-probe", ["trial", "seed", "event_A", "m_zero", "capped"])
    a, z = [], []
    for t, ts, ea, mz in vals:
        res.rows.append([t, ts, ea if ea is not None else "", mz if mz is not None else "",
                         ea is None])
        if ea is not None:
            a.append(ea)
            z.append(mz)
    a = np.array(a, dtype=float)
    z = np.array(z, dtype=float)
    bound = an.constants(g.degree).weak_bound
    n = len(a)
    se = float(np.std(a + z, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    pa, pz = (float(a.mean()), float(z.mean())) if n else (math.nan, math.nan)
    res.ok = bool(n and pa >= bound - pz - 3 * se)
    res.summary = {"p_A": pa, "p_m_zero": pz, "se": se, "bound": bound, "capped": trials - n,
                   "holds": res.ok}
    return res


# ---------------------------------------------------------------------------
# domination


def domination(g: Graph, A, B, eta, trials: int, seed: int, alpha: float = 0.01,
               cap: int = 10**7, threads: int = 1) -> ExperimentResult:
    s = domination_experiment(g, A, B, eta, trials, seed, cap=cap, threads=threads)
    res = ExperimentResult("domination", ["trial", "seed", "value", "flag"], list(map(list, s.rows)))
    summ = {"trials": trials, "flagged": s.flagged, "ssm_infinite": s.infinite}
    try:
        v = an.dominance_test(s.ssm, s.arwd, alpha)
    except ValueError as e:
        res.ok = False
        summ["verdict"] = str(e)
    else:
        res.ok = not v.rejected
        summ.update(rejected=v.rejected, max_violation=v.max_violation, threshold=v.threshold,
                    dkw_band=v.dkw_band, n_ssm=v.n1, n_arwd=v.n2,
                    mean_ssm=float(np.mean(s.ssm)), mean_arwd=float(np.mean(s.arwd)))
    res.summary = summ
    return res


# ---------------------------------------------------------------------------
# confinement


def confinement_probe(g: Graph, A, eta, h2, trials: int, seed: int,
                      cap: int = 10**6, threads: int = 1) -> ExperimentResult:
    """Probability that half-legal stabilisation inside ``A`` sends no particle out of ``A``."""
    A = SiteSet(A)
    eta = np.asarray(eta, dtype=np.int64)
    h2 = np.asarray(h2, dtype=np.int64)
    if trials <= 0:
        raise ValueError("trials must be positive")
    if not A or len(A) > 8:
        raise ValueError("A must have between 1 and 8 sites")
    if any(g.halo[x] for x in A):
        raise ValueError("A must avoid the absorbing halo")
    if not is_connected(g, A):
        raise ValueError("A must be connected")
    if any(eta[x] > 1 for x in A):
        raise ValueError("at most one particle per site of A")
    if all(eta[x] >= 1 for x in A):
        raise ValueError("hypothesis violated: at least one empty site in A is required")
    outside = np.array([x for x in range(g.n_sites) if x not in A], dtype=np.int64)
    s0 = SsmState(eta.copy(), h2.copy())
    before = int(eta[outside].sum())

    def one(t):
        ts = trial_seed(seed, "confinement-probe", t)
        out = stabilize(g, s0, A, StabilityMode.half(), InstructionField(ts), cap=cap)
        if out.status == CAPPED:
            raise RuntimeError("confinement stabilisation capped")
        return t, ts, int(out.state.eta[outside].sum()) == before

    vals = map_trials(one, range(trials), threads)
    res = ExperimentResult("confinement-probe", ["trial", "seed", "no_exit"],
                           [[t, ts, ok] for t, ts, ok in vals])
    p = sum(ok for _, _, ok in vals) / trials
    se = math.sqrt(p * (1 - p) / trials)
    bound = float(g.degree) ** (-2 * len(A))
    res.ok = p >= bound - 3 * se
    res.summary = {"p_no_exit": p, "se": se, "bound": bound, "holds": res.ok}
    return res


def default_confinement_instance():
    g = cycle(5)
    eta = np.zeros(5, dtype=np.int64)
    eta[0] = 1
    h2 = np.zeros(5, dtype=np.int64)
    h2[0] = h2[1] = 1
    return g, {0, 1}, eta, h2


# ---------------------------------------------------------------------------
# hierarchy check

GRID = [(n, mu, v) for n in (24, 32) for mu in (0.5, 0.7) for v in (2, 4)]
KINDS = ("stripes", "blobs", "uniform")


def hierarchy_check(instances: int, seed: int, grid=GRID, kinds=KINDS,
                    threads: int = 1) -> ExperimentResult:
    """Build and independently re-validate hierarchies on random settling sets.

    Outcomes: ``valid`` or ``failed`` (construction raised with a named clause).
    ``invalid`` counts structures that were returned but fail re-validation and
    must stay at zero.
    """
    def one(i):
        n, mu, v = grid[i % len(grid)]
        kind = kinds[(i // len(grid)) % len(kinds)]
        g = torus(n, 2)
        stream = RandomStream(trial_seed(seed, "hierarchy-check", i))
        from .hierarchy import cluster_radius
        A = random_settling_set(g, mu, stream, kind, cluster_radius(v, mu))
        try:
            h = build_hierarchy(g, A, v, mu)
        except HierarchyError as e:
            return [i, n, mu, v, kind, len(A), "failed", "", e.clause]
        try:
            validate_hierarchy(h, mu)
        except HierarchyError as e:
            return [i, n, mu, v, kind, len(A), "invalid", h.L, e.clause]
        return [i, n, mu, v, kind, len(A), "valid", h.L, ""]

    rows = map_trials(one, range(instances), threads)
    res = ExperimentResult("hierarchy-check",
                           ["instance", "n", "mu", "v", "kind", "size_A", "outcome", "levels",
                            "clause"], rows)
    counts = {k: sum(r[6] == k for r in rows) for k in ("valid", "failed", "invalid")}
    res.ok = counts["invalid"] == 0
    res.summary = counts
    return res


# ---------------------------------------------------------------------------
# parity probe

PARITY_FAMILIES = {
    "cycle3": (lambda: cycle(3), ([0], [1])),
    "path4": (lambda: path(4), ([1], [2])),
    "cycle4": (lambda: cycle(4), ([0, 2],)),
}


def parity_instances(families: Sequence[str] = tuple(PARITY_FAMILIES)):
    """Every ``(family, g, B, eta)`` with ``A = V`` and ``|eta| = |A|``."""
    import itertools
    for name in families:
        make, Bs = PARITY_FAMILIES[name]
        g = make()
        n = g.n_sites
        for B in Bs:
            for eta in itertools.product(range(n + 1), repeat=n):
                if sum(eta) == n:
                    yield name, g, B, eta


def parity_probe(steps: int = 4, families: Sequence[str] = tuple(PARITY_FAMILIES)) -> ExperimentResult:
    """Exhaustive parity probe; each record is checked against ``1/(1 + D^3)`` exactly."""
    res = ExperimentResult("parity-probe", ["family", "B", "eta", "t", "x", "chosen", "pi", "bound",
                                            "holds"])
    mins: dict = {}
    instances = 0
    for name, g, B, eta in parity_instances(families):
        rep = coupled_parity_probe(g, g.active_sites, B, np.array(eta, dtype=np.int64), steps)
        instances += 1
        tag_b = "-".join(map(str, B))
        tag_e = "".join(map(str, eta))
        for r in rep.records:
            res.rows.append([name, tag_b, tag_e, r.t, r.x, r.chosen, r.pi, rep.bound, r.holds])
        res.ok = res.ok and rep.all_hold and rep.complete
        if rep.min_pi is not None:
            mins[name] = min(mins.get(name, rep.min_pi), rep.min_pi)
    res.summary = {"instances": instances, "records": len(res.rows), "all_hold": res.ok,
                   "min_pi": {k: fmt(v) for k, v in mins.items()}}
    return res


# ---------------------------------------------------------------------------
# ghost probe


def ghost_probe(L: int, mu: float, trials: int, seed: int, d: int = 1, r: int = 1,
                cap: int = 10**7) -> ExperimentResult:
    rep = an.ghost_probe(box(L, d), mu, trials, seed, r=r, cap=cap)
    res = ExperimentResult("ghost-probe", ["L", "d", "mu", "trials", "mean", "se", "exact", "z",
                                           "excluded", "interior_ratio", "seed"])
    res.rows.append([L, d, mu, trials, rep.mean, rep.se, rep.exact, rep.z, rep.excluded,
                     rep.interior_ratio, seed])
    res.ok = (trials == 0 or rep.consistent) and rep.interior_ratio > 0.1
    res.summary = {"consistent": rep.consistent, "interior_ratio": rep.interior_ratio}
    return res


# ---------------------------------------------------------------------------
# deterministic lemma checks


def upsilon_table(rs=range(1, 11)) -> list:
    """Rows ``(r, n, finite, closed form, line value)`` with ``n`` in ``{4r + 2, 8r}``."""
    out = []
    for r in rs:
        for n in sorted({4 * r + 2, 8 * r}):
            if n <= r:
                continue
            g = cycle(n)
            out.append((r, n, an.upsilon(g, 0, r), an.upsilon_cycle_closed_form(n, r),
                        an.upsilon_line(r)))
    return out


def green_window_checks(count: int, seed: int) -> list:
    """Row sums of ``G_Z`` against independently solved exit times on random windows."""
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "green-windows")))
    out = []
    for i in range(count):
        d = 1 + i % 2
        g = box(int(rng.integers(2, 6)) if d == 2 else int(rng.integers(2, 12)), d)
        act = sorted(g.active_sites)
        k = int(rng.integers(1, len(act) + 1))
        Z = rng.choice(act, size=k, replace=False).tolist()
        G = an.green_function(g, Z)
        T = an.exit_times(g, Z)
        err = max(abs(G.row_sum(x) - T[x]) / T[x] for x in Z)
        out.append((g.spec(), k, err))
    return out


def lemma_checks(seed: int, windows: int = 50) -> ExperimentResult:
    res = ExperimentResult("lemma-checks", ["check", "params", "value", "expected", "error", "ok"])

    def add(name, params, value, expected, tol):
        err = abs(value - expected)
        ok = err <= tol
        res.rows.append([name, params, value, expected, err, ok])
        res.ok = res.ok and ok

    for r, n, fin, closed, line in upsilon_table():
        add("upsilon_line", f"r={r}", line, 1 / (2 * r), 1e-10)
        add("upsilon_cycle", f"r={r};n={n}", fin, closed, 1e-10)
        res.rows.append(["upsilon_cycle_ge_line", f"r={r};n={n}", fin, line, 0.0, fin >= line - 1e-12])
        res.ok = res.ok and fin >= line - 1e-12
    g = box(1, 1)
    G = an.green_function(g, g.active_sites)
    o = g.origin()
    add("green_B1_00", "d=1", G(o, o), 2.0, 1e-10)
    add("green_B1_10", "d=1", G(g.site((1,)), o), 1.0, 1e-10)
    for spec, k, err in green_window_checks(windows, seed):
        res.rows.append(["green_rowsum_exit_time", f"{spec};|Z|={k}", err, 0.0, err, err <= 1e-9])
        res.ok = res.ok and err <= 1e-9
    grid = [0.1, 0.3, 0.5, 0.7, 0.9]
    for a in grid:
        for b in grid:
            add("composition", f"a={a};b={b}", an.composition_max_deviation(a, b), 0.0, 1e-8)
    for D in (2, 4, 6):
        c = an.constants(D)
        add("weak_bound", f"degree={D}", c.weak_bound, float(c.weak_bound_exact), 0.0)
        add("mu_lower", f"degree={D}", c.mu_lower, float(c.mu_lower_exact), 1e-18)
    lo, hi = an.epsilon_window(0.05)
    add("epsilon_window_lo", "p=0.05", lo, math.exp(-12.5), 1e-15)
    add("epsilon_window_hi", "p=0.05", hi, 1.25e-4, 1e-15)
    res.summary = {"checks": len(res.rows), "all_ok": res.ok}
    return res


# ---------------------------------------------------------------------------
# self check

# instructions of InstructionField(20240611) on torus(4, 2) at sites 0..7, j = 1..4
GOLDEN_INSTRUCTIONS = "efc679f1a7f4dfe9"


def instruction_digest() -> str:
    g = torus(4, 2)
    fld = InstructionField(20240611)
    vals = [fld.instruction(g, x, j) for x in range(8) for j in range(1, 5)]
    return hashlib.blake2b(bytes(vals), digest_size=8).hexdigest()


def _random_instance(rng: np.random.Generator):
    choice = int(rng.integers(0, 4))
    if choice == 0:
        g = cycle(int(rng.integers(3, 13)))
    elif choice == 1:
        g = path(int(rng.integers(2, 13)))
    elif choice == 2:
        g = torus(int(rng.integers(3, 5)), 2)
    else:
        g = box(int(rng.integers(1, 4)), 1) if rng.random() < 0.5 else box(1, 2)
    act = np.flatnonzero(~g.halo)
    eta = np.zeros(g.n_sites, dtype=np.int64)
    total = int(rng.integers(0, min(10, len(act)) + 1))
    for x in rng.choice(act, size=total):
        eta[x] += 1
    return g, eta


def abelian_check(instances: int, orders: int, seed: int, max_nodes: int = 10**5,
                  cap: int = 10**5) -> dict:
    """Random orders and exhaustive enumeration against the stack-policy result."""
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "abelian")))
    stats = {"instances": 0, "enumerated": 0, "failures": 0, "skipped": 0}
    while stats["instances"] < instances:
        g, eta = _random_instance(rng)
        fld = InstructionField(int(rng.integers(0, 2**62)))
        for kind in ("full", "half", "a_stab"):
            if kind == "a_stab":
                act = np.flatnonzero(~g.halo)
                A = SiteSet(rng.choice(act, size=int(rng.integers(1, len(act) + 1)), replace=False).tolist())
                mode = StabilityMode.a_stab(A)
                if not g.halo.any() and int(eta.sum()) >= len(A):
                    stats["skipped"] += 1
                    continue
            else:
                mode = StabilityMode.full() if kind == "full" else StabilityMode.half()
                if not g.halo.any() and int(eta.sum()) >= g.n_sites:
                    stats["skipped"] += 1
                    continue
            s = SsmState.from_counts(eta)
            ref = stabilize(g, s, g.active_sites, mode, fld, cap=cap)
            if ref.status == CAPPED:
                stats["skipped"] += 1
                continue
            rep = abelian_probe(g, s, g.active_sites, mode, fld, orders, seed=int(rng.integers(0, 2**31)),
                                cap=cap)
            key = (ref.state.eta.tobytes(), ref.odometer.tobytes())
            if not rep.consistent or rep.capped or (rep.outcomes and rep.outcomes[0] != key):
                stats["failures"] += 1
            en = enumerate_orders(g, s, g.active_sites, mode, fld, max_states=max_nodes)
            if en is not None:
                stats["enumerated"] += 1
                _, outcomes = en
                if outcomes != {key}:
                    stats["failures"] += 1
        stats["instances"] += 1
    return stats


def astab_lemma_check(instances: int, seed: int) -> dict:
    """Full vs half stabilisation, and ``m = m^A`` when the final state is ``1_A``."""
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "astab-lemma")))
    stats = {"instances": 0, "qualifying": 0, "failures": 0}
    for i in range(instances):
        L = int(rng.integers(2, 8))
        d = 1 if i % 3 else 2
        g = box(L if d == 1 else min(L, 4), d)
        mu = float(rng.uniform(0.2, 1.5))
        s, fld = _field_state(g, mu, derive_seed(seed, "astab-lemma", i))
        full = stabilize(g, s, g.active_sites, StabilityMode.full(), fld)
        half = stabilize(g, s, g.active_sites, StabilityMode.half(), fld)
        if not (np.array_equal(full.odometer, half.odometer)
                and np.array_equal(full.state.eta, half.state.eta)):
            stats["failures"] += 1
        A = SiteSet(np.flatnonzero(full.state.eta == 1).tolist())
        astab = stabilize(g, s, g.active_sites, StabilityMode.a_stab(A), fld)
        stats["qualifying"] += 1
        if not np.array_equal(astab.odometer, full.odometer):
            stats["failures"] += 1
        stats["instances"] += 1
    return stats


def monotonicity_check(instances: int, seed: int) -> dict:
    """``eta <= eta'`` gives ``m <= m'`` on a common field."""
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "monotone")))
    fails = 0
    for i in range(instances):
        g = box(int(rng.integers(2, 10)), 1)
        s, fld = _field_state(g, float(rng.uniform(0.2, 1.2)), derive_seed(seed, "monotone", i))
        extra = s.copy()
        act = np.flatnonzero(~g.halo)
        for x in rng.choice(act, size=int(rng.integers(1, 4))):
            extra.eta[x] += 1
        a = stabilize(g, s, g.active_sites, StabilityMode.full(), fld)
        b = stabilize(g, extra, g.active_sites, StabilityMode.full(), fld)
        fails += int(not np.all(a.odometer <= b.odometer))
    return {"instances": instances, "failures": fails}


def weak_structure_check(instances: int, seed: int) -> dict:
    """Weak stabilisation ends with at most one particle per site, except possibly
    a single doubly occupied site of ``B(x, 1)`` with the rest of that ball empty."""
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "weak")))
    fails = 0
    for i in range(instances):
        g = box(int(rng.integers(2, 7)), 1 + i % 2)
        x = g.origin()
        s, fld = _field_state(g, float(rng.uniform(0.3, 1.5)), derive_seed(seed, "weak", i))
        out = stabilize(g, s, g.active_sites, StabilityMode.weak(x), fld)
        eta = out.state.eta
        Ix = sorted(ball(g, x, 1))
        rest = [z for z in range(g.n_sites) if z not in Ix and not g.halo[z]]
        ok = all(eta[z] <= 1 for z in rest)
        vals = sorted(int(eta[z]) for z in Ix)
        ok = ok and (max(vals) <= 1 or (vals[-1] == 2 and sum(vals) == 2))
        fails += int(not ok)
    return {"instances": instances, "failures": fails}


def strategy_replay_check(seed: int, steps: int = 300) -> dict:
    """Incremental ping-pong strategy against the history-scanning definition."""
    g = torus(24, 2)
    for attempt in range(50):
        # the first settling set whose hierarchy has a merge level
        stream = RandomStream(derive_seed(seed, "replay", attempt))
        A = random_settling_set(g, 0.5, stream, "stripes", 4)
        h = build_hierarchy(g, A, 2, 0.5)
        if h.L >= 1:
            break
    f, dyn = strategy_f(h)
    A_idx = np.array(sorted(h.A_level(h.L)), dtype=np.int64)
    history = []
    mismatches = 0

    def wrapped(cfg, t):
        nonlocal mismatches
        history.append(SiteSet(A_idx[cfg[A_idx] == 1].tolist()))
        x = f(cfg, t)
        mismatches += int(x != literal_f(h, history, dyn.procs))
        return x

    from .hierarchy import ColorSequence, sleep_mask_g
    from .arwd_engine import SubsetConfig
    AL = h.A_level(h.L)
    U0 = SiteSet(x for x in AL if stream.uniform01() < 0.5)
    cfg0 = SubsetConfig(U0, AL).to_config(g)
    run_arwd(g, AL, 8.0, wrapped, cfg0, seed, cap=steps,
             mask=sleep_mask_g(h, ColorSequence(seed), dyn))
    return {"steps": len(history), "failures": mismatches, "levels": h.L}


def mask_consistency_check(instances: int, seed: int) -> dict:
    """A mask that always allows every site reproduces the unmasked trajectory."""
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "mask")))
    fails = 0
    for i in range(instances):
        g = cycle(int(rng.integers(3, 13)))
        n = g.n_sites
        A = SiteSet(rng.choice(n, size=int(rng.integers(2, n + 1)), replace=False).tolist())
        act = [x for x in A if rng.random() < 0.5]
        cfg = make_config(g, active=act, sleeping=A - SiteSet(act))
        s = derive_seed(seed, "mask", i)
        a = run_arwd(g, A, 2.0, GreedyStrategy(), cfg, s, cap=10**5)
        b = run_arwd(g, A, 2.0, GreedyStrategy(), cfg, s, cap=10**5,
                     mask=lambda c, t, x: SiteSet(range(n)))
        fails += int(a.T != b.T or not np.array_equal(a.config, b.config) or a.status != b.status)
    return {"instances": instances, "failures": fails}


def selfcheck(seed: int = 0, fast: bool = False) -> ExperimentResult:
    """Run the invariant suite; ``ok`` is False if any check fails."""
    k = 1 if fast else 4
    checks = {}
    digest = instruction_digest()
    checks["instruction_hash"] = {"digest": digest, "failures": int(digest != GOLDEN_INSTRUCTIONS)}
    checks["abelian"] = abelian_check(10 * k, 20, seed, max_nodes=2 * 10**4)
    checks["monotonicity"] = monotonicity_check(10 * k, seed)
    checks["astab_lemma"] = astab_lemma_check(10 * k, seed)
    checks["weak_structure"] = weak_structure_check(10 * k, seed)
    checks["mask_consistency"] = mask_consistency_check(20 * k, seed)
    if not fast:
        hc = hierarchy_check(16, seed)
        checks["hierarchy"] = {"instances": 16, "failures": hc.summary["invalid"]}
        checks["strategy_replay"] = strategy_replay_check(seed)
    lc = lemma_checks(seed, windows=10 if fast else 50)
    checks["lemmas"] = {"checks": len(lc.rows), "failures": sum(1 for r in lc.rows if not r[-1])}
    pp = parity_probe(steps=3 if fast else 4, families=("cycle3", "path4"))
    checks["parity_probe"] = {"records": len(pp.rows), "failures": int(not pp.ok)}
    res = ExperimentResult("selfcheck", ["check", "ok", "detail"])
    for name, st in checks.items():
        ok = st["failures"] == 0
        res.rows.append([name, ok, ";".join(f"{a}={b}" for a, b in st.items())])
        res.ok = res.ok and ok
    res.summary = {"passed": sum(r[1] for r in res.rows), "total": len(res.rows), "fast": fast}
    return res
