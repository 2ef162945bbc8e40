"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or directly as a script.
"""
import sys
import time

import numpy as np
import pytest

from ssmarw import analysis as an
from ssmarw import cli
from ssmarw import experiments as ex
from ssmarw.lattice import box, cycle

SEED = 2026
THREADS = 4


def c1_abelian():
    t = time.time()
    st = ex.abelian_check(200, 100, SEED, max_nodes=10**5)
    dt = time.time() - t
    ok = st["failures"] == 0 and st["instances"] >= 200 and dt < 60
    return ok, f"{st['instances']} instances, {st['enumerated']} enumerated, {st['failures']} failures, {dt:.1f}s"


def c2_full_half_astab():
    st = ex.astab_lemma_check(300, SEED)
    ok = st["failures"] == 0 and st["qualifying"] > 0
    return ok, f"{st['qualifying']} qualifying instances, {st['failures']} mismatches"


def c3_upsilon():
    t = time.time()
    rows = ex.upsilon_table(range(1, 11))
    line_err = max(abs(line - 1 / (2 * r)) for r, n, fin, closed, line in rows)
    closed_err = max(abs(fin - closed) for r, n, fin, closed, line in rows)
    above = all(fin >= line - 1e-12 for r, n, fin, closed, line in rows)
    dt = time.time() - t
    ok = line_err <= 1e-10 and closed_err <= 1e-10 and above and dt < 5
    return ok, (f"line value err {line_err:.1e}; finite cycles match 1/(2r)+1/(2(n-r)) "
                f"to {closed_err:.1e} and lie above 1/(2r); {dt:.2f}s")


def c4_green():
    g = box(1, 1)
    G = an.green_function(g, g.active_sites)
    o = g.origin()
    e00 = abs(G(o, o) - 2.0)
    e10 = abs(G(g.site((1,)), o) - 1.0)
    errs = [err for _, _, err in ex.green_window_checks(50, SEED)]
    ok = e00 <= 1e-10 and e10 <= 1e-10 and len(errs) == 50 and max(errs) <= 1e-9
    return ok, f"G(0,0) err {e00:.1e}, G(1,0) err {e10:.1e}, worst window rel err {max(errs):.1e}"


def c5_weak():
    t = time.time()
    parts, ok = [], True
    for mu in (0.6, 0.8):
        res = ex.weak_probe(8, mu, 10_000, SEED, threads=THREADS)
        s = res.summary
        ok = ok and res.ok
        parts.append(f"mu={mu}: P(A)={s['p_A']:.4f} >= 1/8 - {s['p_m_zero']:.4f} - 3*{s['se']:.4f}")
    dt = time.time() - t
    return ok and dt < 120, "; ".join(parts) + f"; {dt:.1f}s"


def c6_domination():
    t = time.time()
    g = cycle(6)
    blocked = ex.domination(g, range(6), [0, 2, 4], np.array([2, 1, 1, 1, 1, 0]), 10_000, SEED,
                         threads=THREADS)
    fin = ex.domination(g, range(5), [0, 2, 4], np.array([2, 1, 1, 1, 0, 0]), 10_000, SEED,
                        threads=THREADS)
    dt = time.time() - t
    ok = blocked.ok and fin.ok and dt < 300
    return ok, (f"eta=(2,1,1,1,1,0): SSM size infinite (parity), not rejected={blocked.ok}; "
                f"A={{0..4}}, eta=(2,1,1,1,0,0): max violation "
                f"{fin.summary['max_violation']:.4f} vs threshold {fin.summary['threshold']:.4f}; "
                f"{dt:.1f}s")


def c7_parity():
    t = time.time()
    res = ex.parity_probe(steps=4)
    dt = time.time() - t
    ok = res.ok and res.summary["records"] > 0 and dt < 120
    return ok, (f"{res.summary['instances']} instances, {res.summary['records']} records, "
                f"min pi {res.summary['min_pi']} vs 1/9; {dt:.1f}s")


def c8_geometric():
    grid = [0.1, 0.3, 0.5, 0.7, 0.9]
    dev = max(an.composition_max_deviation(a, b) for a in grid for b in grid)
    verdicts = {c: an.bernoulli_geometric_domination_check(0.05, 1e-5, 100_000, SEED, c)
                for c in ("independent", "countermonotone")}
    ok = dev <= 1e-8 and not any(v.rejected for v in verdicts.values())
    return ok, (f"composition max dev {dev:.1e}; "
                + ", ".join(f"{c}: viol {v.max_violation:.4f} <= {v.threshold:.4f}"
                            for c, v in verdicts.items()))


def c9_hierarchy():
    res = ex.hierarchy_check(100, SEED, threads=THREADS)
    s = res.summary
    ok = res.ok and s["invalid"] == 0 and len(res.rows) == 100
    return ok, f"valid {s['valid']}, failed loudly {s['failed']}, invalid {s['invalid']}"


def c10_torus_time():
    t = time.time()
    res = ex.torus_time([8, 12, 16, 20], 0.95, 200, SEED, threads=THREADS)
    fit = res.summary["fit"]
    dt = time.time() - t
    ok = (fit is not None and fit["slope"] > 3 * fit["slope_se"]
          and res.summary["strictly_increasing"] and dt < 600)
    return ok, (f"medians {res.summary['medians']}, slope {fit['slope']:.4f} "
                f"(se {fit['slope_se']:.4f}, z {fit['z']:.1f}); {dt:.1f}s")


def c11_confinement():
    g, A, eta, h2 = ex.default_confinement_instance()
    res = ex.confinement_probe(g, A, eta, h2, 100_000, SEED, threads=THREADS)
    s = res.summary
    return res.ok, f"no-exit p={s['p_no_exit']:.4f} (se {s['se']:.4f}) vs bound {s['bound']:.4f}"


def c12_fixation():
    mus = [0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.5]
    res = ex.fixation_scan(mus, [40], 1000, SEED, threads=THREADS)
    frac = {row[0]: row[3] for row in res.rows}
    mono = all(frac[a] <= frac[b] for a, b in zip(mus, mus[1:]))
    ok = mono and frac[0.1] <= 0.05 and frac[1.5] >= 0.95
    return ok, f"L=40 activity {[round(frac[m], 3) for m in mus]}, monotone={mono}"


DETERMINISM = {
    "selfcheck": {},
    "fixation-scan": {"mus": [0.3, 0.9, 1.5], "Ls": [10, 20], "trials": 200},
    "torus-time": {"ns": [8, 12], "trials": 100},
    "weak-probe": {"trials": 2000},
    "domination": {"A": "0,1,2,3,4", "eta": "2,1,1,1,0,0", "trials": 2000},
    "confinement-probe": {"trials": 20_000},
    "hierarchy-check": {"instances": 24},
    "parity-probe": {"steps": 3},
    "ghost-probe": {"trials": 1000},
    "lemma-checks": {},
}


def c13_determinism():
    bad = []
    for sub, over in DETERMINISM.items():
        cfg = cli.ExperimentConfig(sub, SEED, dict(cli.DEFAULTS[sub], **over))
        outs = [cli.render_csv(cfg, cli.run(cfg, threads=t)) for t in (1, THREADS, 1)]
        if len(set(outs)) != 1:
            bad.append(sub)
    return not bad, f"{len(DETERMINISM)} subcommands, threads 1/{THREADS}/1, mismatched: {bad or 'none'}"


CRITERIA = [
    (1, "abelian property", c1_abelian),
    (2, "full/half and A-stabilisation lemma", c2_full_half_astab),
    (3, "hitting probability 1/(2r)", c3_upsilon),
    (4, "Green identities", c4_green),
    (5, "weak-stabilisation inequality", c5_weak),
    (6, "stochastic domination", c6_domination),
    (7, "parity lower bound", c7_parity),
    (8, "geometric lemmas", c8_geometric),
    (9, "hierarchy validator", c9_hierarchy),
    (10, "exponential torus time", c10_torus_time),
    (11, "confinement bound", c11_confinement),
    (12, "fixation bracketing", c12_fixation),
    (13, "determinism", c13_determinism),
]


def _line(k, name, ok, detail):
    return f"{'PASS' if ok else 'FAIL'} criterion {k} ({name}): {detail}"


@pytest.mark.parametrize("k,name,fn", CRITERIA, ids=[f"c{k}" for k, _, _ in CRITERIA])
def test_criterion(k, name, fn, capsys):
    ok, detail = fn()
    with capsys.disabled():
        print("\n" + _line(k, name, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    failures = 0
    for k, name, fn in CRITERIA:
        ok, detail = fn()
        failures += not ok
        print(_line(k, name, ok, detail), flush=True)
    sys.exit(1 if failures else 0)
