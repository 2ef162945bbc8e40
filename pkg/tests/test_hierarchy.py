import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmarw.arwd_engine import SubsetConfig, run_arwd
from ssmarw.hierarchy import (ColorSequence, HierarchyError, ParameterPack, PingPong,
                              build_hierarchy, build_trivial_hierarchy, cluster_radius,
                              diameter_budget, literal_f, literal_T, mask_case,
                              random_settling_set, run_hierarchy_arwd, sleep_mask_g,
                              strategy_f, toppling_procedure_pC, validate_hierarchy)
from ssmarw.lattice import SiteSet, diameter, r_components, torus
from ssmarw.randomness import RandomStream


def _band(g, xs):
    return SiteSet(x for x in range(g.n_sites) if g.coords[x, 0] in xs)


@pytest.fixture(scope="module")
def two_blobs():
    g = torus(24, 2)
    A = _band(g, set(range(0, 7)) | set(range(12, 19)))
    return g, A, build_hierarchy(g, A, 2, 0.5)


def test_parameter_formulas():
    assert cluster_radius(2, 0.5) == 4
    assert diameter_budget(0, 2, 4) == 96
    assert diameter_budget(1, 2, 4) == 576
    pack = ParameterPack(2, 0.5, 8.0)
    assert pack.r == 4 and pack.D(0) == 96
    assert pack.rho0 == pytest.approx(1 - 1.8 * math.exp(-0.8))
    assert pack.beta == pytest.approx(pack.rho0 / 2)
    d = pack.to_dict(levels=1)
    assert len(d["feasibility"]) == 2 and d["D"] == [96, 576]


def test_single_blob_is_level_zero():
    g = torus(24, 2)
    A = _band(g, set(range(0, 14)))
    h = build_hierarchy(g, A, 2, 0.5)
    assert h.L == 0 and len(h.levels[0]) == 1
    assert h.root.sites == A and h.root.distinguished == min(A)


def test_two_blobs_merge_once(two_blobs):
    g, A, h = two_blobs
    assert h.L == 1
    assert len(h.levels[0]) == 2 and len(h.levels[1]) == 1
    root = h.root
    assert root.merged and root.sites == A
    c0, c1 = (h.clusters[c] for c in root.children)
    assert root.distinguished in (c0.distinguished, c1.distinguished)
    assert diameter(g, root.sites) <= h.D[0]
    validate_hierarchy(h, 0.5)


def test_json_dump(two_blobs):
    _, _, h = two_blobs
    d = json.loads(h.to_json())
    assert d["L"] == 1 and len(d["clusters"]) == 3
    assert {c["parent"] for c in d["clusters"]} == {None, 2}


def test_build_errors():
    g = torus(24, 2)
    with pytest.raises(HierarchyError) as e:
        build_hierarchy(g, SiteSet(range(10)), 2, 0.5)
    assert e.value.clause == "precondition"
    from ssmarw.lattice import box
    with pytest.raises(ValueError):
        build_hierarchy(box(3, 2), SiteSet([0]), 2, 0.5)


def test_validator_catches_tampering(two_blobs):
    g, A, h = two_blobs
    import copy
    bad = copy.deepcopy(h)
    bad.clusters[bad.root.cid].distinguished = 10**6  # not inherited from a child
    with pytest.raises(HierarchyError, match="distinguished"):
        validate_hierarchy(bad)


def test_trivial_hierarchy():
    g = torus(5, 2)
    h = build_trivial_hierarchy(g, {7})
    assert h.L == 0 and h.root.sites == {7}
    full = build_trivial_hierarchy(g, range(g.n_sites))
    assert len(full.levels[0]) == 1
    validate_hierarchy(full)
    with pytest.raises(ValueError):
        build_trivial_hierarchy(g, set())


@given(st.sampled_from([24, 32]), st.sampled_from([0.5, 0.7]), st.sampled_from([2, 4]),
       st.sampled_from(["stripes", "blobs", "uniform"]), st.integers(0, 2**40))
@settings(max_examples=25, deadline=None)
def test_random_hierarchies_valid_or_loud(n, mu, v, kind, seed):
    g = torus(n, 2)
    r = cluster_radius(v, mu)
    A = random_settling_set(g, mu, RandomStream(seed), kind, r)
    assert len(A) >= mu * g.n_sites
    try:
        h = build_hierarchy(g, A, v, mu)
    except HierarchyError as e:
        assert e.clause  # loud failure names the clause
        return
    validate_hierarchy(h, mu)
    assert len(h.A_level(h.L)) >= len(h.A) / 4
    for cid in h.levels[0]:
        assert len(r_components(g, h.clusters[cid].sites, r)) == 1
    for c in h.clusters:
        if c.merged:
            kids = [h.clusters[k] for k in c.children]
            big = max(kids, key=lambda k: len(k.sites))
            assert c.distinguished == big.distinguished or len(kids[0].sites) == len(kids[1].sites)


# --- toppling procedure -----------------------------------------------------


def test_pC_prefers_distinguished(two_blobs):
    g, A, h = two_blobs
    C = h.clusters[h.levels[0][0]]
    U = {C.distinguished, max(C.sites)}
    assert toppling_procedure_pC(g, C, U, h.v, h.r) == C.distinguished


def test_pC_no_sleepers_is_canonical_min(two_blobs):
    g, A, h = two_blobs
    C = h.clusters[h.levels[0][0]]
    U = C.sites - {C.distinguished}
    assert toppling_procedure_pC(g, C, U, h.v, h.r) == min(U)


def test_pC_prefers_sleeper_neighbourhood():
    # a segment of 100 sites; the active site near the middle sees more sleepers
    g = torus(200, 2)
    from ssmarw.hierarchy import Cluster
    row = [g.site((x, 0)) for x in range(100)]
    C = Cluster(0, 0, SiteSet(row), row[0])
    U = {row[10], row[80]}
    # ball radius 16 v r = 32: row[10] sees 42 sleepers, row[80] sees 51
    assert toppling_procedure_pC(g, C, U, 1, 2) == row[80]


def test_pC_errors(two_blobs):
    g, A, h = two_blobs
    C = h.clusters[h.levels[0][0]]
    with pytest.raises(ValueError):
        toppling_procedure_pC(g, C, set(), h.v, h.r)
    other = h.clusters[h.levels[0][1]]
    with pytest.raises(ValueError):
        toppling_procedure_pC(g, C, {min(other.sites)}, h.v, h.r)


# --- strategy and mask ------------------------------------------------------


def test_strategy_empty_top_level(two_blobs):
    g, A, h = two_blobs
    f, dyn = strategy_f(h)
    cfg = SubsetConfig(SiteSet(), A).to_config(g)
    assert f(cfg, 0) is None


def test_strategy_level_zero_delegates():
    g = torus(24, 2)
    A = _band(g, set(range(0, 14)))
    h = build_hierarchy(g, A, 2, 0.5)
    f, dyn = strategy_f(h)
    U = SiteSet(sorted(A)[5:30])
    got = f(SubsetConfig(U, A).to_config(g), 0)
    C = h.root
    assert got == toppling_procedure_pC(g, C, U, h.v, h.r)


def test_strategy_switches_to_unstable_child(two_blobs):
    g, A, h = two_blobs
    c0, c1 = (h.clusters[k] for k in h.root.children)
    a0, a1 = min(c0.sites), min(c1.sites)
    history = [SiteSet({a0, a1}), SiteSet({a0, a1}), SiteSet({a0, a1}), SiteSet({a1})]
    f, dyn = strategy_f(h)
    picks = [f(SubsetConfig(U, A).to_config(g), t) for t, U in enumerate(history)]
    assert picks[-1] in c1.sites  # C0 just became stable, C1 is not
    assert literal_T(history, c0.sites) == 3 and literal_T(history, c1.sites) == -math.inf
    assert picks[-1] == literal_f(h, history, dyn.procs)


def test_mask_cases(two_blobs):
    g, A, h = two_blobs
    root = h.root
    winner = root.distinguished
    loser = next(h.clusters[k].distinguished for k in root.children
                 if h.clusters[k].distinguished != winner)
    plain = next(x for x in sorted(A) if h.distinguished_top(x) < 0)
    ever = {c.cid: False for c in h.clusters}
    assert mask_case(h, plain, 0, ever) == 4
    assert mask_case(h, loser, 1, ever) == 3
    assert mask_case(h, winner, 0, ever) == 1
    ever[h.cluster_of(winner, 0).cid] = True
    assert mask_case(h, winner, 0, ever) == 2
    dyn = PingPong(h)
    assert dyn.mask(plain, 0) == h.cluster_of(plain, 0).sites
    assert dyn.mask(loser, 1) == SiteSet()
    assert dyn.mask(winner, 0) == SiteSet()


def test_mask_cases_exhaustive(two_blobs):
    g, A, h = two_blobs
    for ever_val in (False, True):
        ever = {c.cid: ever_val for c in h.clusters}
        for x in sorted(A)[::7]:
            for j in range(4):
                assert mask_case(h, x, j, ever) in (1, 2, 3, 4)


def test_incremental_strategy_matches_literal(two_blobs):
    g, A, h = two_blobs
    f, dyn = strategy_f(h)
    history = []
    mismatches = 0

    def wrapped(cfg, t):
        nonlocal mismatches
        history.append(SiteSet(x for x in A if cfg[x] == 1))
        x = f(cfg, t)
        mismatches += int(x != literal_f(h, history, dyn.procs))
        return x

    stream = RandomStream(3)
    U0 = SiteSet(x for x in sorted(A) if stream.uniform01() < 0.3)
    run_arwd(g, A, 8.0, wrapped, SubsetConfig(U0, A).to_config(g), 5, cap=400,
             mask=sleep_mask_g(h, ColorSequence(5), dyn))
    assert len(history) > 50 and mismatches == 0


def test_color_sequence_law():
    c = ColorSequence(1)
    vals = np.array([c[t] for t in range(20_000)])
    assert vals.min() == 0
    assert abs((vals == 0).mean() - 0.5) < 0.02
    assert c[5] == vals[5]


def test_run_hierarchy_arwd(two_blobs):
    g, A, h = two_blobs
    run = run_hierarchy_arwd(h, 8.0, SiteSet(sorted(A)[:10]), seed=2, cap=10**5)
    assert run.status in ("stabilised", "capped")
    assert run.T >= run.hstar >= 0
