import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmarw.lattice import (HaloSiteError, ball, box, cycle, diameter, graph_distances,
                            is_connected, neighbors, parse_graph, path, r_components, torus,
                            torus_distance)


def test_cycle_neighbors():
    assert neighbors(cycle(5), 0) == [4, 1]


def test_torus_neighbors_wrap():
    g = torus(3, 2)
    got = [g.coord(y) for y in neighbors(g, g.site((0, 0)))]
    assert got == [(2, 0), (1, 0), (0, 2), (0, 1)]


def test_box_boundary_neighbors_and_halo():
    g = box(1, 1)
    x = g.site((1,))
    nb = neighbors(g, x)
    assert [g.coord(y) for y in nb] == [(0,), (2,)]
    assert g.halo[g.site((2,))]
    with pytest.raises(HaloSiteError, match="absorbing site"):
        neighbors(g, g.site((2,)))


def test_halo_lists_point_inward():
    g = box(2, 2)
    for h in g.halo_sites:
        for y in g.nbr[h, : g.deg[h]]:
            assert not g.halo[y]


@pytest.mark.parametrize("g", [torus(4, 2), torus(5, 3), cycle(7), box(3, 2), path(5)])
def test_coordinate_round_trip_and_symmetry(g):
    for x in range(g.n_sites):
        assert g.site(g.coord(x)) == x
    for x in range(g.n_sites):
        if g.halo[x]:
            continue
        for y in g.nbr[x, : g.deg[x]]:
            if not g.halo[y]:
                assert x in g.nbr[y, : g.deg[y]].tolist()


def test_degrees():
    assert all(torus(4, 3).deg == 6)
    assert all(cycle(9).deg == 2)
    g = box(3, 2)
    assert all(g.deg[~g.halo] == 4)
    p = path(4)
    assert p.deg.tolist() == [1, 2, 2, 1]


@pytest.mark.parametrize("a,b,expected", [((0, 0), (4, 4), 1), ((0, 0), (2, 1), 2)])
def test_torus_distance_examples(a, b, expected):
    g = torus(5, 2)
    assert torus_distance(g, g.site(a), g.site(b)) == expected


def test_torus_distance_1d_and_errors():
    g = torus(7, 1)
    assert torus_distance(g, 0, g.site((3,))) == 3
    with pytest.raises(ValueError):
        torus_distance(box(2, 1), 0, 1)


@given(st.integers(3, 9), st.integers(1, 2), st.data())
@settings(max_examples=50, deadline=None)
def test_torus_distance_metric(n, d, data):
    g = torus(n, d)
    x, y, z = (data.draw(st.integers(0, g.n_sites - 1)) for _ in range(3))
    dxy = torus_distance(g, x, y)
    assert dxy == torus_distance(g, y, x)
    assert (dxy == 0) == (x == y)
    assert dxy <= n // 2
    assert torus_distance(g, x, z) <= dxy + torus_distance(g, y, z)


def test_ball_examples():
    g = torus(5, 2)
    assert len(ball(g, g.site((0, 0)), 1, "inf")) == 9
    b = box(3, 1)
    got = sorted(b.coord(y)[0] for y in ball(b, b.origin(), 2))
    assert got == [-2, -1, 0, 1, 2]
    for gg in (g, b, cycle(5)):
        assert ball(gg, 0, 0) == {0}


@pytest.mark.parametrize("n", [3, 5, 8, 9])
def test_ball_inf_matches_filter(n):
    g = torus(n, 2)
    for x in range(g.n_sites):
        for r in range(0, n // 2 + 1):
            direct = {y for y in range(g.n_sites) if torus_distance(g, x, y) <= r}
            assert ball(g, x, r, "inf") == direct
    assert len(ball(g, 0, 1, "inf")) == 9


def test_ball_monotone_in_r():
    g = box(4, 2)
    prev = set()
    for r in range(6):
        cur = ball(g, g.origin(), r)
        assert prev <= cur
        prev = cur


def test_r_components_examples():
    g = torus(9, 2)
    A = {g.site((0, 0)), g.site((0, 2))}
    assert len(r_components(g, A, 2)) == 1
    A = {g.site((0, 0)), g.site((0, 4))}
    assert len(r_components(g, A, 2)) == 2
    assert r_components(g, set(), 2) == []


@given(st.sets(st.integers(0, 48), max_size=12), st.integers(1, 3))
@settings(max_examples=60, deadline=None)
def test_r_components_partition(A, r):
    g = torus(7, 2)
    comps = r_components(g, A, r)
    assert set().union(*comps) == A if comps else not A
    assert sum(len(c) for c in comps) == len(A)
    for c0, c1 in itertools.combinations(comps, 2):
        assert min(torus_distance(g, x, y) for x in c0 for y in c1) > r


def test_diameter_examples():
    g = torus(5, 2)
    assert diameter(g, {3}) == 0
    assert diameter(g, {g.site((0, 0)), g.site((1, 1))}) == 1
    assert diameter(g, range(g.n_sites)) == 2
    with pytest.raises(ValueError):
        diameter(g, set())


def test_parse_graph():
    assert parse_graph("torus:n=32,d=2").n_sites == 1024
    assert parse_graph("box:L=50,d=1").size == 50
    assert parse_graph("cycle:n=100").n_sites == 100
    with pytest.raises(ValueError):
        parse_graph("sphere:n=3")
    with pytest.raises(ValueError):
        parse_graph("torus:d=2")


def test_keys_shared_across_box_sizes():
    a, b = box(3, 2), box(7, 2)
    for x in range(a.n_sites):
        assert a.keys[x] == b.keys[b.site(a.coord(x))]
    assert len(set(b.keys.tolist())) == b.n_sites


def test_graph_distances_and_connectivity():
    g = path(5)
    assert graph_distances(g, 0).tolist() == [0, 1, 2, 3, 4]
    assert is_connected(g, {1, 2, 3})
    assert not is_connected(g, {0, 2})
    assert not is_connected(g, set())
