import math

import numpy as np
import pytest
from scipy import stats

from ssmarw.lattice import HaloSiteError, box, cycle, path, torus
from ssmarw.randomness import (InstructionField, RandomStream, TruncatedField, derive_seed,
                               enumerate_truncated_fields, trial_seed)

CHI_ALPHA = 1e-3
N = 10**6


def test_instruction_determinism_and_range():
    g = torus(5, 2)
    f = InstructionField(123)
    for x in range(0, g.n_sites, 3):
        for j in (1, 2, 7):
            y = f.instruction(g, x, j)
            assert y == f.instruction(g, x, j)
            assert y in g.nbr[x, : g.deg[x]]


def test_instruction_errors():
    g = box(2, 1)
    f = InstructionField(0)
    with pytest.raises(HaloSiteError):
        f.instruction(g, 0, 1)
    with pytest.raises(ValueError):
        f.instruction(g, g.origin(), 0)


def test_cycle_left_frequency():
    g = cycle(5)
    f = InstructionField(99)
    left = sum(f.instruction(g, 0, j) == 4 for j in range(1, 200_001))
    # sd of the frequency at 2e5 draws is 0.0011
    assert abs(left / 200_000 - 0.5) < 0.005


def test_instruction_chi_square_torus():
    g = torus(6, 2)  # four neighbours
    f = InstructionField(5)
    counts = np.zeros(4)
    for j in range(1, 50_001):
        for x in (0, 17):
            counts[list(g.nbr[x]).index(f.instruction(g, x, j))] += 1
    assert stats.chisquare(counts).pvalue > CHI_ALPHA


def test_truncated_field_pinned_and_missing():
    g = cycle(3)
    t = TruncatedField({(0, 1): 1})
    assert t.instruction(g, 0, 1) == 1
    with pytest.raises(IndexError):
        t.instruction(g, 0, 2)


def test_truncated_enumeration_weights():
    g = path(3)
    m = {0: 2, 1: 2, 2: 2}
    fields = list(enumerate_truncated_fields(g, m))
    assert len(fields) == math.prod(int(g.deg[x]) ** m[x] for x in m)
    assert sum(w for _, w in fields) == pytest.approx(1.0, abs=1e-12)
    assert len({tuple(sorted(f.table.items())) for f, _ in fields}) == len(fields)


def test_geometric_degenerate_and_errors():
    s = RandomStream(1)
    assert all(s.geometric(1.0) == 1 for _ in range(100))
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            s.geometric(bad)
    with pytest.raises(ValueError):
        s.poisson(0.0)
    with pytest.raises(ValueError):
        s.bernoulli(1.2)
    with pytest.raises(ValueError):
        s.sample("cauchy")


def test_stream_counter_advances_and_replays():
    a, b = RandomStream(7), RandomStream(7)
    xs = [a.uniform01() for _ in range(5)]
    assert a.counter == 5
    assert xs == [b.sample("uniform01") for _ in range(5)]
    assert len(set(xs)) == 5


def test_poisson_tail_rho0():
    s = RandomStream(2024)
    draws = np.array([s.poisson(0.8) for _ in range(N)])
    assert abs((draws >= 2).mean() - (1 - 1.8 * math.exp(-0.8))) < 0.002
    k = np.arange(0, 6)
    obs = np.array([(draws == i).sum() for i in k[:-1]] + [(draws >= 5).sum()])
    pmf = stats.poisson.pmf(k[:-1], 0.8)
    exp = np.append(pmf, 1 - pmf.sum()) * N
    assert stats.chisquare(obs, exp).pvalue > CHI_ALPHA


def test_bernoulli_eight_ninths():
    s = RandomStream(3)
    draws = np.array([s.bernoulli(8 / 9) for _ in range(N)])
    assert abs(draws.mean() - 8 / 9) < 0.002
    obs = np.array([(~draws).sum(), draws.sum()])
    assert stats.chisquare(obs, np.array([1 / 9, 8 / 9]) * N).pvalue > CHI_ALPHA


def test_geometric_law():
    s = RandomStream(4)
    q = 0.5
    draws = np.array([s.geometric(q) for _ in range(N)])
    assert draws.min() == 1
    k = np.arange(1, 15)
    pmf = (1 - q) ** (k - 1) * q
    obs = np.array([(draws == i).sum() for i in k] + [(draws > k[-1]).sum()])
    exp = np.append(pmf, 1 - pmf.sum()) * N
    assert stats.chisquare(obs, exp).pvalue > CHI_ALPHA


def test_uniform_law():
    s = RandomStream(5)
    draws = np.array([s.uniform01() for _ in range(N)])
    assert draws.min() >= 0 and draws.max() < 1
    obs, _ = np.histogram(draws, bins=20, range=(0, 1))
    assert stats.chisquare(obs).pvalue > CHI_ALPHA


def test_derived_seeds_distinct_and_stable():
    seeds = {trial_seed(1, "cmd", t) for t in range(1000)}
    assert len(seeds) == 1000
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
    assert derive_seed(1, "a", 2) != derive_seed(1, "a2")
    assert RandomStream(1).substream("x").uniform01() == RandomStream(derive_seed(1, "x")).uniform01()
