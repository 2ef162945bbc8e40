"""Counter-based random numbers.

Every draw is a pure function of ``(seed, key...)`` through a splitmix64-style
finaliser, so instruction fields are lazily infinite and trials can be run in
any order or in parallel. The numba helpers here are also called from the
simulation kernels.
"""
from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .lattice import Graph, HaloSiteError

_U64 = np.uint64
MASK64 = (1 << 64) - 1


@nb.njit(cache=True, inline="always")
def _fmix(z):
    z = z + _U64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


@nb.njit(cache=True)
def hash4(seed, a, b, c):
    """64-bit hash of four integer keys."""
    z = _fmix(_U64(seed))
    z = _fmix(z ^ (_U64(a) * _U64(0xD6E8FEB86659FD93)))
    z = _fmix(z ^ (_U64(b) * _U64(0xA0761D6478BD642F)))
    z = _fmix(z ^ (_U64(c) * _U64(0xE7037ED1A0B428DB)))
    return z


@nb.njit(cache=True)
def instruction_index(seed, x, j, deg):
    """Index into the neighbour list of ``x`` for its ``j``-th instruction.

    Uniform on ``0..deg-1`` by rejection of the top partial block.
    """
    d = _U64(deg)
    limit = (_U64(0xFFFFFFFFFFFFFFFF) // d) * d
    attempt = 0
    while True:
        h = hash4(seed, x, j, attempt)
        if h < limit:
            return np.int64(h % d)
        attempt += 1


@nb.njit(cache=True)
def uniform01(seed, stream, counter):
    """Uniform double in [0, 1) with 53 random bits."""
    h = hash4(seed, _U64(0x5EED), stream, counter)
    return np.float64(h >> _U64(11)) * (1.0 / 9007199254740992.0)


@nb.njit(cache=True)
def poisson_inv(u, mu):
    """Poisson(mu) quantile by sequential inversion: smallest k with F(k) > u."""
    p = math.exp(-mu)
    cdf = p
    k = 0
    while u >= cdf:
        k += 1
        p *= mu / k
        cdf += p
        if p == 0.0 and cdf <= u:
            break
    return k


def to_u64(v: int) -> int:
    return int(v) & MASK64


def derive_seed(seed: int, *labels) -> int:
    """Seed for a substream labelled by strings/ints, stable across runs and platforms."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(to_u64(seed)).encode())
    for lab in labels:
        h.update(b"\x1f")
        h.update(str(lab).encode())
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class InstructionField:
    """Lazily infinite i.i.d. field of uniform neighbour choices, keyed by ``seed``.

    Draws are indexed by lattice coordinate (``Graph.keys``), so two boxes of
    different radius see the same instructions on their common sites.
    """

    seed: int

    def instruction(self, g: Graph, x: int, j: int) -> int:
        """Target site of the ``j``-th instruction (``j >= 1``) at ``x``."""
        if g.halo[x]:
            raise HaloSiteError("absorbing site has no outgoing instructions")
        if j < 1:
            raise ValueError("instruction index starts at 1")
        k = instruction_index(_U64(to_u64(self.seed)), g.keys[x], j, int(g.deg[x]))
        return int(g.nbr[x, k])


@dataclass
class TruncatedField:
    """Explicit finite table ``(x, j) -> target``; reading outside it is an error."""

    table: dict = field(default_factory=dict)

    def instruction(self, g: Graph, x: int, j: int) -> int:
        if g.halo[x]:
            raise HaloSiteError("absorbing site has no outgoing instructions")
        try:
            return self.table[(x, j)]
        except KeyError:
            raise IndexError(f"instruction ({x}, {j}) is outside the truncated field") from None

    @property
    def odometer_bound(self) -> dict:
        m: dict = {}
        for (x, j) in self.table:
            m[x] = max(m.get(x, 0), j)
        return m


def enumerate_truncated_fields(g: Graph, m: dict):
    """All truncated fields with ``m[x]`` instructions at each site, with their weights.

    Yields ``(TruncatedField, weight)``; weights are ``prod (1/d_x)^m(x)``.
    """
    keys = [(x, j) for x in sorted(m) for j in range(1, m[x] + 1)]
    choices = [g.nbr[x, : g.deg[x]].tolist() for x, _ in keys]
    weight = math.prod(1.0 / g.deg[x] for x, _ in keys)
    for combo in itertools.product(*choices):
        yield TruncatedField(dict(zip(keys, combo))), weight


class RandomStream:
    """Single-owner stream of draws ``(seed, counter)``; ``counter`` advances per draw."""

    def __init__(self, seed: int, counter: int = 0, lane: int = 0):
        self.seed = to_u64(seed)
        self.counter = counter
        self.lane = lane

    def substream(self, *labels) -> "RandomStream":
        return RandomStream(derive_seed(self.seed, *labels))

    def uniform01(self) -> float:
        u = uniform01(_U64(self.seed), self.lane, self.counter)
        self.counter += 1
        return float(u)

    def bernoulli(self, p: float) -> bool:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"bernoulli parameter {p} outside [0, 1]")
        return self.uniform01() < p

    def geometric(self, q: float) -> int:
        """Geometric on {1, 2, ...}: P(k) = (1-q)^(k-1) q, by inversion."""
        if not 0.0 < q <= 1.0:
            raise ValueError(f"geometric parameter {q} outside (0, 1]")
        u = self.uniform01()
        if q == 1.0:
            return 1
        # 1 - u lies in (0, 1]; log(1) = 0 maps to k = 1
        return 1 + int(math.floor(math.log1p(-u) / math.log1p(-q)))

    def poisson(self, mu: float) -> int:
        if not mu > 0.0:
            raise ValueError(f"poisson parameter {mu} must be positive")
        if mu > 50.0:
            raise ValueError("inversion sampler is meant for small means (mu <= 50)")
        return int(poisson_inv(self.uniform01(), mu))

    def sample(self, dist: str, param: float | None = None):
        if dist == "uniform01":
            return self.uniform01()
        if dist == "poisson":
            return self.poisson(param)
        if dist == "bernoulli":
            return self.bernoulli(param)
        if dist == "geometric":
            return self.geometric(param)
        raise ValueError(f"unknown distribution {dist!r}")


def trial_seed(seed: int, command: str, trial: int) -> int:
    return derive_seed(seed, command, trial)
