"""Random environment: i.i.d. vehicle types, same-route links and propagation indices."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .spec import ModelSpec

BLOCK = 4096
NO_INDEX = -(2**62)  # marker for "no such index inside the sampled range"


class WindowError(RuntimeError):
    """A computation ran past the sampled index range."""


def _zigzag(b: int) -> int:
    return 2 * b if b >= 0 else -2 * b - 1


def _block_uniforms(seed: int, block: int) -> np.ndarray:
    ss = np.random.SeedSequence(int(seed), spawn_key=(_zigzag(block),))
    return np.random.default_rng(ss).random(BLOCK)


def sample_types(spec: ModelSpec, seed: int, lo: int, hi: int) -> np.ndarray:
    """Types Z_i for lo <= i <= hi. Pure function of (seed, weights, i): any window
    of the same seed sees the same environment."""
    cum = np.cumsum(spec.weights)
    cum[-1] = 1.0
    b_lo, b_hi = lo // BLOCK, hi // BLOCK
    u = np.concatenate([_block_uniforms(seed, b) for b in range(b_lo, b_hi + 1)])
    start = lo - b_lo * BLOCK
    u = u[start:start + hi - lo + 1]
    return np.searchsorted(cum, u, side="right").astype(np.int64).clip(0, len(cum) - 1)


def replicate_seed(seed: int, r: int) -> int:
    """Seed of replicate r, derived by hashing (seed, r) through SeedSequence."""
    state = np.random.SeedSequence(int(seed), spawn_key=(int(r),)).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


@dataclass(frozen=True, eq=False)
class Realization:
    """Types on [i_lo, i_ext] where i_ext >= i_hi is large enough for every
    index of the window [i_lo, i_hi] to have its same-route leader sampled."""

    seed: int
    shift: int
    i_lo: int
    i_hi: int
    i_ext: int
    z: np.ndarray          # types on [i_lo, i_ext]
    route: np.ndarray      # routes on [i_lo, i_ext]
    next_same: np.ndarray  # l_i on [i_lo, i_hi]
    prev_same: np.ndarray  # l_i^{-1} on [i_lo, i_ext], NO_INDEX when below i_lo

    def _pos(self, i):
        return np.asarray(i) - self.i_lo

    def type_of(self, i):
        return self.z[self._pos(i)]

    def route_of(self, i):
        return self.route[self._pos(i)]

    def leader(self, i):
        return self.next_same[self._pos(i)]

    def follower(self, i):
        return self.prev_same[self._pos(i)]

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.i_lo, self.i_ext + 1)

    def last_occurrence(self, K: int) -> np.ndarray:
        """last[k-1, p] = max{j <= i_lo + p : T_j = k} (NO_INDEX if none sampled)."""
        n = self.z.size
        out = np.full((K, n), NO_INDEX, dtype=np.int64)
        idx = self.indices
        for k in range(1, K + 1):
            hit = np.where(self.route == k, idx, NO_INDEX)
            out[k - 1] = np.maximum.accumulate(hit)
        return out


def sample_realization(spec: ModelSpec, seed: int, window, shift: int = 0, cap: int | None = None) -> Realization:
    """Sample types on the window (and beyond, until every route reappears).

    With ``shift = n`` the realization is that of the shifted environment,
    whose type at index i is the base environment's type at i + n.
    """
    i_lo, i_hi = int(window[0]), int(window[1])
    if i_hi < i_lo:
        raise ValueError("empty index window")
    length = i_hi - i_lo + 1
    if cap is None:
        cap = int(math.ceil(64.0 / spec.pi[1:].min() * math.log(max(length, 2))))
    K = spec.K
    routes_of_type = spec.routes
    ext = 0
    step = max(16, int(4 / spec.pi[1:].min()))
    while True:
        z = sample_types(spec, seed, i_lo + shift, i_hi + ext + shift)
        route = routes_of_type[z]
        tail = route[length:]
        if all(np.any(tail == k) for k in range(1, K + 1)):
            # trim to the first index after which every route has appeared
            firsts = [int(np.argmax(tail == k)) for k in range(1, K + 1)]
            ext = max(firsts) + 1
            z, route = z[: length + ext], route[: length + ext]
            break
        if ext >= cap:
            raise WindowError(f"extension cap of {cap} indices exceeded while looking for every route")
        ext = min(cap, ext + step)
        step *= 2
    n = z.size
    idx = np.arange(i_lo, i_lo + n)
    nxt = np.full(n, NO_INDEX, dtype=np.int64)
    prv = np.full(n, NO_INDEX, dtype=np.int64)
    for k in range(1, K + 1):
        pos = idx[route == k]
        m = route == k
        nn = np.empty(pos.size, dtype=np.int64)
        nn[:-1] = pos[1:]
        nn[-1] = NO_INDEX
        nxt[m] = nn
        pp = np.empty(pos.size, dtype=np.int64)
        pp[1:] = pos[:-1]
        if pos.size:
            pp[0] = NO_INDEX
        prv[m] = pp
    return Realization(seed=int(seed), shift=int(shift), i_lo=i_lo, i_hi=i_hi, i_ext=i_lo + n - 1,
                       z=z, route=route, next_same=nxt[:length], prev_same=prv)


def propagation_sequence(real: Realization, K: int, T: int, n: int) -> np.ndarray:
    """J_0(T), ..., J_n(T) with J_m = min_k max{i : T_i = k, l_i <= J_{m-1}}."""
    if not (real.i_lo <= T <= real.i_ext):
        raise WindowError("starting index outside the realization")
    last = real.last_occurrence(K)
    out = np.empty(n + 1, dtype=np.int64)
    out[0] = T
    J = T
    for m in range(1, n + 1):
        p = J - real.i_lo
        best = None
        for k in range(K):
            lk = last[k, p]
            # max{i: T_i = k, l_i <= J} is the follower of the last route-k index <= J
            cand = NO_INDEX if lk == NO_INDEX else real.prev_same[lk - real.i_lo]
            if cand == NO_INDEX or cand < real.i_lo:
                raise WindowError(f"propagation index left the window after {m - 1} steps; widen i_lo")
            best = cand if best is None else min(best, cand)
        J = int(best)
        out[m] = J
    return out


def propagation_index(real: Realization, K: int, T: int, n: int) -> int:
    return int(propagation_sequence(real, K, T, n)[-1])


@dataclass
class AlphaEstimate:
    alpha: float
    ci_halfwidth: float
    per_seed: np.ndarray
    n: int


def estimate_alpha(spec: ModelSpec, seeds, n: int) -> AlphaEstimate:
    """Mean single-step drop of the propagation index, normal 95% CI over seeds."""
    if n < 100:
        raise ValueError("n must be at least 100")
    seeds = list(seeds)
    width = int(n * 3.0 * spec.K / spec.pi[1:].min()) + 200
    means = []
    for s in seeds:
        w = width
        while True:
            real = sample_realization(spec, s, (-w, 0))
            try:
                J = propagation_sequence(real, spec.K, 0, n)
                break
            except WindowError:
                w *= 2
        means.append((J[0] - J[-1]) / n)
    means = np.array(means)
    ci = 1.96 * means.std(ddof=1) / math.sqrt(len(means)) if len(means) > 1 else float("nan")
    return AlphaEstimate(float(means.mean()), float(ci), means, n)
