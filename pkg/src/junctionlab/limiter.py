"""Flux-limiter estimation from flat-datum runs, and the probabilistic diagnostics
built on the crossing count: concentration, superadditivity, corrector and
truncated environment."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .micro_sim import (
    SimConfig, flat_initial_condition, integrate, replicate_seeds, run_theta,
    theta_observer, theta_window,
)
from .model.environment import Realization, sample_realization


def ls_slope(t, y, axis=-1):
    """Least-squares slope of y against t along ``axis``."""
    t = np.asarray(t, dtype=float)
    y = np.moveaxis(np.asarray(y, dtype=float), axis, -1)
    tc = t - t.mean()
    return (y - y.mean(axis=-1, keepdims=True)) @ tc / (tc @ tc)


def tail_mask(times, T: float, start: float = 0.5):
    return (times >= start * T - 1e-12) & (times <= T + 1e-12)


# --- superadditivity --------------------------------------------------------

@dataclass
class SuperadditivityReport:
    h: np.ndarray               # test rates
    times: np.ndarray
    M: np.ndarray               # (H, S) running infimum of theta_bar - h t
    k: np.ndarray               # (H,) tail slopes of M
    k_se: np.ndarray            # (H,) jackknife standard errors (nan with one replicate)
    k_e: float
    h_star: float
    k_e_se: float
    negative: bool              # dichotomy branch k_e < 0
    implied_A: float | None
    defects: np.ndarray         # (S, S) M(t+s) - M(t) - M(s) at h_star, nan off the grid
    monotone_in_h: bool

    @property
    def min_defect(self) -> float:
        return float(np.nanmin(self.defects))


def _running_inf(theta_bar, times, h):
    return np.minimum.accumulate(theta_bar[None, :] - h[:, None] * times[None, :], axis=1)


def superadditivity_diagnostic(times, theta, eff, h_grid=None, tail: float = 0.5) -> SuperadditivityReport:
    """M(t) = inf_{s <= t} theta_bar(s) - h s for each h in the grid.

    ``theta`` is either the mean curve (S,) or replicate curves (S, R); with
    replicates the tail slopes get jackknife standard errors.  k_e is the
    smallest tail slope over the grid; it is declared negative when below
    -max(3 SE, 1/T), the second term being the resolution of an integer count.
    """
    times = np.asarray(times, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        theta = theta[:, None]
    rate_cap = -eff.A0
    if h_grid is None:
        h_grid = rate_cap * np.linspace(0.5, 0.99, 11)
    h = np.sort(np.asarray(h_grid, dtype=float))
    if np.any(h >= rate_cap) or np.any(h <= 0):
        raise ValueError(f"test rates must lie in (0, {rate_cap})")
    T = float(times[-1])
    mask = tail_mask(times, T, tail)
    bar = theta.mean(axis=1)
    M = _running_inf(bar, times, h)
    k = ls_slope(times[mask], M[:, mask])
    R = theta.shape[1]
    if R > 1:
        jk = np.empty((R, h.size))
        for r in range(R):
            b = np.delete(theta, r, axis=1).mean(axis=1)
            jk[r] = ls_slope(times[mask], _running_inf(b, times, h)[:, mask])
        k_se = np.sqrt((R - 1) / R * ((jk - jk.mean(axis=0)) ** 2).sum(axis=0))
    else:
        k_se = np.full(h.size, np.nan)
    a = int(np.argmin(k))
    k_e, h_star = float(k[a]), float(h[a])
    se = float(k_se[a]) if np.isfinite(k_se[a]) else 0.0
    negative = k_e < -max(3.0 * se, 1.0 / T)
    S = times.size
    D = np.full((S, S), np.nan)
    Ms = M[a]
    for i in range(S):
        j = np.arange(S - i)
        D[i, j] = Ms[i + j] - Ms[i] - Ms[j]
    mono = bool(np.all(np.diff(M, axis=0) <= 1e-12))
    return SuperadditivityReport(h, times, M, k, k_se, k_e, h_star, se, bool(negative),
                                 -(k_e + h_star) if negative else None, D, mono)


# --- limiter estimate -------------------------------------------------------

@dataclass
class LimiterEstimate:
    A_hat: float                 # minus the tail slope of the mean crossing count
    ci_halfwidth: float
    per_replicate: np.ndarray    # replicate tail slopes
    T: float
    R: int
    window: tuple                # regression window (t0, T)
    A0: float
    reported: float              # dichotomy branch applied, clamped to [A0, 0]
    k_negative: bool
    times: np.ndarray = field(repr=False, default=None)
    theta_mean: np.ndarray = field(repr=False, default=None)
    theta_std: np.ndarray = field(repr=False, default=None)
    superadditivity: SuperadditivityReport | None = field(repr=False, default=None)
    seeds: list = field(repr=False, default_factory=list)
    spec_digest: str = ""

    @property
    def contains(self):
        return lambda a: abs(a - self.A_hat) <= self.ci_halfwidth

    def to_dict(self) -> dict:
        return {
            "estimate": self.A_hat,
            "ci_halfwidth": self.ci_halfwidth,
            "reported": self.reported,
            "k_e_negative": self.k_negative,
            "A0": self.A0,
            "R": self.R,
            "T": self.T,
            "regression_window": list(self.window),
            "seeds": [int(s) for s in self.seeds],
            "spec_digest": self.spec_digest,
        }


def limiter_from_theta(times, theta, eff, T: float | None = None, seeds=(), spec_digest="") -> LimiterEstimate:
    """Estimate from crossing-count curves theta (S, R) sampled at ``times``."""
    times = np.asarray(times, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise FloatingPointError("non-finite crossing counts")
    T = float(times[-1]) if T is None else float(T)
    mask = tail_mask(times, T)
    slopes = ls_slope(times[mask], theta[mask].T)
    bar = theta.mean(axis=1)
    slope = float(ls_slope(times[mask], bar[mask]))
    R = theta.shape[1]
    se = float(slopes.std(ddof=1) / math.sqrt(R)) if R > 1 else 0.0
    ci = 1.96 * se + 1.0 / T
    sup = superadditivity_diagnostic(times[times <= T + 1e-12], theta[times <= T + 1e-12], eff)
    A_hat = -slope
    reported = float(np.clip(A_hat, eff.A0, 0.0)) if sup.negative else float(eff.A0)
    return LimiterEstimate(A_hat, ci, slopes, T, R, (0.5 * T, T), float(eff.A0), reported, sup.negative,
                           times, bar, theta.std(axis=1, ddof=1) if R > 1 else np.zeros_like(bar), sup,
                           list(seeds), spec_digest)


def estimate_flux_limiter(spec, law, eff, R: int = 64, T_est: float = 200.0, seed: int = 0, seeds=None,
                          sample_dt: float = 1.0, window=None, dt=None, workers: int = 1) -> LimiterEstimate:
    """Flat-datum runs of R replicates to T_est; minus the tail slope of the mean crossing count."""
    if seeds is None:
        seeds = replicate_seeds(seed, R)
    seeds = list(seeds)
    if len(seeds) < 8:
        raise ValueError("at least 8 replicates are needed")
    times, th, _ = run_theta(spec, law, eff, seeds, T_est, sample_dt, window=window, dt=dt, workers=workers)
    return limiter_from_theta(times, th, eff, T_est, seeds, spec.digest())


# --- concentration ----------------------------------------------------------

@dataclass
class ConcentrationReport:
    times: np.ndarray
    sigma: np.ndarray
    sigma_over_t: np.ndarray
    slope: float | None
    decreasing: bool
    degenerate: bool
    R: int


def concentration_from_samples(times, samples) -> ConcentrationReport:
    """samples: (len(times), R) crossing counts."""
    times = np.asarray(times, dtype=float)
    samples = np.asarray(samples, dtype=float)
    R = samples.shape[1]
    if R < 2:
        nan = np.full(times.size, np.nan)
        return ConcentrationReport(times, nan, nan, None, False, True, R)
    sigma = samples.std(axis=1, ddof=1)
    sot = sigma / times
    degenerate = bool(np.any(sigma <= 0))
    slope = None if degenerate else float(np.polyfit(np.log(times), np.log(sigma), 1)[0])
    dec = bool(np.all(np.diff(sot) < 0))
    return ConcentrationReport(times, sigma, sot, slope, dec, degenerate, R)


def concentration_diagnostic(spec, law, eff, R: int, times, seed: int = 0, window=None, dt=None,
                             workers: int = 1) -> ConcentrationReport:
    times = np.asarray(sorted(times), dtype=float)
    if R < 2:
        return concentration_from_samples(times, np.zeros((times.size, max(R, 0))))
    step = float(np.gcd.reduce(np.round(times).astype(np.int64)))
    if not np.allclose(times, np.round(times)):
        step = float(times[0])
    grid, th, _ = run_theta(spec, law, eff, replicate_seeds(seed, R), float(times[-1]), step,
                            window=window, dt=dt, workers=workers)
    idx = [int(np.argmin(np.abs(grid - t))) for t in times]
    return concentration_from_samples(times, th[idx])


# --- corrector ----------------------------------------------------------------

@dataclass
class CorrectorSequence:
    anchor: int
    j: np.ndarray          # indices relative to the anchor, -n..n
    W: np.ndarray
    route: np.ndarray
    e: np.ndarray
    e_max: float

    def at(self, j):
        return self.W[np.asarray(j) - self.j[0]]

    def increments_ok(self) -> bool:
        """0 < W_{i+1} - W_i <= e_max for i + 1 <= 0, and 0 < W_{l_i} - W_i <= e_max for l_i >= 1."""
        neg = self.j <= 0
        d = np.diff(self.W[neg])
        ok = bool(np.all((d > 0) & (d <= self.e_max + 1e-12)))
        for k in np.unique(self.route):
            if k == 0:
                continue
            sel = (self.route == k) & (self.j >= 0)
            d = np.diff(self.W[sel])
            ok &= bool(np.all((d > 0) & (d <= self.e_max + 1e-12)))
        return ok

    def lipschitz_violations(self, tol: float = 1e-9, block: int = 1024):
        """Exhaustive pair check of |W_i - W_j| <= e_max |i - j| when T_i = T_j or i ^ j <= 0.

        Returns (number of violating pairs, largest excess)."""
        n = self.j.size
        bad, worst = 0, -np.inf
        # j is increasing, so for pairs (i, j) with j > i: i ^ j <= 0 iff i <= 0
        for a in range(0, n - 1, block):
            b = min(n, a + block)
            Wj, jj, rj = self.W[a:], self.j[a:], self.route[a:]
            excess = np.abs(self.W[a:b, None] - Wj[None, :]) - self.e_max * (jj[None, :] - self.j[a:b, None])
            applies = (self.route[a:b, None] == rj[None, :]) | (self.j[a:b, None] <= 0)
            applies &= jj[None, :] > self.j[a:b, None]
            excess[~applies] = -np.inf
            bad += int(np.count_nonzero(excess > tol))
            worst = max(worst, float(excess.max()))
        return bad, worst

    def slopes(self) -> dict:
        """W_{-n}/(-n) for road 0 and W_j/j at the last route-k index j <= n."""
        out = {0: float(self.W[0] / self.j[0])}
        for k in range(1, int(self.route.max()) + 1):
            sel = np.flatnonzero((self.route == k) & (self.j > 0))
            if sel.size:
                p = sel[-1]
                out[k] = float(self.W[p] / self.j[p])
        return out


def build_corrector(spec, real: Realization, eff, anchor: int = 0, n: int = 10_000) -> CorrectorSequence:
    """W_0 = 0; backward through incoming-profile inverses at v_e^0, forward along
    same-route links through outgoing-profile inverses at v_e^k."""
    lo, hi = anchor - n, anchor + n
    if lo < real.i_lo or hi > real.i_hi:
        raise ValueError("realization window does not cover the corrector range")
    idx = np.arange(lo, hi + 1)
    z = real.type_of(idx)
    route = real.route_of(idx)
    j = idx - anchor
    v_e = eff.v_e
    for k in range(eff.K + 1):
        if v_e[k] > eff.roads[k].velocity.v_bar + 1e-12:
            raise ValueError(f"v_e^{k} exceeds the largest attainable mean velocity")
    types = spec.types
    gap_in = np.array([t.incoming.inverse(v_e[0]) for t in types])
    gap_out = np.array([t.outgoing.inverse(v_e[t.route]) for t in types])
    W = np.zeros(idx.size)
    c0 = n  # position of the anchor
    back = gap_in[z[:c0]]  # gaps W_{i+1} - W_i for i = -n..-1
    W[:c0] = -np.cumsum(back[::-1])[::-1]
    for k in range(1, eff.K + 1):
        chain = np.flatnonzero((route == k) & (j >= 0))
        if chain.size == 0:
            continue
        g = gap_out[z[chain[:-1]]]
        W[chain] = np.concatenate([[0.0], np.cumsum(g)])
    return CorrectorSequence(int(anchor), j, W, route, np.asarray(eff.e), float(spec.e_max))


# --- truncated environment --------------------------------------------------

def truncated_realization(real: Realization, slow_types, m: int) -> Realization:
    """Types z_min^{T_i} for every sampled index i >= m; routes and links are unchanged."""
    idx = real.indices
    z = real.z.copy()
    slow = np.asarray(slow_types)
    sel = idx >= m
    z[sel] = slow[real.route[sel]]
    return dataclasses.replace(real, z=z)


def truncated_positions(idx, route, e, m: int):
    """Initial datum: flat below m, e^{T_i}(m - 1) + e^{T_i} #{j in [m, i] : T_j = T_i} from m on."""
    idx = np.asarray(idx)
    route = np.asarray(route)
    e = np.asarray(e, dtype=float)
    pos = np.where(idx <= 0, e[0] * idx, e[route] * idx)
    sel = idx >= m
    if np.any(sel):
        cnt = np.zeros(idx.size, dtype=np.int64)
        for k in np.unique(route[sel]):
            hit = sel & (route == k)
            cnt[hit] = np.cumsum(hit)[hit]
        pos = np.where(sel, e[route] * (m - 1) + e[route] * cnt, pos)
    return pos


def truncated_theta(spec, law, eff, m: int, T: float, seeds, window=None, sample_dt: float = 1.0, dt=None):
    """Crossing counts of the system whose environment is replaced by slow types beyond m.

    Returns (times, theta^m) with theta^m of shape (S, R).
    """
    if m < 2:
        raise ValueError("m must be at least 2")
    if window is None:
        window = theta_window(spec, T)
    lo, hi = window
    if m <= lo:
        raise ValueError("m lies below the index window")
    slow = eff.slow_types if eff.slow_types else tuple(spec.slowest_type(k) for k in range(spec.K + 1))
    reals = [truncated_realization(sample_realization(spec, s, window), slow, m) for s in seeds]
    st = flat_initial_condition(reals, eff.e, eff.v_e, spec.delta_min)
    steady = np.array([spec.types[slow[k]].profile(k)(eff.e[k]) for k in range(spec.K + 1)])
    for a, r in enumerate(reals):
        st.positions[a] = truncated_positions(np.arange(lo, hi + 1), r.route[: hi - lo + 1], eff.e, m)
        gidx = np.arange(hi + 1, r.i_ext + 1)
        groute = r.route[hi - lo + 1:]
        st.ghost_start[a, : gidx.size] = truncated_positions(
            np.arange(lo, r.i_ext + 1), r.route, eff.e, m)[hi - lo + 1:]
        gv = np.where(gidx <= 0, eff.v_e[0], eff.v_e[groute])
        st.ghost_speed[a, : gidx.size] = np.where(gidx >= m, steady[groute], gv)
    cfg = SimConfig.for_law(law, T, sample_dt, dt=dt)
    traj = integrate(st, law, cfg, record_positions=False, observers={"theta": theta_observer})
    return cfg.sample_times, traj.records["theta"]
