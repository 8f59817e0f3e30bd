"""Follow-the-leader dynamics on a finite index window and the scaled observables.

A ``WindowState`` holds R independent replicates at once (positions of shape
(R, N)); a single run is simply R = 1.  Vehicles above the window are replaced
by virtual leaders moving at constant speed.  Nothing is needed below the
window because vehicle i only looks at indices larger than i.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .model.environment import NO_INDEX, Realization, sample_realization, replicate_seed
from .model.spec import ModelSpec


class OrderingError(RuntimeError):
    """The integrator could not keep the ordering invariants, even with reduced steps."""


class CoverageError(RuntimeError):
    """An observable was requested outside the region the window describes exactly."""


# --- state -------------------------------------------------------------------

@dataclass(eq=False)
class WindowState:
    realizations: tuple
    i_lo: int
    i_hi: int
    positions: np.ndarray            # (R, N)
    ghost_start: np.ndarray          # (R, G) virtual leader positions at t = 0
    ghost_speed: np.ndarray          # (R, G)
    t: float = 0.0
    z: np.ndarray = field(default=None, repr=False)
    route: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        R = len(self.realizations)
        n = self.i_hi - self.i_lo + 1
        if self.positions.shape != (R, n):
            raise ValueError("positions must have shape (replicates, window length)")
        if self.z is None:
            self.z = np.stack([r.z[:n] for r in self.realizations])
            self.route = np.stack([r.route[:n] for r in self.realizations])

    @property
    def R(self) -> int:
        return len(self.realizations)

    @property
    def N(self) -> int:
        return self.i_hi - self.i_lo + 1

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.i_lo, self.i_hi + 1)

    def column(self, i: int) -> int:
        return i - self.i_lo

    def ghosts_at(self, t: float) -> np.ndarray:
        return self.ghost_start + self.ghost_speed * (t - 0.0)

    def copy(self, positions=None, t=None) -> "WindowState":
        return WindowState(self.realizations, self.i_lo, self.i_hi,
                           self.positions.copy() if positions is None else positions,
                           self.ghost_start, self.ghost_speed,
                           self.t if t is None else t, self.z, self.route)


def _check_same_window(reals):
    lo, hi = reals[0].i_lo, reals[0].i_hi
    for r in reals:
        if (r.i_lo, r.i_hi) != (lo, hi):
            raise ValueError("all replicates must share the index window")
    return lo, hi


def flat_position(index, route, e):
    """Flat datum e^0 i for i <= 0, e^{T_i} i for i >= 0."""
    index = np.asarray(index)
    e = np.asarray(e, dtype=float)
    return np.where(index <= 0, e[0] * index, e[np.asarray(route)] * index)


def flat_initial_condition(reals, e, ghost_speeds, delta_min: float | None = None) -> WindowState:
    """Flat initial datum on the window of every realization.

    ``ghost_speeds[k]`` is the speed of the virtual leaders of route k
    (the steady flat-datum speed v_e^k in normal use).
    """
    if isinstance(reals, Realization):
        reals = [reals]
    reals = tuple(reals)
    e = np.asarray(e, dtype=float)
    if delta_min is not None and np.any(e[1:] <= delta_min):
        raise ValueError("outgoing spacings must exceed delta_min")
    lo, hi = _check_same_window(reals)
    idx = np.arange(lo, hi + 1)
    pos = np.stack([flat_position(idx, r.route[: hi - lo + 1], e) for r in reals])
    G = max(r.i_ext - r.i_hi for r in reals)
    gs = np.full((len(reals), G), 1e15)
    gv = np.zeros((len(reals), G))
    speeds = np.asarray(ghost_speeds, dtype=float)
    for a, r in enumerate(reals):
        gidx = np.arange(hi + 1, r.i_ext + 1)
        groute = r.route[hi - lo + 1:]
        gs[a, : gidx.size] = flat_position(gidx, groute, e)
        gv[a, : gidx.size] = np.where(gidx <= 0, speeds[0], speeds[groute])
    return WindowState(reals, lo, hi, pos, gs, gv)


# --- compatibility / ordering --------------------------------------------------

@dataclass
class OrderingReport:
    violations: list                 # (replicate, index, kind, slack)
    worst: float                     # most negative slack (0 if none)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_ordering(state: WindowState, delta_min: float, R2: float, tau: float = 0.0,
                   positions=None, max_report: int = 20) -> OrderingReport:
    """Ordering invariants of the current configuration.

    * U_{l_i} - U_i >= delta_min for every i whose same-route leader is in the window;
    * for i < j with U_i <= -R2 or U_j <= -R2: U_j - U_i >= delta_min;
    * for i < j with U_j <= -R2: U_j - U_i >= (j - i) delta_min.
    """
    Y = state.positions if positions is None else positions
    viol = []
    worst = 0.0

    def collect(kind, slack, mask):
        nonlocal worst
        bad = np.argwhere(mask)
        if bad.size:
            worst = min(worst, float(slack[mask].min()))
        for r, c in bad[: max(0, max_report - len(viol))]:
            viol.append((int(r), int(state.i_lo + c), kind, float(slack[r, c])))

    lead = _leader_columns(state)
    real = lead >= 0
    gap = np.where(real, np.take_along_axis(Y, np.where(real, lead, 0), axis=1) - Y, np.inf)
    collect("same-route", gap - delta_min, real & (gap - delta_min < -tau))
    # i < j with U_i <= -R2: min_{j>i} U_j - U_i >= delta
    suffix_min = np.minimum.accumulate(Y[:, ::-1], axis=1)[:, ::-1]
    ahead = np.full_like(Y, np.inf)
    ahead[:, :-1] = suffix_min[:, 1:]
    slack = ahead - Y - delta_min
    collect("upstream-follower", slack, (Y <= -R2) & (slack < -tau))
    # i < j with U_j <= -R2: U_j - max_{i<j} U_i >= delta, and consecutive gaps give (j-i) delta
    prefix_max = np.maximum.accumulate(Y, axis=1)
    behind = np.full_like(Y, -np.inf)
    behind[:, 1:] = prefix_max[:, :-1]
    slack = Y - behind - delta_min
    collect("upstream-leader", slack, (Y <= -R2) & (slack < -tau))
    cons = np.full_like(Y, np.inf)
    cons[:, 1:] = Y[:, 1:] - Y[:, :-1] - delta_min
    collect("consecutive", cons, (Y <= -R2) & (cons < -tau))
    return OrderingReport(viol, worst)


def check_compatibility(state: WindowState, delta_min: float, R2: float) -> OrderingReport:
    """Initial-datum compatibility: U_{i+1} >= U_i + delta where U_{i+1} <= -R2,
    and U_{l_i} >= U_i + delta for every i with l_i in the window."""
    Y = state.positions
    viol = []
    worst = 0.0
    cons = Y[:, 1:] - Y[:, :-1] - delta_min
    m = (Y[:, 1:] <= -R2) & (cons < 0)
    for r, c in np.argwhere(m)[:20]:
        viol.append((int(r), int(state.i_lo + c), "consecutive", float(cons[r, c])))
    if m.any():
        worst = float(cons[m].min())
    lead = _leader_columns(state)
    real = lead >= 0
    gap = np.where(real, np.take_along_axis(Y, np.where(real, lead, 0), axis=1) - Y, np.inf) - delta_min
    m = real & (gap < 0)
    for r, c in np.argwhere(m)[:20]:
        viol.append((int(r), int(state.i_lo + c), "same-route", float(gap[r, c])))
    if m.any():
        worst = min(worst, float(gap[m].min()))
    return OrderingReport(viol, worst)


def _leader_columns(state: WindowState) -> np.ndarray:
    """Column of l_i inside the window, -1 when l_i lies above the window."""
    out = np.empty((state.R, state.N), dtype=np.int64)
    for a, r in enumerate(state.realizations):
        nxt = r.next_same[: state.N]
        out[a] = np.where(nxt <= state.i_hi, nxt - state.i_lo, -1)
    return out


# --- dynamics ----------------------------------------------------------------

class _System:
    """Flattened index bookkeeping for fast right-hand side evaluation."""

    def __init__(self, state: WindowState, law):
        self.law = law
        R, N = state.R, state.N
        G = state.ghost_start.shape[1]
        self.R, self.N, self.G = R, N, G
        width = N + G
        base = (np.arange(R) * width)[:, None]
        col = np.arange(N)[None, :]
        self.lead1 = (base + col + 1).ravel()          # i + 1 (ghost column N for i_hi)
        lead2 = np.empty((R, N), dtype=np.int64)
        for a, r in enumerate(state.realizations):
            nxt = r.next_same[:N]
            if np.any(nxt == NO_INDEX):
                raise ValueError("missing same-route link inside the window")
            lead2[a] = nxt - state.i_lo                 # columns >= N are ghosts
        self.lead2 = (base + lead2).ravel()
        self.lead2_real = (lead2 < N).ravel()
        self.z = state.z.ravel()
        self.g0 = state.ghost_start
        self.gv = state.ghost_speed
        self.width = width

    def rhs(self, t: float, Y: np.ndarray) -> np.ndarray:
        X = np.concatenate([Y, self.g0 + self.gv * t], axis=1).ravel()
        y = Y.ravel()
        v = self.law.velocity(self.z, X[self.lead1] - y, X[self.lead2] - y, y)
        return v.reshape(Y.shape)


def rhs(state: WindowState, law) -> np.ndarray:
    """Velocities dU_i/dt of every vehicle in the window."""
    return _System(state, law).rhs(state.t, state.positions)


@dataclass(frozen=True)
class SimConfig:
    horizon: float
    sample_dt: float
    dt: float
    tau_ord: float
    max_halvings: int = 8

    @property
    def n_samples(self) -> int:
        return int(round(self.horizon / self.sample_dt)) + 1

    @property
    def sample_times(self) -> np.ndarray:
        return np.arange(self.n_samples) * self.sample_dt

    @property
    def substeps(self) -> int:
        return int(round(self.sample_dt / self.dt))

    @staticmethod
    def dt_bound(law) -> float:
        gamma, c1 = law.lipschitz_bounds()
        L = gamma + c1
        vs = law.sup_norm
        b1 = law.spec.delta_min / (4.0 * vs) if vs > 0 else np.inf
        b2 = 1.0 / (4.0 * L) if L > 0 else np.inf
        return float(min(b1, b2, 1.0))

    @classmethod
    def for_law(cls, law, horizon: float, sample_dt: float = 1.0, dt: float | None = None,
                tau_ord: float | None = None) -> "SimConfig":
        bound = cls.dt_bound(law)
        if dt is None:
            dt = bound
        if dt > bound * (1 + 1e-12):
            raise ValueError(f"dt = {dt} exceeds the stability bound {bound}")
        # align the step with the sampling grid
        sub = max(1, int(math.ceil(sample_dt / dt - 1e-9)))
        dt = sample_dt / sub
        n = horizon / sample_dt
        if abs(n - round(n)) > 1e-9:
            raise ValueError("horizon must be a multiple of sample_dt")
        tau = 1e-6 * law.spec.delta_min if tau_ord is None else tau_ord
        return cls(float(horizon), float(sample_dt), float(dt), float(tau))


@dataclass
class IntegrationStats:
    steps: int = 0
    halvings: int = 0
    min_step_velocity: float = np.inf
    max_step_velocity: float = -np.inf
    worst_ordering_slack: float = 0.0


@dataclass
class Trajectory:
    state0: WindowState
    times: np.ndarray
    positions: np.ndarray | None      # (S, R, N) when recorded
    records: dict
    stats: IntegrationStats
    config: SimConfig

    def state_at(self, s: int) -> WindowState:
        return self.state0.copy(positions=self.positions[s], t=float(self.times[s]))


def _rk4(sys, t, Y, dt):
    k1 = sys.rhs(t, Y)
    k2 = sys.rhs(t + 0.5 * dt, Y + 0.5 * dt * k1)
    k3 = sys.rhs(t + 0.5 * dt, Y + 0.5 * dt * k2)
    k4 = sys.rhs(t + dt, Y + dt * k3)
    return Y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _audit(state, Y_old, Y_new, delta, R2, tau, lead_cols):
    if not np.all(np.isfinite(Y_new)):
        return -np.inf
    slack = float(np.min(Y_new - Y_old)) + tau  # positions must not decrease
    real = lead_cols >= 0
    if real.any():
        g = np.take_along_axis(Y_new, np.where(real, lead_cols, 0), axis=1) - Y_new - delta
        slack = min(slack, float(np.min(np.where(real, g, np.inf))) + tau)
    up = Y_new <= -R2
    if up.any():
        suffix_min = np.minimum.accumulate(Y_new[:, ::-1], axis=1)[:, ::-1]
        ahead = np.full_like(Y_new, np.inf)
        ahead[:, :-1] = suffix_min[:, 1:]
        s1 = np.where(up, ahead - Y_new - delta, np.inf)
        prefix_max = np.maximum.accumulate(Y_new, axis=1)
        behind = np.full_like(Y_new, -np.inf)
        behind[:, 1:] = prefix_max[:, :-1]
        s2 = np.where(up, Y_new - behind - delta, np.inf)
        slack = min(slack, float(s1.min()) + tau, float(s2.min()) + tau)
    return slack


def integrate(state: WindowState, law, cfg: SimConfig, record_positions: bool = True,
              observers: dict | None = None) -> Trajectory:
    """Fixed-step RK4 from state.t to state.t + horizon, auditing ordering after every step.

    ``observers`` maps names to callables f(t, positions, state) evaluated at every
    sample time; their return values are collected in ``Trajectory.records``.
    """
    sys = _System(state, law)
    spec = law.spec
    delta, R2, tau = spec.delta_min, law.R2, cfg.tau_ord
    lead_cols = _leader_columns(state)
    observers = observers or {}
    records = {name: [] for name in observers}
    times = state.t + cfg.sample_times
    Y = state.positions.copy()
    out = np.empty((len(times),) + Y.shape) if record_positions else None
    stats = IntegrationStats()

    def observe(s, t, Y):
        if out is not None:
            out[s] = Y
        for name, f in observers.items():
            records[name].append(f(t, Y, state))

    observe(0, times[0], Y)
    t = state.t
    for s in range(1, len(times)):
        for _ in range(cfg.substeps):
            Y_new, h_used = None, cfg.dt
            for level in range(cfg.max_halvings + 1):
                h = cfg.dt / 2**level
                Z = Y
                tt = t
                for _ in range(2**level):
                    Z = _rk4(sys, tt, Z, h)
                    tt += h
                if _audit(state, Y, Z, delta, R2, tau, lead_cols) >= 0.0:
                    Y_new, h_used = Z, h
                    stats.halvings += level
                    break
            if Y_new is None:
                if not np.all(np.isfinite(Z)):
                    raise FloatingPointError(f"non-finite positions at t = {t}")
                raise OrderingError(f"ordering violated at t = {t} after {cfg.max_halvings} step halvings")
            v = (Y_new - Y) / cfg.dt
            stats.min_step_velocity = min(stats.min_step_velocity, float(v.min()))
            stats.max_step_velocity = max(stats.max_step_velocity, float(v.max()))
            stats.steps += 1
            Y = Y_new
            t = t + cfg.dt
        t = float(times[s])
        observe(s, t, Y)
    for name in records:
        try:
            records[name] = np.asarray(records[name])
        except ValueError:
            pass
    return Trajectory(state, times, out, records, stats, cfg)


# --- window sizing and flat runs ---------------------------------------------

def theta_window(spec: ModelSpec, horizon: float, margin: int = 20, right: int | None = None):
    """Index window for a crossing-count run up to ``horizon``.

    Left: ceil(|V| T / delta_min) + margin, enough for every vehicle that can
    reach 0.  Right: indices whose influence can travel back to 0 within the
    horizon, estimated from the largest profile slope, plus the margin.
    """
    vs = spec.v_sup
    left = int(math.ceil(vs * horizon / spec.delta_min)) + margin
    if right is None:
        slope = max(max(t.incoming.slope_max, t.outgoing.slope_max) for t in spec.types)
        right = int(math.ceil(slope * horizon / spec.pi[1:].min() / 2.0)) + margin
    return -left, right


def flat_batch(spec: ModelSpec, eff, seeds, window) -> WindowState:
    reals = [sample_realization(spec, s, window) for s in seeds]
    return flat_initial_condition(reals, eff.e, eff.v_e, spec.delta_min)


def replicate_seeds(seed: int, R: int, offset: int = 0) -> list:
    return [replicate_seed(seed, r) for r in range(offset, offset + R)]


# --- crossing count ----------------------------------------------------------

def theta_of_positions(Y: np.ndarray, i_lo: int) -> np.ndarray:
    """inf{i >= 0 : U_{-i} <= 0} per replicate."""
    c0 = -i_lo
    if c0 < 0:
        raise CoverageError("window must contain index 0")
    rev = Y[:, c0::-1] <= 0.0
    hit = rev.any(axis=1)
    if not hit.all():
        raise CoverageError("no vehicle of the window is behind 0: widen the window (lower i_lo)")
    return rev.argmax(axis=1)


def theta_observer(t, Y, state):
    return theta_of_positions(Y, state.i_lo)


def theta(traj: Trajectory) -> np.ndarray:
    """Crossing counts at every sample time, shape (S, R)."""
    if "theta" in traj.records:
        return np.asarray(traj.records["theta"])
    if traj.positions is None:
        raise ValueError("trajectory has neither positions nor a theta record")
    return np.stack([theta_of_positions(Y, traj.state0.i_lo) for Y in traj.positions])


def _theta_batch(args):
    spec, law, eff, seeds, window, cfg = args
    st = flat_batch(spec, eff, seeds, window)
    traj = integrate(st, law, cfg, record_positions=False, observers={"theta": theta_observer})
    return traj.records["theta"], traj.stats


def run_theta(spec, law, eff, seeds, horizon, sample_dt=1.0, window=None, dt=None, batch=64, workers=1):
    """Crossing counts theta(t) for flat-datum runs, one column per seed.

    Replicates are integrated in batches of ``batch``; with ``workers > 1`` the
    batches run in separate processes.  Results are ordered by seed position,
    so the output does not depend on the worker count.
    """
    seeds = list(seeds)
    if window is None:
        window = theta_window(spec, horizon)
    cfg = SimConfig.for_law(law, horizon, sample_dt, dt=dt)
    jobs = [(spec, law, eff, seeds[b:b + batch], window, cfg) for b in range(0, len(seeds), batch)]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_theta_batch, jobs))
    else:
        results = [_theta_batch(j) for j in jobs]
    cols = [r[0] for r in results]
    stats = [r[1] for r in results]
    return cfg.sample_times, np.concatenate(cols, axis=1), stats


# --- analytic bound constants --------------------------------

def velocity_floor_constant(law, eff) -> float:
    """min{kappa, min_k v_e^k, min V(e_min, e_min, x), min V(R1 - R2 + delta, same, x)}."""
    spec = law.spec
    x = np.linspace(-law.R0 - 1.0, 1.0, 4001)
    e_min = float(eff.e.min())
    s = law.R1 - law.R2 + spec.delta_min
    vals = [spec.kappa_value, float(eff.v_e.min())]
    for j in range(len(spec.types)):
        vals.append(float(law.evaluate(j, e_min, e_min, x).min()))
        vals.append(float(law.evaluate(j, s, s, x).min()))
    return min(vals)


def theta_increment_constant(law, eff, delta_floor: float) -> float:
    """C with theta(t) - theta(s) <= C (t - s + 1):
    |V|/delta (t - s) + |V| R2/delta' (1/delta + 1/e^0)."""
    spec = law.spec
    vs = law.sup_norm
    c1 = vs / spec.delta_min
    c2 = vs * law.R2 / delta_floor * (1.0 / spec.delta_min + 1.0 / eff.e[0])
    return max(c1, c2)


def count_lipschitz_constant(spec: ModelSpec, v_sup: float) -> float:
    """C with |nu(x,k,t) - nu(y,k,s)| <= C (|x - y| + |t - s| + eps) on every branch.

    Branch k >= 1 loses at most 2/pi^k (n/delta + eps) over a space step and the
    same over a time step with n = |V| (t - s); branch 0 is the pi-weighted sum
    of the others, which costs a factor K instead of 1/pi^k.
    """
    pi = np.asarray(spec.pi, dtype=float)
    d = spec.delta_min
    return float(2.0 * max(spec.K, float(np.max(1.0 / pi[1:]))) * max(1.0 / d, v_sup / d, 2.0))


# --- scaled observables ------------------------------------------------------

@dataclass
class ObservableTrace:
    eps: float
    times: np.ndarray          # macroscopic times
    x: np.ndarray              # macroscopic positions
    nu: np.ndarray             # (S, R, K+1, X); branch 0 is NaN for x > 0
    rho: np.ndarray            # (S, R, K+1, X-1)
    theta: np.ndarray          # (S, R)


def counts(Y: np.ndarray, idx: np.ndarray, route: np.ndarray, K: int, X: np.ndarray) -> np.ndarray:
    """N(X, k) for k = 0..K of one configuration; N(X, 0) only meaningful for X <= 0."""
    out = np.empty((K + 1, X.size))
    neg = idx <= 0
    pos_ = ~neg
    s = np.sort(Y[neg])
    out[0] = s.size - np.searchsorted(s, X, side="right")
    for k in range(1, K + 1):
        a = np.sort(Y[neg & (route == k)])
        b = np.sort(Y[pos_ & (route == k)])
        out[k] = (a.size - np.searchsorted(a, X, side="right")) - np.searchsorted(b, X, side="right")
    return out


def observables(traj: Trajectory, eps: float, x_grid, times=None, pi=None) -> ObservableTrace:
    """nu^eps(x, k, t) = eps / pi^k N(x/eps, k, t/eps), branch 0 = eps N(x/eps, 0, t/eps)."""
    if pi is None:
        raise ValueError("route probabilities pi are required")
    st = traj.state0
    x_grid = np.asarray(x_grid, dtype=float)
    pi = np.asarray(pi, dtype=float)
    K = len(pi) - 1
    micro_t = traj.times
    if times is None:
        sel = np.arange(micro_t.size)
    else:
        sel = np.array([int(np.argmin(np.abs(micro_t - t / eps))) for t in times])
        if np.any(np.abs(micro_t[sel] * eps - np.asarray(times)) > 1e-9):
            raise CoverageError("requested times are not on the sample grid")
    X = x_grid / eps
    idx = st.indices
    nu = np.full((sel.size, st.R, K + 1, X.size), np.nan)
    for a, s in enumerate(sel):
        Y = traj.positions[s]
        for r in range(st.R):
            if Y[r, 0] > X.min():
                raise CoverageError("x-grid reaches below the window's last vehicle")
            c = counts(Y[r], idx, st.route[r], K, X)
            nu[a, r, 1:] = eps * c[1:] / pi[1:, None]
            nu[a, r, 0] = np.where(x_grid <= 0, eps * c[0], np.nan)
    top = st.ghost_start.min() if st.ghost_start.size else np.inf
    if X.max() >= top:
        raise CoverageError("x-grid reaches the virtual leaders above the window")
    rho = -np.diff(nu, axis=3) / np.diff(x_grid)
    th = theta(traj)[sel]
    return ObservableTrace(eps, micro_t[sel] * eps, x_grid, nu, rho, th)


def index_floor(y_over_eps, route_row, i_lo, k):
    """[y]_k = sup{i <= y : T_i = k} (plain integer part for k = 0)."""
    j = np.floor(np.asarray(y_over_eps, dtype=float)).astype(np.int64)
    if k == 0:
        return j
    idx = np.arange(i_lo, i_lo + route_row.size)
    hit = np.where(route_row == k, idx, NO_INDEX)
    last = np.maximum.accumulate(hit)
    c = j - i_lo
    if np.any(c < 0) or np.any(c >= route_row.size):
        raise CoverageError("index map leaves the window")
    out = last[c]
    if np.any(out == NO_INDEX):
        raise CoverageError("no route-k index below the requested label")
    return out


def scaled_position(traj: Trajectory, eps: float, y, k: int, s: int, replicate: int = 0):
    """u^eps(y, k, t) = eps U_{[y/eps]_k}(t/eps) at sample index s."""
    st = traj.state0
    j = index_floor(np.asarray(y) / eps, st.route[replicate], st.i_lo, k)
    return eps * traj.positions[s, replicate, j - st.i_lo]


def scaled_count(Y_row, idx, route_row, pi, eps, x, k):
    """nu^eps at macroscopic positions x for one configuration and branch k."""
    X = np.asarray(x, dtype=float) / eps
    c = counts(Y_row, idx, route_row, len(pi) - 1, X)
    if k == 0:
        return eps * c[0]
    return eps * c[k] / pi[k]


# --- approximate finite speed of propagation ---------------------------------

@dataclass
class FiniteSpeedReport:
    n: np.ndarray               # dependency depths
    J: np.ndarray               # J_n(i0 + L)
    deviation: np.ndarray       # max over i <= J_n, t <= T of (U~_i - U_i)_+
    beta: float
    C_fit: float
    bound: np.ndarray           # C_fit 2^-n e^{beta T}
    displacement: float
    top_initial_deviation: float


def finite_speed_check(real: Realization, law, eff, i0: int, L: int, displacement: float,
                       n_max: int, T: float, sample_dt: float = 0.25) -> FiniteSpeedReport:
    """Run the flat datum on {i0..i0+L} twice, the second time with vehicle i0+L
    pushed forward by ``displacement``; report how the difference decays below
    the propagation indices J_n(i0 + L)."""
    from .model.environment import propagation_sequence

    spec = law.spec
    top = i0 + L
    sub = sample_realization(spec, real.seed, (i0, top), shift=real.shift)
    base = flat_initial_condition([sub], eff.e, eff.v_e)
    pert = base.copy()
    pert.positions[0, -1] += displacement
    cfg = SimConfig.for_law(law, T, sample_dt)
    a = integrate(base, law, cfg)
    b = integrate(pert, law, cfg)
    diff = np.maximum(b.positions[:, 0, :] - a.positions[:, 0, :], 0.0).max(axis=0)
    J = propagation_sequence(sub, spec.K, top, n_max)
    dev = np.array([diff[: J[n] - i0 + 1].max() if J[n] >= i0 else 0.0 for n in range(n_max + 1)])
    gamma, c1 = law.lipschitz_bounds()
    beta = gamma + 2.0 * c1
    scale = 2.0 ** -np.arange(n_max + 1) * math.exp(beta * T)
    C = float(np.max(dev / scale))
    return FiniteSpeedReport(np.arange(n_max + 1), J, dev, beta, C, C * scale, displacement,
                             float(b.positions[0, 0, -1] - a.positions[0, 0, -1]))


# --- binary trajectory stream ------------------------------------------------

STREAM_MAGIC = b"JLTRAJ\0\0"
STREAM_VERSION = 1


class TrajectoryStreamWriter:
    """Observer writing rows (t, i, U) as little-endian float64 triples.

    Layout: 8-byte magic, uint32 version, uint32 columns (= 3), int64 i_lo,
    int64 i_hi, then one row per vehicle per sample time.
    """

    def __init__(self, path, i_lo: int, i_hi: int, replicate: int = 0):
        self.f = open(path, "wb")
        self.f.write(STREAM_MAGIC + struct.pack("<IIqq", STREAM_VERSION, 3, i_lo, i_hi))
        self.idx = np.arange(i_lo, i_hi + 1, dtype="<f8")
        self.replicate = replicate

    def __call__(self, t, Y, state):
        rows = np.empty((self.idx.size, 3), dtype="<f8")
        rows[:, 0] = t
        rows[:, 1] = self.idx
        rows[:, 2] = Y[self.replicate]
        self.f.write(rows.tobytes())
        return None

    def close(self):
        self.f.close()


def read_trajectory_stream(path):
    with open(path, "rb") as f:
        head = f.read(8 + 24)
        if head[:8] != STREAM_MAGIC:
            raise ValueError("not a trajectory stream")
        version, ncol, lo, hi = struct.unpack("<IIqq", head[8:])
        if version != STREAM_VERSION or ncol != 3:
            raise ValueError(f"unsupported stream version {version}")
        data = np.frombuffer(f.read(), dtype="<f8").reshape(-1, 3)
    return (lo, hi), data
