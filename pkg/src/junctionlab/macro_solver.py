"""Flux-limited Hamilton-Jacobi problem on the junction: a monotone scheme,
closed-form flat-datum solutions and the micro/macro comparison."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .homog import EffectiveModel, junction_profile


class CFLError(ValueError):
    pass


@dataclass(frozen=True)
class JunctionGrid:
    """Branch 0 nodes x = -M dx .. 0, branch k nodes x = 0 .. M dx; x = 0 is shared."""

    dx: float
    M: int
    dt: float
    steps: int
    K: int

    @property
    def x_in(self) -> np.ndarray:
        return (np.arange(self.M + 1) - self.M) * self.dx

    @property
    def x_out(self) -> np.ndarray:
        return np.arange(self.M + 1) * self.dx

    @property
    def horizon(self) -> float:
        return self.dt * self.steps

    @staticmethod
    def slope_bound(eff: EffectiveModel) -> float:
        return max(r.hamiltonian.slope_bound() for r in eff.roads)

    @classmethod
    def build(cls, eff: EffectiveModel, dx: float, length: float, T: float, cfl: float = 1.0) -> "JunctionGrid":
        """Grid covering [-length, length] with the largest stable step dt <= cfl dx / (2 max|H'|)."""
        M = int(round(length / dx))
        lip = cls.slope_bound(eff)
        dt_max = cfl * dx / (2.0 * lip) if lip > 0 else T
        steps = max(1, int(math.ceil(T / dt_max - 1e-12)))
        return cls(float(dx), M, T / steps, steps, eff.K)

    def check_cfl(self, eff: EffectiveModel):
        lip = self.slope_bound(eff)
        if lip > 0 and self.dt > self.dx / (2.0 * lip) * (1 + 1e-12):
            raise CFLError(f"dt = {self.dt} violates CFL bound {self.dx / (2.0 * lip)}")


@dataclass
class GridSolution:
    grid: JunctionGrid
    times: np.ndarray
    nu_in: np.ndarray       # (S, M+1) on branch 0, x increasing to the node
    nu_out: np.ndarray      # (S, K, M+1) on branches 1..K, node first
    eff: EffectiveModel
    A: float | None

    def values(self, s: int, k: int) -> tuple:
        """(x, nu) on branch k at snapshot s."""
        if k == 0:
            return self.grid.x_in, self.nu_in[s]
        return self.grid.x_out, self.nu_out[s, k - 1]

    def node(self, s: int) -> np.ndarray:
        return np.concatenate([[self.nu_in[s, -1]], self.nu_out[s, :, 0]])

    def at(self, x, k, s: int):
        """Linear interpolation of branch k (k = 0 means x <= 0) at snapshot s."""
        xs, v = self.values(s, k)
        return np.interp(x, xs, v)


def _godunov(H, p_minus_side, p_plus_side):
    # max(H^+(D^-), H^-(D^+)) for convex H
    return np.maximum(H.plus(p_minus_side), H.minus(p_plus_side))


def solve_hj(eff: EffectiveModel, A: float, nu0, grid: JunctionGrid, T: float | None = None,
             snapshots=None, dirichlet=None, check_A: bool = True) -> GridSolution:
    """Explicit monotone scheme for the flux-limited junction problem.

    ``nu0(x, k)`` gives the initial datum.  Away from the node the numerical
    Hamiltonian is max(H^+(D^- nu), H^-(D^+ nu)); the node follows
    nu <- nu - dt max{A, H^{0,+}(D^- nu^0), H^{k,-}(D^+ nu^k)}.  The far ends
    use ghost values extrapolated with the initial slope.

    ``dirichlet`` (a function of t) replaces the node update by prescribed
    values; with K = 0 branches this is the half-line problem.
    """
    if check_A and A is not None:
        if A < eff.A0 - 1e-12:
            raise ValueError(f"limiter {A} below A0 = {eff.A0}")
    grid.check_cfl(eff)
    if T is not None and abs(T - grid.horizon) > 1e-9 * max(1.0, T):
        raise ValueError("grid horizon differs from T")
    dx, dt, M, K = grid.dx, grid.dt, grid.M, grid.K
    x_in, x_out = grid.x_in, grid.x_out
    u0 = np.asarray(nu0(x_in, 0), dtype=float).copy()
    uk = np.stack([np.asarray(nu0(x_out, k), dtype=float) for k in range(1, K + 1)]) if K else np.zeros((0, M + 1))
    if K and not np.allclose(uk[:, 0], u0[-1]):
        raise ValueError("initial datum must be single-valued at the node")
    if K:
        uk[:, 0] = u0[-1]
    # frozen far-field slopes
    s_left = (u0[0] - float(nu0(np.array([x_in[0] - dx]), 0)[0])) / dx
    s_right = np.array([(float(nu0(np.array([x_out[-1] + dx]), k)[0]) - uk[k - 1, -1]) / dx for k in range(1, K + 1)])
    H0 = eff.roads[0].hamiltonian
    Hk = [eff.roads[k].hamiltonian for k in range(1, K + 1)]
    snap_steps = {grid.steps} if snapshots is None else {int(round(t / dt)) for t in snapshots}
    snap_steps.add(0)
    order = sorted(snap_steps)
    out_in, out_k, times = [], [], []

    def save(n):
        out_in.append(u0.copy())
        out_k.append(uk.copy())
        times.append(n * dt)

    if 0 in snap_steps:
        save(0)
    for n in range(1, grid.steps + 1):
        t_new = n * dt
        # branch 0: nodes 0..M-1
        left = np.concatenate([[u0[0] - s_left * dx], u0[:-1]])
        dm = (u0 - left) / dx
        dp = np.empty_like(u0)
        dp[:-1] = (u0[1:] - u0[:-1]) / dx
        new0 = u0.copy()
        new0[:-1] = u0[:-1] - dt * _godunov(H0, dm[:-1], dp[:-1])
        newk = uk.copy()
        flux_node = [] if A is None else [A]
        flux_node.append(float(H0.plus(dm[-1])))
        for j in range(K):
            v = uk[j]
            right = np.concatenate([v[1:], [v[-1] + s_right[j] * dx]])
            dp_k = (right - v) / dx
            dm_k = np.empty_like(v)
            dm_k[1:] = (v[1:] - v[:-1]) / dx
            newk[j, 1:] = v[1:] - dt * _godunov(Hk[j], dm_k[1:], dp_k[1:])
            flux_node.append(float(Hk[j].minus(dp_k[0])))
        if dirichlet is not None:
            node = float(dirichlet(t_new))
        else:
            node = u0[-1] - dt * max(flux_node)
        new0[-1] = node
        if K:
            newk[:, 0] = node
        u0, uk = new0, newk
        if n in snap_steps:
            save(n)
    return GridSolution(grid, np.array(times), np.array(out_in), np.array(out_k), eff, A)


def flat_datum(eff: EffectiveModel):
    e = eff.e

    def nu0(x, k):
        x = np.asarray(x, dtype=float)
        return -x / (e[0] if k == 0 else e[k])
    return nu0


# --- closed forms ------------------------------------------------------------

def closed_form_nu(eff: EffectiveModel, A: float, x, k: int, t):
    """min{phi_A(x,k) - A t, -x/e^k - t H^k(-1/e^k)}; x <= 0 always uses road 0."""
    jp = junction_profile(eff, A)
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    e = eff.e
    hmin = np.array([r.hamiltonian(-1.0 / r.spacing) for r in eff.roads])
    kk = 0 if k == 0 else k
    left = np.minimum(jp.phi(x, 0) - A * t, -x / e[0] - t * hmin[0])
    if kk == 0:
        return left
    right = np.minimum(jp.phi(x, kk) - A * t, -x / e[kk] - t * hmin[kk])
    return np.where(x <= 0, left, right)


def closed_form_u(eff: EffectiveModel, A: float, y, k: int, t):
    """Position field: branch 0 formula when y <= A t, branch k otherwise."""
    jp = junction_profile(eff, A)
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    e = eff.e
    hmin = np.array([r.hamiltonian(-1.0 / r.spacing) for r in eff.roads])
    left = np.minimum(jp.psi(y - A * t, 0), y * e[0] - e[0] * t * hmin[0])
    if k == 0:
        return left
    right = np.minimum(jp.psi(y - A * t, k), y * e[k] - e[k] * t * hmin[k])
    return np.where(y <= A * t, left, right)


def half_line_closed_form(eff: EffectiveModel, rate: float, x, t):
    """min{-x/e^0 - H^0(-1/e^0) t, p^{0,-}_{-rate} x + rate t} for x <= 0."""
    h0 = float(eff.roads[0].hamiltonian(-1.0 / eff.e[0]))
    if not rate < -h0:
        raise ValueError("node rate must be below -H^0(-1/e^0)")
    jp = junction_profile(eff, -rate)
    x = np.asarray(x, dtype=float)
    return np.minimum(-x / eff.e[0] - h0 * t, jp.p_minus[0] * x + rate * t)


def solve_half_line(eff: EffectiveModel, rate: float, dx: float, length: float, T: float) -> GridSolution:
    """Incoming road only, node value prescribed as rate * t."""
    g = JunctionGrid.build(eff, dx, length, T)
    g0 = JunctionGrid(g.dx, g.M, g.dt, g.steps, 0)
    return solve_hj(eff, None, flat_datum(eff), g0, T, dirichlet=lambda t: rate * t, check_A=False)


def linf_error_vs_closed(sol: GridSolution, s: int = -1) -> float:
    t = sol.times[s]
    err = np.max(np.abs(sol.nu_in[s] - closed_form_nu(sol.eff, sol.A, sol.grid.x_in, 0, t)))
    for k in range(1, sol.grid.K + 1):
        ref = closed_form_nu(sol.eff, sol.A, sol.grid.x_out, k, t)
        err = max(err, float(np.max(np.abs(sol.nu_out[s, k - 1] - ref))))
    return float(err)


# --- micro / macro comparison --------------------------------------------------

@dataclass
class CompareRow:
    eps: float
    micro_vs_closed: float          # mean over replicates of the sup-grid error
    micro_vs_grid: float
    grid_vs_closed: float
    micro_vs_closed_max: float      # worst replicate
    mean_field_vs_closed: float     # sup-grid error of the replicate-averaged nu
    replicates: int
    dx: float


@dataclass
class CompareTable:
    rows: list
    A: float
    T: float
    times: np.ndarray
    x: np.ndarray
    meta: dict = field(default_factory=dict)


def micro_window(spec, eff, eps: float, x_min: float, x_max: float, T: float, margin: int = 30):
    """Index window whose vehicles cover [x_min, x_max]/eps for macro times up to T."""
    from .micro_sim import theta_window

    vs = spec.v_sup
    lo = int(math.floor((x_min - vs * T) / (eps * eff.e[0]))) - margin
    _, right_infl = theta_window(spec, T / eps, margin=margin)
    hi = int(math.ceil(x_max / (eps * eff.e[1:].min()))) + right_infl
    return lo, hi


def micro_macro_compare(spec, law, eff, A_hat: float, eps_list, T: float, x_grid, seeds,
                        n_times: int = 4, dx: float | None = None) -> CompareTable:
    """Sup over the (x, k, t) test grid of |nu^eps - closed form|, and against the scheme.

    The test grid uses x <= 0 on road 0 and x >= 0 on roads 1..K.
    """
    from .micro_sim import SimConfig, flat_batch, integrate, observables

    x_grid = np.asarray(x_grid, dtype=float)
    times = np.linspace(0.0, T, n_times + 1)
    A = max(float(A_hat), eff.A0)
    length = float(np.max(np.abs(x_grid)))
    dx = dx if dx is not None else min(0.01, length / 100)
    grid = JunctionGrid.build(eff, dx, length, T)
    sol = solve_hj(eff, A, flat_datum(eff), grid, T, snapshots=times)
    rows = []
    xin = x_grid[x_grid <= 0]
    xout = x_grid[x_grid >= 0]
    ref_in = np.stack([closed_form_nu(eff, A, xin, 0, t) for t in times])
    ref_out = np.stack([np.stack([closed_form_nu(eff, A, xout, k, t) for k in range(1, eff.K + 1)]) for t in times])
    g_in = np.stack([sol.at(xin, 0, s) for s in range(times.size)])
    g_out = np.stack([np.stack([sol.at(xout, k, s) for k in range(1, eff.K + 1)]) for s in range(times.size)])
    grid_err = max(np.max(np.abs(g_in - ref_in)), np.max(np.abs(g_out - ref_out)))
    for eps in eps_list:
        window = micro_window(spec, eff, eps, x_grid.min(), x_grid.max(), T)
        sample_dt = (T / n_times) / eps
        cfg = SimConfig.for_law(law, T / eps, sample_dt)
        st = flat_batch(spec, eff, seeds, window)
        traj = integrate(st, law, cfg)
        obs = observables(traj, eps, x_grid, times=times, pi=eff.pi)
        m_in = obs.nu[:, :, 0, :][:, :, x_grid <= 0]                      # (S, R, Xin)
        m_out = obs.nu[:, :, 1:, :][:, :, :, x_grid >= 0]                 # (S, R, K, Xout)
        e_closed = np.maximum(np.abs(m_in - ref_in[:, None]).max(axis=(0, 2)),
                              np.abs(m_out - ref_out[:, None]).max(axis=(0, 2, 3)))
        e_grid = np.maximum(np.abs(m_in - g_in[:, None]).max(axis=(0, 2)),
                            np.abs(m_out - g_out[:, None]).max(axis=(0, 2, 3)))
        mean_err = max(np.abs(m_in.mean(axis=1) - ref_in).max(), np.abs(m_out.mean(axis=1) - ref_out).max())
        rows.append(CompareRow(float(eps), float(e_closed.mean()), float(e_grid.mean()), float(grid_err),
                               float(e_closed.max()), float(mean_err), len(seeds), dx))
    return CompareTable(rows, A, T, times, x_grid)
