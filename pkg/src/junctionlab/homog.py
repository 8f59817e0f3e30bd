"""Homogenized velocities and Hamiltonians, envelopes, flat-datum spacings and
the junction profile functions.

Every free-road profile is piecewise linear, so the averaged inverse
v -> E[V_z^{-1}(v)] is piecewise linear with knots at the profile breakpoint
velocities.  Its inverse Vbar is piecewise linear in e, and
H(p) = p * Vbar(-1 / (pi p)) is then piecewise linear in p with knots at
p = -1 / (pi e_j).  All objects below are therefore exact knot tables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model.spec import ModelSpec, SpecError, VelocityProfile

BISECT_TOL = 1e-12


def invert_profile(profile: VelocityProfile, v):
    """Spacing e with profile(e) = v; exact piecewise-linear inversion on [0, v_max]."""
    return profile.inverse(v)


@dataclass(frozen=True, eq=False)
class EffectiveVelocity:
    """Piecewise-linear Vbar: 0 below the first knot, constant v_bar after the last."""

    e_knots: np.ndarray
    v_knots: np.ndarray

    @property
    def v_bar(self) -> float:
        return float(self.v_knots[-1])

    def __call__(self, e):
        return np.interp(e, self.e_knots, self.v_knots)

    def inverse(self, v):
        return np.interp(v, self.v_knots, self.e_knots)


@dataclass(frozen=True, eq=False)
class Hamiltonian:
    """Exact piecewise-linear H(p) = p Vbar(-1/(pi p)) for p < 0, 0 for p >= 0.

    Knots run from p = -1/(pi delta_min) (where H = 0) up to p = 0; H vanishes
    outside that range.
    """

    p_knots: np.ndarray
    h_knots: np.ndarray

    def __call__(self, p):
        return np.interp(p, self.p_knots, self.h_knots, left=0.0, right=0.0)

    @property
    def argmin_index(self) -> int:
        # ties: the largest minimizer in p (i.e. the largest spacing)
        h = self.h_knots
        m = h.min()
        tol = 1e-14 * max(1.0, abs(m))
        return int(np.nonzero(h <= m + tol)[0][-1])

    @property
    def p_min(self) -> float:
        return float(self.p_knots[self.argmin_index])

    @property
    def h_min(self) -> float:
        return float(self.h_knots.min())

    def plus(self, p):
        """Largest nondecreasing function below H: inf over q >= p."""
        p = np.asarray(p, dtype=float)
        suffix = np.minimum.accumulate(np.append(self.h_knots, 0.0)[::-1])[::-1]
        j = np.searchsorted(self.p_knots, p, side="left")
        return np.minimum(self(p), suffix[j])

    def minus(self, p):
        """Largest nonincreasing function below H: inf over q <= p."""
        p = np.asarray(p, dtype=float)
        prefix = np.minimum.accumulate(np.insert(self.h_knots, 0, 0.0))
        j = np.searchsorted(self.p_knots, p, side="right")
        return np.minimum(self(p), prefix[j])

    def slope_bound(self) -> float:
        return float(np.max(np.abs(np.diff(self.h_knots) / np.diff(self.p_knots))))

    def table(self, n: int = 4096, pi: float = 1.0, delta_min: float = 1.0):
        """Tabulation on a geometric grid of [-2/(pi delta), -1e-4] plus all knots and 0."""
        g = -np.geomspace(2.0 / (pi * delta_min), 1e-4, n)
        # drop grid points that nearly coincide with a knot (ill-conditioned slopes)
        gap = np.min(np.abs(g[:, None] - self.p_knots[None, :]), axis=1)
        g = g[gap > 1e-6 * np.abs(g)]
        p = np.unique(np.concatenate([g, self.p_knots]))
        return p, self(p)


@dataclass(frozen=True, eq=False)
class RoadModel:
    road: int
    pi: float
    velocity: EffectiveVelocity
    hamiltonian: Hamiltonian
    spacing: float      # e^k
    speed: float        # v_e^k = Vbar(e^k / pi)

    @property
    def v_bar(self) -> float:
        return self.velocity.v_bar


@dataclass(frozen=True, eq=False)
class EffectiveModel:
    roads: tuple
    delta_min: float
    A0: float
    spec_digest: str = ""
    slow_types: tuple = field(default=())

    @property
    def K(self) -> int:
        return len(self.roads) - 1

    @property
    def e(self) -> np.ndarray:
        return np.array([r.spacing for r in self.roads])

    @property
    def v_e(self) -> np.ndarray:
        return np.array([r.speed for r in self.roads])

    @property
    def pi(self) -> np.ndarray:
        return np.array([r.pi for r in self.roads])

    def H(self, k: int, p):
        return self.roads[k].hamiltonian(p)

    def to_dict(self) -> dict:
        return {
            "format": "junctionlab-effective-model/1",
            "spec_digest": self.spec_digest,
            "delta_min": self.delta_min,
            "A0": self.A0,
            "e": self.e.tolist(),
            "v_e": self.v_e.tolist(),
            "slow_types": list(self.slow_types),
            "roads": [
                {
                    "road": r.road,
                    "pi": r.pi,
                    "v_bar": r.v_bar,
                    "velocity_knots": {"e": r.velocity.e_knots.tolist(), "v": r.velocity.v_knots.tolist()},
                    "hamiltonian_knots": {"p": r.hamiltonian.p_knots.tolist(), "H": r.hamiltonian.h_knots.tolist()},
                    "min_H": r.hamiltonian.h_min,
                    "spacing": r.spacing,
                    "speed": r.speed,
                }
                for r in self.roads
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EffectiveModel":
        roads = []
        for r in d["roads"]:
            vel = EffectiveVelocity(np.array(r["velocity_knots"]["e"]), np.array(r["velocity_knots"]["v"]))
            ham = Hamiltonian(np.array(r["hamiltonian_knots"]["p"]), np.array(r["hamiltonian_knots"]["H"]))
            roads.append(RoadModel(r["road"], r["pi"], vel, ham, r["spacing"], r["speed"]))
        return cls(tuple(roads), d["delta_min"], d["A0"], d.get("spec_digest", ""), tuple(d.get("slow_types", ())))

    @classmethod
    def loads(cls, text: str) -> "EffectiveModel":
        return cls.from_dict(json.loads(text))


def _averaged_inverse(profiles, weights, v_top):
    """Knots (v_j, E[V_z^{-1}(v_j)]) of the averaged inverse on [0, v_top]."""
    v = {0.0, float(v_top)}
    for prof in profiles:
        for val in prof.values:
            if val < v_top:
                v.add(float(val))
    v = np.array(sorted(v))
    e = np.zeros_like(v)
    for prof, w in zip(profiles, weights):
        if prof.v_max < v_top:
            raise SpecError("profile cannot reach the averaged top speed")
        e += w * prof.inverse(v)
    return v, e


def effective_velocity(spec: ModelSpec, road: int) -> EffectiveVelocity:
    idx = spec.types_on(road)
    profiles = [spec.types[j].profile(road) for j in idx]
    w = spec.weights[idx]
    w = w / w.sum()
    v_top = min(float(p(spec.e_max)) for p in profiles)
    v, e = _averaged_inverse(profiles, w, v_top)
    if np.any(np.diff(e) <= 0):
        raise SpecError(f"averaged inverse on road {road} is not increasing")
    # concavity of Vbar <=> convexity of the averaged inverse
    slopes = np.diff(e) / np.diff(v)
    if np.any(np.diff(slopes) < -1e-12 * max(1.0, slopes.max())):
        raise SpecError(f"non-concave effective velocity on road {road} (profile concavity violated)")
    return EffectiveVelocity(e, v)


def hamiltonian_from_velocity(vel: EffectiveVelocity, pi: float) -> Hamiltonian:
    e = vel.e_knots
    p = -1.0 / (pi * e)            # increasing since e increases
    h = p * vel.v_knots
    return Hamiltonian(np.append(p, 0.0), np.append(h, 0.0))


def compute_effective(spec: ModelSpec) -> EffectiveModel:
    pis = spec.pi
    roads = []
    for k in range(spec.K + 1):
        vel = effective_velocity(spec, k)
        ham = hamiltonian_from_velocity(vel, pis[k])
        pstar = ham.p_min
        if pstar >= 0:
            raise SpecError(f"road {k}: Hamiltonian has no negative minimum")
        spacing = -1.0 / pstar
        speed = float(vel(spacing / pis[k]))
        roads.append(RoadModel(k, float(pis[k]), vel, ham, float(spacing), speed))
    A0 = max(r.hamiltonian.h_min for r in roads)
    slow = tuple(spec.slowest_type(k) for k in range(spec.K + 1))
    return EffectiveModel(tuple(roads), spec.delta_min, float(A0), spec.digest(), slow)


# --- convexity check ---------------------------------------------------------

@dataclass
class ConvexityReport:
    min_second_difference: dict
    min_velocity_curvature: dict
    tol: float

    @property
    def ok(self) -> bool:
        return all(v >= -self.tol for v in self.min_second_difference.values()) and all(
            v <= self.tol for v in self.min_velocity_curvature.values())


def second_differences(p, h):
    """Second differences of a table on a nonuniform grid.

    Uses the gap between the chord through the two neighbours and the middle
    value, w_- h_{i-1} + w_+ h_{i+1} - h_i, which is half the usual second
    difference on a uniform grid and is nonnegative exactly for convex data.
    """
    p = np.asarray(p, dtype=float)
    h = np.asarray(h, dtype=float)
    left, right = p[1:-1] - p[:-2], p[2:] - p[1:-1]
    w_minus = right / (left + right)
    return w_minus * h[:-2] + (1.0 - w_minus) * h[2:] - h[1:-1]


def check_convexity(eff: EffectiveModel, tables=None, tol: float = 1e-9) -> ConvexityReport:
    """Discrete convexity of each H^k on [-1/(pi^k delta_min), 0] and concavity of each Vbar^k.

    ``tables`` may override the tabulated (p, H) arrays per road (used to test
    perturbed tables).
    """
    mins, vmins = {}, {}
    for r in eff.roads:
        if tables is not None and r.road in tables:
            p, h = tables[r.road]
        else:
            p, h = r.hamiltonian.table(pi=r.pi, delta_min=eff.delta_min)
        lo = -1.0 / (r.pi * eff.delta_min)
        m = (p >= lo - 1e-15) & (p <= 0.0)
        d2 = second_differences(p[m], h[m])
        mins[r.road] = float(d2.min()) if d2.size else 0.0
        e = np.unique(np.concatenate([np.linspace(eff.delta_min, 2 * r.velocity.e_knots[-1], 2001), r.velocity.e_knots]))
        dv = second_differences(e, r.velocity(e))
        vmins[r.road] = float(dv.max()) if dv.size else 0.0
    return ConvexityReport(mins, vmins, tol)


# --- junction profile --------------------------------------------------------

def _bisect(pred, lo, hi, tol=BISECT_TOL):
    """Smallest x in [lo, hi] with pred(x) true, pred monotone false -> true."""
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if pred(mid):
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class JunctionProfile:
    A: float
    p_minus: np.ndarray
    p_plus: np.ndarray

    def phi(self, x, k):
        """phi_A(x, k): p^{0,-} x on x <= 0, p^{k,+} x on x >= 0 (k >= 1)."""
        x = np.asarray(x, dtype=float)
        k = np.asarray(k)
        right = self.p_plus[np.clip(k, 1, None)] * x
        return np.where(x <= 0, self.p_minus[0] * x, right)

    def psi(self, y, k):
        """Inverse of x -> -phi_A(x, k) on each half line."""
        y = np.asarray(y, dtype=float)
        k = np.asarray(k)
        right = y / (-self.p_plus[np.clip(k, 1, None)])
        return np.where(y <= 0, y / (-self.p_minus[0]), right)


def junction_profile(eff: EffectiveModel, A: float) -> JunctionProfile:
    if A >= 0:
        raise ValueError("limiter level must be negative")
    if A < eff.A0 - 1e-12:
        raise ValueError(f"limiter level {A} below A0 = {eff.A0}: no roots")
    pm, pp = [], []
    for r in eff.roads:
        H = r.hamiltonian
        lo = -1.0 / (r.pi * eff.delta_min)
        pmin = H.p_min
        # smallest p on the decreasing branch with H(p) <= A
        pm.append(_bisect(lambda q: H(q) <= A, lo, pmin))
        # largest p on the increasing branch with H(p) <= A
        neg = _bisect(lambda q: H(-q) <= A, 0.0, -pmin)
        pp.append(-neg)
    return JunctionProfile(float(A), np.array(pm), np.array(pp))
