"""Velocity laws on the junction and a lattice checker for the standing assumptions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spec import ModelSpec, SpecError


def smoothstep_cutoff(x, left: float, right: float):
    """C1 cutoff equal to 1 for x <= left, 0 for x >= right (left < right)."""
    s = np.clip((np.asarray(x, dtype=float) - left) / (right - left), 0.0, 1.0)
    return 1.0 - 3.0 * s**2 + 2.0 * s**3


class JunctionLaw:
    """Smooth interpolation between road-0 and road-k driving behaviour.

    Built from the spec's free-road profiles with W(s) = V(s + delta_min)
    and three smoothstep cutoffs on the bands [-r0,-r1], [-r1,-r2], [-r2,-r3].
    Both gaps are clamped at e_max before use.
    The resulting law satisfies the assumptions with radii (R0, R1, R2) = (r0, r1, r2).
    """

    def __init__(self, spec: ModelSpec):
        r0, r1, r2, r3 = spec.radii
        if not (r0 > r1 > r2 > r3 > 0):
            raise SpecError("radii must satisfy r0 > r1 > r2 > r3 > 0")
        for t in spec.types:
            if max(t.incoming.h_max, t.outgoing.h_max) > spec.e_max:
                raise SpecError(f"type {t.name}: h_max exceeds e_max")
        self.spec = spec
        self.delta = spec.delta_min
        self.R0, self.R1, self.R2 = r0, r1, r2
        self.r = (r0, r1, r2, r3)
        self.n_types = len(spec.types)
        self.routes = spec.routes
        self._gamma = None
        self._c1 = None

    # cutoffs xi_1, xi_2, xi_3
    def xi(self, i: int, x):
        return smoothstep_cutoff(x, -self.r[i - 1], -self.r[i])

    def free_road(self, z, road_of_type, e):
        """Vectorised free-road speed: type z on its incoming (road 0) or outgoing profile."""
        z = np.asarray(z)
        e = np.asarray(e, dtype=float)
        out = np.zeros(np.broadcast(z, e).shape)
        zb, eb = np.broadcast_arrays(z, e)
        for j, t in enumerate(self.spec.types):
            m = zb == j
            if not np.any(m):
                continue
            prof = t.incoming if road_of_type == 0 else t.outgoing
            out[m] = prof(eb[m])
        return out

    def evaluate(self, z, e1, e2, x):
        """Full three-term formula, vectorised over broadcastable arrays."""
        z, e1, e2, x = np.broadcast_arrays(np.asarray(z), np.asarray(e1, float), np.asarray(e2, float), np.asarray(x, float))
        d = self.delta
        # gaps are clamped at e_max so the law saturates in both gap arguments
        e1 = np.minimum(e1, self.spec.e_max)
        e2 = np.minimum(e2, self.spec.e_max)
        x1, x2, x3 = self.xi(1, x), self.xi(2, x), self.xi(3, x)
        a = np.maximum(np.minimum(e1, e2) - d, 0.0)
        b = np.maximum(e2 - d, 0.0)
        s0 = np.maximum(e1 - d, 0.0)
        s3 = x3 * a + (1.0 - x3) * b
        out = np.zeros(z.shape)
        for j, t in enumerate(self.spec.types):
            m = z == j
            if not np.any(m):
                continue
            w0, wk = t.incoming, t.outgoing
            out[m] = (
                x1[m] * w0(s0[m] + d)
                + (1.0 - x1[m]) * x2[m] * w0(a[m] + d)
                + (1.0 - x2[m]) * wk(s3[m] + d)
            )
        return out

    def velocity(self, z, e1, e2, x):
        """Same values as `evaluate`, using the one-argument profiles outside (-R0, 0)."""
        z, e1, e2, x = np.broadcast_arrays(np.asarray(z), np.asarray(e1, float), np.asarray(e2, float), np.asarray(x, float))
        out = np.empty(z.shape)
        up = x <= -self.R0
        down = x >= 0.0
        mid = ~(up | down)
        if np.any(up):
            out[up] = self.free_road(z[up], 0, e1[up])
        if np.any(down):
            out[down] = self.free_road(z[down], 1, e2[down])
        if np.any(mid):
            out[mid] = self.evaluate(z[mid], e1[mid], e2[mid], x[mid])
        return out

    @property
    def sup_norm(self) -> float:
        return self.spec.v_sup

    def lipschitz_bounds(self):
        """(gamma, C1): numerical sup of |dV/de1| + |dV/de2| and of |dV/dx| on a fine lattice."""
        if self._gamma is None:
            key = (type(self).__name__, self.spec.digest())
            if key not in _LIPSCHITZ_CACHE:
                _LIPSCHITZ_CACHE[key] = _numeric_lipschitz(self)
            self._gamma, self._c1 = _LIPSCHITZ_CACHE[key]
        return self._gamma, self._c1


class FreeRoadLaw(JunctionLaw):
    """Control law without junction effect: V = incoming profile of e1 everywhere.

    Only meaningful with K = 1 and identical incoming/outgoing profiles, where
    the gap to the next same-route vehicle equals the gap to the next vehicle.
    """

    def __init__(self, spec: ModelSpec):
        if spec.K != 1:
            raise SpecError("the free-road control law needs a single outgoing road")
        for t in spec.types:
            if not (np.array_equal(t.incoming.breakpoints, t.outgoing.breakpoints)
                    and np.array_equal(t.incoming.values, t.outgoing.values)):
                raise SpecError("the free-road control law needs identical incoming/outgoing profiles")
        super().__init__(spec)

    def evaluate(self, z, e1, e2, x):
        z, e1, e2, x = np.broadcast_arrays(np.asarray(z), np.asarray(e1, float), np.asarray(e2, float), np.asarray(x, float))
        return self.free_road(z, 0, e1)

    def velocity(self, z, e1, e2, x):
        return self.evaluate(z, e1, e2, x)


def build_example_law(spec: ModelSpec) -> JunctionLaw:
    return JunctionLaw(spec)


_LIPSCHITZ_CACHE: dict = {}


def _numeric_lipschitz(law, n_e: int = 121, n_x: int = 801):
    spec = law.spec
    e = np.linspace(0.0, spec.e_max + 0.5, n_e)
    x = np.linspace(-spec.R0 - 1.0, 1.0, n_x)
    he, hx = e[1] - e[0], x[1] - x[0]
    gamma = 0.0
    c1 = 0.0
    for j in range(len(spec.types)):
        E1, E2, X = np.meshgrid(e, e, x, indexing="ij")
        V = law.evaluate(j, E1, E2, X)
        d1 = np.abs(np.diff(V, axis=0)) / he
        d2 = np.abs(np.diff(V, axis=1)) / he
        dx = np.abs(np.diff(V, axis=2)) / hx
        gamma = max(gamma, float(d1.max() + d2.max()))
        c1 = max(c1, float(dx.max()))
    return 1.05 * gamma, 1.05 * c1


# --- assumption checks -------------------------------------------------------

@dataclass
class Violation:
    assumption: str
    z: int
    e1: float
    e2: float
    x: float
    detail: str = ""


@dataclass
class AssumptionReport:
    violations: list = field(default_factory=list)
    lattice: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def by_assumption(self) -> dict:
        out = {}
        for v in self.violations:
            out.setdefault(v.assumption, []).append(v)
        return out


def default_lattice(spec: ModelSpec, n_e: int = 41, n_x: int = 161):
    """Lattice used by validate_assumptions: gaps in [0, e_max + 1], x in [-R0 - 2, 1]
    with all breakpoints, radii and transition-band endpoints inserted exactly."""
    knots = {0.0, spec.delta_min, spec.e_max, spec.e_max + 1.0}
    for t in spec.types:
        knots.update(t.incoming.breakpoints.tolist())
        knots.update(t.outgoing.breakpoints.tolist())
    e = np.unique(np.concatenate([np.linspace(0.0, spec.e_max + 1.0, n_e), sorted(knots)]))
    xs = [-r for r in spec.radii] + [0.0, -spec.R0 - 2.0, 1.0]
    x = np.unique(np.concatenate([np.linspace(-spec.R0 - 2.0, 1.0, n_x), xs]))
    return e, x


def validate_assumptions(law, spec: ModelSpec, lattice=None, tol: float = 1e-12,
                         radii=None, max_report: int = 50) -> AssumptionReport:
    """Sample the law on a lattice and list every violated assumption.

    ``radii`` overrides (R0, R1, R2); by default the law's own radii are used.
    """
    e, x = lattice if lattice is not None else default_lattice(spec)
    if radii is None:
        radii = (getattr(law, "R0", spec.R0), getattr(law, "R1", spec.R1), getattr(law, "R2", spec.R2))
    R0, R1, R2 = radii
    d = spec.delta_min
    kappa = spec.kappa_value
    report = AssumptionReport(lattice={"e": e, "x": x, "radii": radii, "kappa": kappa})
    counts: dict = {}

    def add(name, j, E1, E2, X, mask, detail=""):
        idx = np.argwhere(mask)
        counts[name] = counts.get(name, 0) + len(idx)
        for a, b, c in idx[: max(0, max_report - sum(1 for v in report.violations if v.assumption == name))]:
            report.violations.append(Violation(name, j, float(E1[a, b, c]), float(E2[a, b, c]), float(X[a, b, c]), detail))

    E1, E2, X = np.meshgrid(e, e, x, indexing="ij")
    for j, t in enumerate(spec.types):
        V = np.asarray(law.evaluate(np.full(E1.shape, j), E1, E2, X), dtype=float)
        # H1: nondecreasing in the two gaps, nonnegative
        m = np.zeros(V.shape, bool)
        m[1:] |= np.diff(V, axis=0) < -tol
        add("H1-monotone-e1", j, E1, E2, X, m)
        m = np.zeros(V.shape, bool)
        m[:, 1:] |= np.diff(V, axis=1) < -tol
        add("H1-monotone-e2", j, E1, E2, X, m)
        add("H1-nonnegative", j, E1, E2, X, V < -tol)
        # H2-i zero regions
        zero = ((E1 <= d) & (X <= -R2)) | ((E2 <= d) & (X >= -R1))
        add("H2-i", j, E1, E2, X, zero & (np.abs(V) > tol))
        # H2-ii saturation beyond e_max
        Vs1 = law.evaluate(np.full(E1.shape, j), np.minimum(E1, spec.e_max), E2, X)
        Vs2 = law.evaluate(np.full(E1.shape, j), E1, np.minimum(E2, spec.e_max), X)
        add("H2-ii", j, E1, E2, X, (np.abs(V - Vs1) > tol) | (np.abs(V - Vs2) > tol))
        # H3 exactness outside the junction zone
        add("H3-upstream", j, E1, E2, X, (X <= -R0) & (np.abs(V - t.incoming(E1)) > tol))
        add("H3-downstream", j, E1, E2, X, (X >= 0) & (np.abs(V - t.outgoing(E2)) > tol))
        # H5-i
        m = (E1 <= E2) & (X <= -R2) & (V <= kappa) & (np.abs(V - t.incoming(E1)) > tol)
        add("H5-i", j, E1, E2, X, m)
        # H5-ii: forward differences in x inside [-R1, 0] where V <= kappa
        dV = np.diff(V, axis=2)
        inside = (X[:, :, :-1] >= -R1) & (X[:, :, 1:] <= 0.0) & (V[:, :, :-1] <= kappa)
        m = np.zeros(V.shape, bool)
        m[:, :, :-1] = inside & (dV < -tol)
        add("H5-ii", j, E1, E2, X, m)
        # H5-iii positivity
        add("H5-iii", j, E1, E2, X, (np.minimum(E1, E2) > d) & (V <= 0.0))
        # H4 on the one-dimensional profiles
        for road, prof in ((0, t.incoming), (t.route, t.outgoing)):
            g = np.linspace(d, prof.h_max, 257)
            vals = prof(g)
            dv = np.diff(vals)
            bad = np.any(dv <= 0) or np.any(np.diff(dv) > 1e-12)
            if bad or prof.h_max > spec.e_max + tol or np.any(prof(np.linspace(0, d, 5)) != 0):
                report.violations.append(Violation("H4", j, float("nan"), float("nan"), float("nan"), f"road {road}"))
    report.lattice["counts"] = counts
    return report
