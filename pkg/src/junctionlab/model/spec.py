"""Model specification: vehicle types, routes, free-road velocity profiles."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml


class SpecError(ValueError):
    """Raised when a model specification is malformed or violates its invariants."""


@dataclass(frozen=True, eq=False)
class VelocityProfile:
    """Continuous piecewise-linear free-road profile e -> V(e).

    ``breakpoints[0]`` is the minimal spacing (velocity 0 there and below),
    the last breakpoint is h_max after which the profile is constant.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)
        if bp.ndim != 1 or bp.shape != vals.shape or bp.size < 2:
            raise SpecError("profile needs matching 1-d breakpoints/values with at least 2 points")
        if not np.all(np.isfinite(bp)) or not np.all(np.isfinite(vals)):
            raise SpecError("profile contains non-finite numbers")
        if np.any(np.diff(bp) <= 0):
            raise SpecError("profile breakpoints must be strictly increasing")
        if vals[0] != 0.0:
            raise SpecError("profile must vanish at the minimal spacing")
        slopes = np.diff(vals) / np.diff(bp)
        if np.any(slopes <= 0):
            raise SpecError("profile must be increasing on [delta_min, h_max]")
        if np.any(np.diff(slopes) > 1e-12 * max(1.0, float(np.max(np.abs(slopes))))):
            raise SpecError("profile must be concave (slopes nonincreasing)")

    @property
    def delta_min(self) -> float:
        return float(self.breakpoints[0])

    @property
    def h_max(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def v_max(self) -> float:
        return float(self.values[-1])

    @property
    def slope_max(self) -> float:
        return float(np.max(np.diff(self.values) / np.diff(self.breakpoints)))

    def __call__(self, e):
        # np.interp clamps: 0 left of delta_min, v_max right of h_max
        return np.interp(e, self.breakpoints, self.values)

    def inverse(self, v):
        """Spacing at which the profile reaches velocity v, for v in [0, v_max]."""
        v = np.asarray(v, dtype=float)
        if np.any(v < 0) or np.any(v > self.v_max):
            raise ValueError(f"velocity outside profile range [0, {self.v_max}]")
        return np.interp(v, self.values, self.breakpoints)

    def to_dict(self) -> dict:
        return {"breakpoints": self.breakpoints.tolist(), "values": self.values.tolist()}

    @classmethod
    def ramp(cls, delta_min: float, slope: float, v_max: float) -> "VelocityProfile":
        """min(slope*(e - delta_min)_+, v_max)."""
        return cls(np.array([delta_min, delta_min + v_max / slope]), np.array([0.0, v_max]))

    @classmethod
    def zero(cls, delta_min: float) -> "VelocityProfile":
        # degenerate profile used only by tests (identically zero velocity)
        obj = object.__new__(cls)
        object.__setattr__(obj, "breakpoints", np.array([delta_min, delta_min + 1.0]))
        object.__setattr__(obj, "values", np.array([0.0, 0.0]))
        return obj


@dataclass(frozen=True)
class VehicleType:
    name: str
    route: int
    weight: float
    incoming: VelocityProfile  # profile on road 0
    outgoing: VelocityProfile  # profile on road `route`

    def profile(self, road: int) -> VelocityProfile:
        if road == 0:
            return self.incoming
        if road != self.route:
            raise ValueError(f"type {self.name} never drives on road {road}")
        return self.outgoing


@dataclass(frozen=True)
class ModelSpec:
    K: int
    types: tuple
    delta_min: float
    e_max: float
    radii: tuple  # (r0, r1, r2, r3), decreasing
    kappa: float | None = None
    name: str = "unnamed"
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "types", tuple(self.types))
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        if int(self.K) != self.K or self.K < 1:
            raise SpecError("K must be an integer >= 1")
        if not self.types:
            raise SpecError("at least one vehicle type is required")
        if not (self.delta_min > 0):
            raise SpecError("delta_min must be positive")
        if not (self.e_max > self.delta_min):
            raise SpecError("e_max must exceed delta_min")
        if len(self.radii) != 4:
            raise SpecError("radii must list r0, r1, r2, r3")
        r0, r1, r2, r3 = self.radii
        if not (r0 > r1 > r2 > r3 > 0):
            raise SpecError("radii must satisfy r0 > r1 > r2 > r3 > 0")
        if not (r0 > self.e_max):
            raise SpecError("r0 must exceed e_max")
        w = np.array([t.weight for t in self.types], dtype=float)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise SpecError("type weights must be positive and sum to 1")
        for t in self.types:
            if not (1 <= t.route <= self.K):
                raise SpecError(f"type {t.name}: route {t.route} outside 1..{self.K}")
            for prof in (t.incoming, t.outgoing):
                if abs(prof.delta_min - self.delta_min) > 1e-12:
                    raise SpecError(f"type {t.name}: profile must start at delta_min")
                if prof.h_max > self.e_max + 1e-12:
                    raise SpecError(f"type {t.name}: h_max exceeds e_max")
        for k in range(1, self.K + 1):
            if self.pi[k] <= 0:
                raise SpecError(f"road {k} has no vehicle type routed to it")
        if self.kappa is not None and not (self.kappa > 0):
            raise SpecError("kappa must be positive")

    # --- derived quantities -------------------------------------------------
    @property
    def weights(self) -> np.ndarray:
        return np.array([t.weight for t in self.types], dtype=float)

    @property
    def routes(self) -> np.ndarray:
        return np.array([t.route for t in self.types], dtype=np.int64)

    @property
    def pi(self) -> np.ndarray:
        """Route probabilities, with pi[0] = 1 by convention."""
        p = np.zeros(self.K + 1)
        p[0] = 1.0
        for t in self.types:
            p[t.route] += t.weight
        return p

    @property
    def R0(self) -> float:
        return self.radii[0]

    @property
    def R1(self) -> float:
        return self.radii[1]

    @property
    def R2(self) -> float:
        return self.radii[2]

    @property
    def kappa_value(self) -> float:
        if self.kappa is not None:
            return float(self.kappa)
        s = self.R1 - self.R2 + self.delta_min
        return min(min(float(t.incoming(s)), float(t.outgoing(s))) for t in self.types) / 2.0

    @property
    def v_sup(self) -> float:
        """Sup norm of the velocity law (largest free-road speed)."""
        return max(max(t.incoming.v_max, t.outgoing.v_max) for t in self.types)

    def types_on(self, road: int) -> list[int]:
        if road == 0:
            return list(range(len(self.types)))
        return [j for j, t in enumerate(self.types) if t.route == road]

    def slowest_type(self, road: int) -> int:
        """Index of a type with the smallest saturated speed on `road`."""
        cand = self.types_on(road)
        speeds = [float(self.types[j].profile(road)(self.e_max)) for j in cand]
        return cand[int(np.argmin(speeds))]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "roads": self.K,
            "delta_min": self.delta_min,
            "e_max": self.e_max,
            "radii": list(self.radii),
            "kappa": self.kappa,
            "types": [
                {
                    "name": t.name,
                    "route": t.route,
                    "weight": t.weight,
                    "profiles": {"incoming": t.incoming.to_dict(), "outgoing": t.outgoing.to_dict()},
                }
                for t in self.types
            ],
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# --- configuration files ------------------------------------------------------

_TOP_KEYS = {"name", "roads", "delta_min", "e_max", "radii", "kappa", "types"}
_TYPE_KEYS = {"name", "route", "weight", "profiles"}


def _line_of(node_map, key):
    # best effort line lookup from the composed yaml tree
    for k, v in node_map.value:
        if k.value == key:
            return v.start_mark.line + 1
    return node_map.start_mark.line + 1


def _fail(msg, line=None, source=None):
    where = f"{source or '<spec>'}" + (f":{line}" if line else "")
    raise SpecError(f"{where}: {msg}")


def spec_from_text(text: str, source: str | None = None) -> ModelSpec:
    """Parse a YAML model specification; errors carry file:line information."""
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        _fail(f"invalid YAML: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None, source)
    if not isinstance(data, dict):
        _fail("top level must be a mapping", 1, source)
    unknown = set(data) - _TOP_KEYS
    if unknown:
        _fail(f"unknown keys {sorted(unknown)}", _line_of(root, sorted(unknown)[0]), source)
    for key in ("roads", "delta_min", "e_max", "radii", "types"):
        if key not in data:
            _fail(f"missing required key '{key}'", 1, source)

    def num(value, key, line):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(f"'{key}' must be a number", line, source)
        return float(value)

    delta = num(data["delta_min"], "delta_min", _line_of(root, "delta_min"))
    radii = data["radii"]
    if not isinstance(radii, list) or len(radii) != 4:
        _fail("'radii' must be a list [r0, r1, r2, r3]", _line_of(root, "radii"), source)
    types_node = dict((k.value, v) for k, v in root.value)["types"]
    if not isinstance(data["types"], list) or not data["types"]:
        _fail("'types' must be a non-empty list", types_node.start_mark.line + 1, source)
    types = []
    for tnode, t in zip(types_node.value, data["types"]):
        line = tnode.start_mark.line + 1
        if not isinstance(t, dict):
            _fail("each type must be a mapping", line, source)
        extra = set(t) - _TYPE_KEYS
        if extra:
            _fail(f"unknown type keys {sorted(extra)}", line, source)
        for key in ("route", "weight", "profiles"):
            if key not in t:
                _fail(f"type missing '{key}'", line, source)
        profs = t["profiles"]
        if not isinstance(profs, dict):
            _fail("'profiles' must be a mapping", _line_of(tnode, "profiles"), source)
        built = {}
        for role in ("incoming", "outgoing"):
            p = profs.get(role, profs.get("both"))
            if p is None:
                _fail(f"type profiles need '{role}' (or 'both')", _line_of(tnode, "profiles"), source)
            try:
                built[role] = VelocityProfile(np.array(p["breakpoints"], float), np.array(p["values"], float))
            except (KeyError, TypeError, ValueError) as exc:
                _fail(f"bad {role} profile: {exc}", _line_of(tnode, "profiles"), source)
        types.append(
            VehicleType(
                name=str(t.get("name", f"z{len(types) + 1}")),
                route=int(t["route"]),
                weight=num(t["weight"], "weight", _line_of(tnode, "weight")),
                incoming=built["incoming"],
                outgoing=built["outgoing"],
            )
        )
    try:
        return ModelSpec(
            K=int(data["roads"]),
            types=tuple(types),
            delta_min=delta,
            e_max=num(data["e_max"], "e_max", _line_of(root, "e_max")),
            radii=tuple(float(r) for r in radii),
            kappa=None if data.get("kappa") is None else float(data["kappa"]),
            name=str(data.get("name", "unnamed")),
            source=source,
        )
    except SpecError as exc:
        _fail(str(exc), None, source)


def load_spec(path) -> ModelSpec:
    path = Path(path)
    if not path.exists():
        # fall back to the bundled canonical specs by name
        bundled = Path(__file__).resolve().parent.parent / "specs" / f"{path.name}.yaml"
        if bundled.exists():
            path = bundled
        else:
            raise FileNotFoundError(f"model spec not found: {path}")
    return spec_from_text(path.read_text(), source=str(path))


def dump_spec(spec: ModelSpec) -> str:
    return yaml.safe_dump(spec.to_dict(), sort_keys=False)


def canonical_spec(name: str) -> ModelSpec:
    """Load one of the bundled specs: 'M-two-type' or 'M-sym-2roads'."""
    path = Path(__file__).resolve().parent.parent / "specs" / f"{name}.yaml"
    if not path.exists():
        raise KeyError(f"no bundled spec named {name!r}")
    return spec_from_text(path.read_text(), source=str(path))
