import dataclasses

import numpy as np
import pytest
from hypothesis import settings

from junctionlab.homog import compute_effective
from junctionlab.model import ModelSpec, VelocityProfile, build_example_law, canonical_spec

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, passed: bool, detail: str):
    line = f"CRITERION {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.setdefault(number, []).append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        for line in ACCEPTANCE_LINES[n]:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def two_type():
    return canonical_spec("M-two-type")


@pytest.fixture(scope="session")
def sym():
    return canonical_spec("M-sym-2roads")


@pytest.fixture(scope="session")
def eff_two(two_type):
    return compute_effective(two_type)


@pytest.fixture(scope="session")
def eff_sym(sym):
    return compute_effective(sym)


@pytest.fixture(scope="session")
def law_sym(sym):
    return build_example_law(sym)


def single_type_spec(base=None, which: int = 0) -> ModelSpec:
    """One vehicle type on one outgoing road (taken from the two-type spec)."""
    base = base or canonical_spec("M-two-type")
    t = dataclasses.replace(base.types[which], weight=1.0, route=1)
    return ModelSpec(K=1, types=(t,), delta_min=base.delta_min, e_max=base.e_max, radii=base.radii,
                     kappa=base.kappa, name="single", source=None)


@pytest.fixture(scope="session")
def single():
    return single_type_spec()


def random_h4_spec(rng, K=None, n_types=None) -> ModelSpec:
    """A random spec whose profiles are concave, increasing ramps with kinks (H4 compliant)."""
    from junctionlab.model import VehicleType

    K = int(rng.integers(1, 4)) if K is None else K
    n_types = int(rng.integers(K, K + 3)) if n_types is None else max(n_types, K)
    delta = 1.0
    e_max = 3.0

    def profile():
        n_knots = int(rng.integers(1, 4))
        h = np.sort(rng.uniform(delta + 0.2, e_max, n_knots))
        h = np.unique(np.round(h, 6))
        slopes = np.sort(rng.uniform(0.2, 2.0, h.size))[::-1]
        b = np.concatenate([[0.0, delta], h])
        v = [0.0, 0.0]
        for k in range(h.size):
            v.append(v[-1] + slopes[k] * (b[k + 2] - b[k + 1]))
        return VelocityProfile(b[1:], np.array(v[1:]))

    types = []
    w = rng.uniform(0.5, 1.5, n_types)
    w = w / w.sum()
    for j in range(n_types):
        route = j + 1 if j < K else int(rng.integers(1, K + 1))
        p_in = profile()
        types.append(VehicleType(name=f"t{j}", route=route, weight=float(w[j]), incoming=p_in, outgoing=profile()))
    return ModelSpec(K=K, types=tuple(types), delta_min=delta, e_max=e_max, radii=(8.0, 6.0, 4.0, 2.0),
                     kappa=None, name="random", source=None)
