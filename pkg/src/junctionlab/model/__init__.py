"""Velocity laws, model specifications and the random environment."""

from .spec import (
    ModelSpec,
    SpecError,
    VehicleType,
    VelocityProfile,
    canonical_spec,
    dump_spec,
    load_spec,
    spec_from_text,
)
from .law import (
    AssumptionReport,
    FreeRoadLaw,
    JunctionLaw,
    Violation,
    build_example_law,
    smoothstep_cutoff,
    validate_assumptions,
)
from .environment import (
    NO_INDEX,
    AlphaEstimate,
    Realization,
    WindowError,
    estimate_alpha,
    propagation_index,
    propagation_sequence,
    replicate_seed,
    sample_realization,
    sample_types,
)
