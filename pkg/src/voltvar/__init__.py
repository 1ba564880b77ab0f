"""Coordinated Volt/Var control on unbalanced radial distribution feeders.

The package splits into largely independent layers:

- feeder:      network description, operating points, profiles
- powerflow:   sweep solver, losses, Jacobian, reduced gradients
- varcontrol:  steepest-descent inverter Var optimization
- tapcontrol:  voltage-loop trigger and tap-position search
- dispatch:    master-slave grouping and in-group Var allocation
- harness:     quasi-static time-series simulation and baselines
"""

from .feeder import (
    Feeder,
    FeederError,
    LineSegment,
    Node,
    OperatingPoint,
    PvUnit,
    RegulatorBank,
    ValidationError,
    VoltageLimits,
    apply_operating_point,
    feeder_from_dict,
    feeder_to_dict,
    load_feeder,
    load_profile,
    pv_q_limit,
    save_feeder,
)

__version__ = "0.1.0"

__all__ = [
    "Feeder", "FeederError", "LineSegment", "Node", "OperatingPoint", "PvUnit",
    "RegulatorBank", "ValidationError", "VoltageLimits", "apply_operating_point",
    "feeder_from_dict", "feeder_to_dict", "load_feeder", "load_profile",
    "pv_q_limit", "save_feeder",
]
