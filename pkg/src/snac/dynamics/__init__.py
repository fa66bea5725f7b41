"""Gravity, propagation, clocks and orbital elements."""
from .clock import (
    ClockState,
    allan_variance_fit,
    bias_process_noise,
    clock_process_noise,
    clock_stm,
    clock_transition,
)
from .gravity import GravityField, gravity_accel, potential_body, sh_normalization
from .orbits import (
    OrbitalElements,
    RelativeOrbitalElements,
    cartesian_to_elements,
    elements_to_cartesian,
    mean_to_osculating,
    oe_to_roe,
    osculating_to_mean,
    roe_to_oe,
)
from .propagation import ForceModel, SpacecraftState, SunEphemeris, propagate, propagate_adaptive
from .rotation import RotationState
