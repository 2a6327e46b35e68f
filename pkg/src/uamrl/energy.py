"""Rotorcraft power model and battery bookkeeping for the eVTOL fleet.

Power figures follow the standard rotary-wing model: a blade-profile term, an
induced term and (in forward flight) a parasite term. Default constants describe
a Joby S4-class aircraft. Energies are carried in kWh.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

GRAVITY = 9.80665
JOULES_PER_KWH = 3.6e6

# Tolerance used when checking the rounded derived quantities of the aircraft table.
DERIVED_RTOL = 1e-3
# Slack allowed on the inner square-root term of the forward-flight induced power.
INDUCED_TERM_SLACK = 1e-12


class InvalidParameterError(ValueError):
    """Raised for negative, non-finite or inconsistent physical parameters."""


class ModelDomainError(ArithmeticError):
    """Raised when the power model is evaluated outside its domain."""


def _check_finite_nonneg(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value) or value < 0:
            raise InvalidParameterError(f"{name} must be finite and >= 0, got {value!r}")


@dataclass(frozen=True)
class UamSpec:
    """Aerodynamic description of one aircraft.

    ``disc_area``, ``rotor_solidity`` and ``weight`` are stored as tabulated but
    validated against ``pi R^2``, ``0.2231 b / (pi R)`` and ``m g``. The tabulated
    tip speed, fuselage drag ratio and mean induced velocity do not follow their
    nominal formulas, so they are taken as given; see :func:`derived_deviations`.
    With ``check_derived=False`` the cross-checks are skipped and zero-valued
    quantities are accepted, which is useful for probing the model's limits.
    """

    seat_count: int = 4
    flight_speed: float = 73.762
    mass: float = 1815.0
    weight: float = 17799.0
    rotor_radius: float = 1.45
    disc_area: float = 6.61
    blade_count: int = 5
    rotor_solidity: float = 0.2449
    blade_angular_velocity: float = 78.0
    tip_speed: float = 112.776
    air_density: float = 1.225
    fuselage_drag_ratio: float = 0.01
    mean_induced_velocity: float = 26.45
    profile_drag_coefficient: float = 0.045
    induced_power_factor: float = 0.052
    check_derived: bool = True

    def __post_init__(self) -> None:
        if int(self.seat_count) != self.seat_count or self.seat_count < 1:
            raise InvalidParameterError(f"seat_count must be an integer >= 1, got {self.seat_count!r}")
        if int(self.blade_count) != self.blade_count or self.blade_count < 1:
            raise InvalidParameterError(f"blade_count must be an integer >= 1, got {self.blade_count!r}")
        for f in fields(self):
            if f.name in ("seat_count", "blade_count", "check_derived"):
                continue
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise InvalidParameterError(f"{f.name} must be finite, got {value!r}")
            if value < 0 or (value == 0 and self.check_derived):
                raise InvalidParameterError(f"{f.name} must be > 0, got {value!r}")
        if self.check_derived:
            for name, dev in derived_deviations(self, checked_only=True).items():
                if dev > DERIVED_RTOL:
                    raise InvalidParameterError(
                        f"{name} deviates from its defining formula by {dev:.2e} (relative)"
                    )


def derived_deviations(spec: UamSpec, checked_only: bool = False) -> dict[str, float]:
    """Relative deviation of each tabulated derived quantity from its formula."""

    def rel(actual: float, expected: float) -> float:
        return abs(actual - expected) / abs(expected)

    r = spec.rotor_radius
    out = {
        "disc_area": rel(spec.disc_area, math.pi * r * r),
        "rotor_solidity": rel(spec.rotor_solidity, 0.2231 * spec.blade_count / (math.pi * r)),
        "weight": rel(spec.weight, spec.mass * GRAVITY),
    }
    if not checked_only:
        s, a, rho = spec.rotor_solidity, spec.disc_area, spec.air_density
        out["tip_speed"] = rel(spec.tip_speed, spec.blade_angular_velocity * r)
        out["fuselage_drag_ratio"] = rel(spec.fuselage_drag_ratio, 0.0151 / (s * a))
        out["mean_induced_velocity"] = rel(spec.mean_induced_velocity, math.sqrt(spec.weight / (s * rho * a)))
    return out


@dataclass(frozen=True)
class BatterySpec:
    capacity_kwh: float = 150.0
    charge_per_journey_kwh: float = 30.0
    charge_time_per_journey_s: float = 300.0
    charger_power_w: float = 360_000.0
    # Recorded for completeness; nothing in the model consumes these.
    c_rate_per_hour: float = 2.4
    state_of_charge_min: float = 25.0
    charge_rate_per_journey: float = 0.20

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0:
                raise InvalidParameterError(f"{f.name} must be finite and > 0, got {value!r}")
        if self.charge_per_journey_kwh > self.capacity_kwh:
            raise InvalidParameterError("charge_per_journey_kwh exceeds capacity_kwh")
        implied = self.charger_power_w * self.charge_time_per_journey_s / JOULES_PER_KWH
        if abs(implied - self.charge_per_journey_kwh) > 1e-6 * self.charge_per_journey_kwh:
            raise InvalidParameterError(
                f"charger power x charge time gives {implied} kWh, "
                f"not the declared {self.charge_per_journey_kwh} kWh per journey"
            )


@dataclass(frozen=True)
class BatteryState:
    energy_kwh: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.energy_kwh) or self.energy_kwh < 0:
            raise InvalidParameterError(f"battery energy must be finite and >= 0, got {self.energy_kwh!r}")


@dataclass(frozen=True)
class PowerTerms:
    """Additive power components in watts."""

    induced: float
    blade_profile: float
    parasite: float = 0.0

    @property
    def total(self) -> float:
        return self.induced + self.blade_profile + self.parasite


def hover_power(spec: UamSpec, payload_n: float = 0.0) -> PowerTerms:
    """Power to hover, climb or descend while carrying ``payload_n`` newtons."""
    _check_finite_nonneg(payload_n=payload_n)
    rho, s, a = spec.air_density, spec.rotor_solidity, spec.disc_area
    omega, r = spec.blade_angular_velocity, spec.rotor_radius
    w_total = spec.weight + payload_n
    blade = spec.profile_drag_coefficient / 8.0 * rho * s * a * omega**3 * r**3
    induced = (1.0 + spec.induced_power_factor) * w_total**1.5 / math.sqrt(2.0 * rho * a)
    return PowerTerms(induced=induced, blade_profile=blade)


def cruise_power(spec: UamSpec, v: float | None = None, payload_n: float = 0.0) -> PowerTerms:
    """Forward-flight power at airspeed ``v`` (defaults to the cruise speed).

    At ``v = 0`` every term reduces to its hover counterpart.
    """
    if v is None:
        v = spec.flight_speed
    _check_finite_nonneg(v=v)
    hover = hover_power(spec, payload_n)
    v0, u_tip = spec.mean_induced_velocity, spec.tip_speed
    inner = math.sqrt(1.0 + v**4 / (4.0 * v0**4)) - v**2 / (2.0 * v0**2)
    if inner < 0.0:
        if inner < -INDUCED_TERM_SLACK:
            raise ModelDomainError(f"induced-velocity term is negative ({inner:.3e}) at v={v}")
        inner = 0.0
    induced = hover.induced * math.sqrt(inner)
    blade = hover.blade_profile * (1.0 + 3.0 * v**2 / u_tip**2)
    parasite = 0.5 * spec.fuselage_drag_ratio * spec.air_density * spec.rotor_solidity * spec.disc_area * v**3
    return PowerTerms(induced=induced, blade_profile=blade, parasite=parasite)


def energy_for_step(power_w: float, duration_s: float) -> float:
    """Energy in kWh drawn by a constant ``power_w`` over ``duration_s`` seconds."""
    _check_finite_nonneg(power_w=power_w, duration_s=duration_s)
    return power_w * duration_s / JOULES_PER_KWH


def discharge(state: BatteryState, energy_kwh: float) -> tuple[BatteryState, bool]:
    """Draw ``energy_kwh``; returns the new state and whether the request ran the pack dry."""
    _check_finite_nonneg(energy_kwh=energy_kwh)
    depleted = energy_kwh > state.energy_kwh
    return BatteryState(max(0.0, state.energy_kwh - energy_kwh)), depleted


def charge(state: BatteryState, spec: BatterySpec, duration_s: float) -> BatteryState:
    _check_finite_nonneg(duration_s=duration_s)
    gained = energy_for_step(spec.charger_power_w, duration_s)
    return BatteryState(min(spec.capacity_kwh, state.energy_kwh + gained))


def payload_newtons(passengers: int, passenger_mass_kg: float = 100.0) -> float:
    return passengers * passenger_mass_kg * GRAVITY
