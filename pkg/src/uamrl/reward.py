"""Team reward for the fleet.

Every agent receives ``scale * common * (1 + service * energy)``: a common term
that shrinks as passengers accumulate waiting time, multiplied by an individual
bonus that is non-zero only on steps where the agent picks up or drops off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from uamrl.env import AgentEvents, SimState


@dataclass(frozen=True)
class RewardConfig:
    scaling_factor: float = 1.0
    service_event_reward: float = 1.0
    energy_normalizer: float = 150.0
    # "cumulative": each passenger contributes the running sum of its waits over
    # past steps; "current": only its wait at this step.
    wait_mode: str = "cumulative"

    def __post_init__(self) -> None:
        if not self.scaling_factor > 0:
            raise ValueError("scaling_factor must be > 0")
        if not self.service_event_reward >= 0:
            raise ValueError("service_event_reward must be >= 0")
        if not self.energy_normalizer > 0:
            raise ValueError("energy_normalizer must be > 0")
        if self.wait_mode not in ("cumulative", "current"):
            raise ValueError(f"wait_mode must be 'cumulative' or 'current', got {self.wait_mode!r}")


@dataclass(frozen=True)
class RewardBreakdown:
    common: float
    service: np.ndarray
    energy: np.ndarray
    individual: np.ndarray
    total: np.ndarray

    @property
    def team(self) -> float:
        return float(self.total.sum())


def common_reward(cumulative_waits: Sequence[float]) -> float:
    waits = np.asarray(cumulative_waits, dtype=float)
    if np.any(waits < 0):
        raise ValueError("waiting times must be >= 0")
    return float(np.sum(1.0 / (1.0 + waits)))


def service_reward(pickups: int, dropoffs: int, unit: float = 1.0) -> float:
    return unit * (pickups + dropoffs)


def energy_reward(
    e_m_kwh: float,
    hover_energy_kwh: float,
    cruise_energy_kwh: float,
    a_h_flag: int,
    a_p_flag: int,
    normalizer: float,
) -> float:
    """Remaining energy minus this step's consumption, as a fraction of ``normalizer``.

    Can go negative when the step costs more than the pack holds.
    """
    if a_h_flag not in (0, 1) or a_p_flag not in (0, 1) or a_h_flag + a_p_flag > 1:
        raise ValueError("action flags must be 0/1 with at most one set")
    return (e_m_kwh - (hover_energy_kwh * a_h_flag + cruise_energy_kwh * a_p_flag)) / normalizer


def total_reward(common: float, service: float, energy: float, scaling_factor: float = 1.0) -> float:
    return scaling_factor * common * (1.0 + service * energy)


def compute_rewards(state: SimState, events: Sequence[AgentEvents], cfg: RewardConfig) -> RewardBreakdown:
    """Reward breakdown for the step that just produced ``events``."""
    if cfg.wait_mode == "cumulative":
        waits = [p.cum_wait for p in state.passengers]
    else:
        waits = [p.last_wait for p in state.passengers]
    rc = common_reward(waits)
    m = len(events)
    service = np.zeros(m)
    energy = np.zeros(m)
    for ev in events:
        service[ev.agent] = service_reward(len(ev.pickups), len(ev.dropoffs), cfg.service_event_reward)
        used = ev.energy_used_kwh
        energy[ev.agent] = energy_reward(
            ev.energy_before_kwh,
            used if ev.hover_flag else 0.0,
            used if ev.move_flag else 0.0,
            ev.hover_flag,
            ev.move_flag,
            cfg.energy_normalizer,
        )
    individual = service * energy
    total = cfg.scaling_factor * rc * (1.0 + individual)
    if not (math.isfinite(rc) and np.all(np.isfinite(total))):
        raise FloatingPointError("non-finite reward")
    return RewardBreakdown(rc, service, energy, individual, total)
