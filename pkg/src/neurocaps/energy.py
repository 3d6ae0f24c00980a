"""Joules-per-inference model for GPU-style and neuromorphic estimates."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError

# Fitted so that per-core power * 55 cores / 106 inf/s reproduces 0.0052 J.
LOIHI_CORE_WATTS = 0.01002
LOIHI_EFFICIENCY_FACTOR = 109.0
LOIHI_CORES = 55


def joules_per_inference(dynamic_power_watts: float, inferences_per_second: float) -> float:
    """Average dynamic power divided by throughput."""
    if inferences_per_second <= 0:
        raise ContractError("inferences_per_second must be positive")
    return dynamic_power_watts / inferences_per_second


@dataclass(frozen=True)
class EnergyModel:
    gpu_joules_per_inference: float
    efficiency_factor: float = LOIHI_EFFICIENCY_FACTOR
    per_core_dynamic_power_watts: float = LOIHI_CORE_WATTS
    cores: int = LOIHI_CORES
    inferences_per_second: float = 106.0

    def __post_init__(self):
        for name in ("gpu_joules_per_inference", "efficiency_factor",
                     "per_core_dynamic_power_watts", "cores", "inferences_per_second"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be strictly positive")


def loihi_energy_bounds(m: EnergyModel) -> tuple[float, float]:
    """(lower, upper): GPU figure over the efficiency factor, and all-cores-active power over throughput.

    ``lower <= upper`` is typical but not enforced.
    """
    lower = m.gpu_joules_per_inference / m.efficiency_factor
    upper = joules_per_inference(m.per_core_dynamic_power_watts * m.cores, m.inferences_per_second)
    return lower, upper
