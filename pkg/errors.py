"""
errors.py

Exception types shared by every module of the platoon simulator.
Configuration problems are reported before tick 0; faults raised while a
tick is running are wrapped in SimulationFault so the offending tick is kept.
"""


class PlatoonSimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(PlatoonSimError, ValueError):
    """Invalid scenario configuration (bad value, unknown key, infeasible geometry)."""


class InputError(PlatoonSimError, ValueError):
    """Invalid argument handed to an operation (negative gap, singular weight...)."""


class SynthesisError(PlatoonSimError, RuntimeError):
    """Controller synthesis did not converge."""


class EstimationFault(PlatoonSimError, RuntimeError):
    """Kalman filter update could not be computed."""


class ParticleDivergence(PlatoonSimError, RuntimeError):
    """Every particle weight underflowed to zero during an update."""


class SimulationFault(PlatoonSimError, RuntimeError):
    """
    A fault that halts the run.

    Args:
        message: Human readable diagnostic.
        tick: Tick at which the fault happened, if known.
    """

    def __init__(self, message, tick=None):
        super().__init__(message)
        self.tick = tick

    def __str__(self):
        base = super().__str__()
        if self.tick is None:
            return base
        return f"tick {self.tick}: {base}"
