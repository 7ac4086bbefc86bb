"""Synthetic cycle-to-cycle combustion plant used as ground truth.

Two carried states: a residual-gas thermal level t_res in (0, 2) and
the previous cycle's IMEP.  Combustion each cycle is driven by an
effective thermal energy

    e_th = w_res * t_res + w_nvo * nvo_n,   nvo_n = (nvo - 150) / 210

and a smooth misfire factor eta = sigmoid((e_th - misfire) / width):
below the misfire threshold IMEP collapses toward zero and CA50
saturates late, but the map stays differentiable everywhere.

Output maps (before measurement noise):

    imep = eta * (k_fuel * doi_fuel * exp(c_th (e_th - e_ref)) + imep_floor)
    ca50 = eta * (phase0 - k_phase e_th + k_water doi_water) + (1-eta) ca50_late
    mprr = m_gain * imep * sigmoid(s_mprr * (ca50_knee - ca50))
    nox  = nox_gain * (imep / imep_ref)^nox_load_exp * 2 sigmoid(-k_nox ca50) * eta

State update: t_res+ = 2 sigmoid(a0 + a_imep imep + a_nvo nvo_n
- a_water doi_water), so retained thermal energy rises with load and
NVO and falls with water injection.  Signs hold structurally for any
strictly positive gains (one validity condition ties phase0, k_water
and ca50_late together).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .network import ModelOutput


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


@dataclass
class Actuation:
    """Commanded actuators for one cycle (ms, ms, CAD)."""

    doi_fuel: float
    doi_water: float
    nvo: float

    def to_array(self) -> np.ndarray:
        return np.array([self.doi_fuel, self.doi_water, self.nvo])

    @classmethod
    def from_array(cls, arr) -> "Actuation":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (3,):
            raise ValueError("actuation must have 3 components")
        return cls(*(float(v) for v in arr))


@dataclass
class PlantState:
    """Carried plant state."""

    t_res: float = 1.0
    last_imep: float = 3.0

    def copy(self) -> "PlantState":
        return PlantState(self.t_res, self.last_imep)


@dataclass
class PlantParams:
    """Gains, offsets, misfire threshold and noise levels.

    All monotonicity-bearing gains must be strictly positive, t_res
    bounds are fixed at (0, 2) by the logistic update, and
    ca50_late must stay above the latest reachable normal-burn CA50
    (phase0 + k_water_phase * water_max) so misfire blending can only
    delay phasing.
    """

    # fuel -> IMEP
    k_fuel: float = 4.2
    imep_floor: float = 0.05
    c_th: float = 0.12
    e_ref: float = 0.85
    # thermal energy weights
    w_res: float = 0.5
    w_nvo: float = 0.8
    # phasing map
    phase0: float = 15.0
    k_phase: float = 11.0
    k_water_phase: float = 3.5
    ca50_late: float = 19.0
    # misfire sigmoid
    misfire_threshold: float = 0.25
    misfire_width: float = 0.08
    # pressure-rise map
    m_gain: float = 2.8
    s_mprr: float = 0.22
    ca50_knee: float = 4.0
    # NOx map
    nox_gain: float = 450.0
    nox_load_exp: float = 1.6
    k_nox: float = 0.10
    imep_ref: float = 6.0
    # residual-state logistic update
    a0: float = -1.8
    a_imep: float = 0.35
    a_nvo: float = 1.2
    a_water: float = 0.8
    # per-output measurement noise std (imep, ca50, nox, mprr)
    noise_std: tuple = (0.15, 0.5, 15.0, 0.45)
    # largest water command the validity condition must cover
    water_max: float = 1.0

    _POSITIVE = ("k_fuel", "c_th", "w_res", "w_nvo", "k_phase", "k_water_phase",
                 "misfire_width", "m_gain", "s_mprr", "nox_gain", "nox_load_exp",
                 "k_nox", "imep_ref", "a_imep", "a_nvo", "a_water")

    def validate(self) -> None:
        for name in self._POSITIVE:
            if getattr(self, name) <= 0:
                raise ValueError(f"plant gain {name} must be strictly positive")
        if any(s < 0 for s in self.noise_std) or len(self.noise_std) != 4:
            raise ValueError("noise_std must be 4 non-negative values")
        if self.ca50_late < self.phase0 + self.k_water_phase * self.water_max:
            raise ValueError(
                "ca50_late must exceed the latest normal-burn CA50 "
                "(phase0 + k_water_phase * water_max)")

    def replace(self, **kw) -> "PlantParams":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        p = PlantParams(**vals)
        p.validate()
        return p


def nvo_normalized(nvo: float) -> float:
    return (nvo - 150.0) / 210.0


def thermal_energy(params: PlantParams, t_res: float, nvo: float) -> float:
    return params.w_res * t_res + params.w_nvo * nvo_normalized(nvo)


def combustion_efficiency(params: PlantParams, e_th: float) -> float:
    """Smooth misfire factor in (0, 1)."""
    return float(_sigmoid((e_th - params.misfire_threshold) / params.misfire_width))


def plant_step(state: PlantState, act: Actuation, params: PlantParams,
               rng: np.random.Generator):
    """Advance the plant one cycle.

    Returns (next PlantState, measured ModelOutput).  The state evolves
    on the noise-free physics; Gaussian measurement noise (4 draws per
    call, even at zero std, to keep RNG streams aligned) lands on the
    returned outputs only.
    """
    e_th = thermal_energy(params, state.t_res, act.nvo)
    eta = combustion_efficiency(params, e_th)

    imep = eta * (params.k_fuel * act.doi_fuel
                  * np.exp(params.c_th * (e_th - params.e_ref))
                  + params.imep_floor)
    ca50_core = (params.phase0 - params.k_phase * e_th
                 + params.k_water_phase * act.doi_water)
    ca50 = eta * ca50_core + (1.0 - eta) * params.ca50_late
    mprr = params.m_gain * imep * float(_sigmoid(params.s_mprr * (params.ca50_knee - ca50)))
    nox = (params.nox_gain * (imep / params.imep_ref) ** params.nox_load_exp
           * 2.0 * float(_sigmoid(-params.k_nox * ca50)) * eta)

    z = (params.a0 + params.a_imep * imep + params.a_nvo * nvo_normalized(act.nvo)
         - params.a_water * act.doi_water)
    next_state = PlantState(t_res=float(2.0 * _sigmoid(z)), last_imep=float(imep))

    noise = rng.standard_normal(4) * np.asarray(params.noise_std)
    measured = np.array([imep, ca50, nox, mprr]) + noise
    return next_state, ModelOutput.from_array(measured)


def excitation_sequence(n_cycles: int, lo, hi, rng: np.random.Generator,
                        hold_range: tuple[int, int] = (2, 15)) -> np.ndarray:
    """Per-channel amplitude-modulated PRBS over the actuator box.

    Each channel independently holds a uniform random level for a
    uniform random 2..15 cycles, covering the box densely over long
    sequences.  Returns an (n_cycles, len(lo)) array.
    """
    if n_cycles < 1:
        raise ValueError("n_cycles must be >= 1")
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != hi.shape or np.any(hi < lo):
        raise ValueError("invalid excitation bounds")
    out = np.empty((n_cycles, lo.size))
    h_lo, h_hi = hold_range
    for ch in range(lo.size):
        k = 0
        while k < n_cycles:
            hold = int(rng.integers(h_lo, h_hi + 1))
            level = rng.uniform(lo[ch], hi[ch])
            out[k:k + hold, ch] = level
            k += hold
    return out
