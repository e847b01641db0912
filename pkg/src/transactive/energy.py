"""Household physics and tariffs: HVAC thermal dynamics, shiftable load,
battery storage, two-part grid tariff and discomfort costs.

Decision variables are in kW per slot, stored energy in kWh, money in $.
Energy-denominated quantities (grid energy charge, battery throughput and
storage, flexible-load total) are converted with ``slot_hours``. Slot indices
are 0-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np


class ParameterError(ValueError):
    pass


@dataclass
class HouseholdParams:
    # HVAC thermal model
    thermal_capacity: float
    thermal_resistance: float
    hvac_mode_coeff: float  # > 0 cooling, < 0 heating
    temp_ref: float
    temp_min: float
    temp_max: float
    discomfort_ac: float
    # shiftable load
    discomfort_flex: float
    flex_total: float
    flex_window: tuple[int, ...]
    flex_min: np.ndarray
    flex_max: np.ndarray
    flex_ref: np.ndarray
    # grid supply and tariff
    grid_cap: float
    energy_price: float
    peak_price: float
    # battery
    battery_capacity: float = 0.0
    charge_eff: float = 1.0
    discharge_eff: float = 1.0
    soc_min_frac: float = 0.0
    soc_max_frac: float = 1.0
    charge_cap: float = 0.0
    discharge_cap: float = 0.0
    soc_initial: float = 0.0
    battery_wear: float = 0.0
    hvac_max: float = math.inf
    cyclic_soc: bool = False

    def __post_init__(self) -> None:
        self.flex_window = tuple(sorted(int(t) for t in self.flex_window))
        for name in ("flex_min", "flex_max", "flex_ref"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).ravel())

    @property
    def horizon(self) -> int:
        return self.flex_min.size

    def window_mask(self) -> np.ndarray:
        mask = np.zeros(self.horizon, dtype=bool)
        mask[list(self.flex_window)] = True
        return mask

    def soc_bounds(self) -> tuple[float, float]:
        return self.soc_min_frac * self.battery_capacity, self.soc_max_frac * self.battery_capacity

    def validate(self, slot_hours: float = 1.0) -> None:
        """Raise ParameterError naming the first broken invariant."""
        H = self.horizon
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and math.isnan(v):
                raise ParameterError(f"{f.name} is NaN")
        if self.thermal_capacity <= 0 or self.thermal_resistance <= 0:
            raise ParameterError("thermal_capacity and thermal_resistance must be positive")
        if not self.temp_min <= self.temp_ref <= self.temp_max:
            raise ParameterError("need temp_min <= temp_ref <= temp_max")
        for name in ("discomfort_ac", "discomfort_flex", "battery_wear", "energy_price", "peak_price",
                     "grid_cap", "battery_capacity", "charge_cap", "discharge_cap", "flex_total", "hvac_max"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.flex_max.size != H or self.flex_ref.size != H:
            raise ParameterError("flex_min, flex_max and flex_ref must have equal length")
        if any(t < 0 or t >= H for t in self.flex_window):
            raise ParameterError("flex_window indexes outside the horizon")
        w = self.window_mask()
        if np.any(self.flex_min[w] > self.flex_max[w]):
            t = int(np.flatnonzero(w & (self.flex_min > self.flex_max))[0])
            raise ParameterError(f"flex_min > flex_max at slot {t}")
        lo = slot_hours * float(np.sum(self.flex_min[w]))
        hi = slot_hours * float(np.sum(self.flex_max[w]))
        if not lo - 1e-9 <= self.flex_total <= hi + 1e-9:
            raise ParameterError(f"flex_total {self.flex_total} outside achievable range [{lo}, {hi}]")
        if not 0.0 <= self.charge_eff <= 1.0:
            raise ParameterError("charge_eff must lie in [0, 1]")
        if not 0.0 < self.discharge_eff <= 1.0:
            raise ParameterError("discharge_eff must lie in (0, 1]")
        if not (0.0 <= self.soc_min_frac < 1.0 and 0.0 < self.soc_max_frac <= 1.0):
            raise ParameterError("soc fractions out of range")
        if self.soc_min_frac >= self.soc_max_frac:
            raise ParameterError("soc_min_frac must be below soc_max_frac")
        e_lo, e_hi = self.soc_bounds()
        if not e_lo - 1e-9 <= self.soc_initial <= e_hi + 1e-9:
            raise ParameterError(f"soc_initial {self.soc_initial} outside [{e_lo}, {e_hi}]")


@dataclass
class ExogenousSeries:
    outdoor_temp: np.ndarray
    renewable_avail: np.ndarray
    inflexible_load: np.ndarray
    slot_hours: float = 1.0
    t_in_initial: float | None = None  # None means start at the user's temp_ref

    def __post_init__(self) -> None:
        for name in ("outdoor_temp", "renewable_avail", "inflexible_load"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).ravel())

    @property
    def horizon(self) -> int:
        return self.outdoor_temp.size

    def validate(self) -> None:
        H = self.horizon
        for name in ("renewable_avail", "inflexible_load"):
            arr = getattr(self, name)
            if arr.size != H:
                raise ParameterError(f"{name} has length {arr.size}, expected {H}")
            if np.any(arr < 0):
                raise ParameterError(f"{name} must be non-negative")
        if self.slot_hours <= 0:
            raise ParameterError("slot_hours must be positive")

    def initial_temp(self, params: HouseholdParams) -> float:
        return params.temp_ref if self.t_in_initial is None else float(self.t_in_initial)


@dataclass
class Schedule:
    p_re: np.ndarray
    p_g: np.ndarray
    p_ac: np.ndarray
    p_f: np.ndarray
    p_ch: np.ndarray
    p_dis: np.ndarray
    e_b: np.ndarray
    t_in: np.ndarray

    def __post_init__(self) -> None:
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=float).ravel())

    @property
    def horizon(self) -> int:
        return self.p_g.size

    def lengths(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name).size for f in fields(self)}

    @classmethod
    def zeros(cls, H: int, t_in: float = 0.0, e_b: float = 0.0) -> "Schedule":
        z = np.zeros(H)
        return cls(z, z, z, z, z, z, np.full(H, e_b), np.full(H, t_in))

    def blend(self, other: "Schedule", theta: float) -> "Schedule":
        return Schedule(*(theta * getattr(self, f.name) + (1 - theta) * getattr(other, f.name) for f in fields(self)))


def hvac_step(t_in_prev: float, t_out: float, p_ac: float, params: HouseholdParams) -> float:
    C, R, eta = params.thermal_capacity, params.thermal_resistance, params.hvac_mode_coeff
    return t_in_prev - (t_in_prev - t_out + eta * R * p_ac) / (C * R)


def indoor_temperature(p_ac, exo: ExogenousSeries, params: HouseholdParams) -> np.ndarray:
    """Roll ``hvac_step`` forward from the initial indoor temperature."""
    out = np.empty(exo.horizon)
    t = exo.initial_temp(params)
    for k in range(exo.horizon):
        t = hvac_step(t, exo.outdoor_temp[k], p_ac[k], params)
        out[k] = t
    return out


def storage_level(p_ch, p_dis, params: HouseholdParams, slot_hours: float = 1.0) -> np.ndarray:
    out = np.empty(len(p_ch))
    e = params.soc_initial
    for k in range(len(p_ch)):
        e = e + slot_hours * (params.charge_eff * p_ch[k] - p_dis[k] / params.discharge_eff)
        out[k] = e
    return out


def thermal_affine(exo: ExogenousSeries, params: HouseholdParams) -> tuple[np.ndarray, np.ndarray]:
    """Return (c, M) with t_in = c + M @ p_ac, M lower triangular."""
    H = exo.horizon
    a = 1.0 / (params.thermal_capacity * params.thermal_resistance)
    gain = -a * params.hvac_mode_coeff * params.thermal_resistance
    decay = 1.0 - a
    c = np.empty(H)
    M = np.zeros((H, H))
    t = exo.initial_temp(params)
    row = np.zeros(H)
    for k in range(H):
        t = decay * t + a * exo.outdoor_temp[k]
        row = decay * row
        row[k] = gain
        c[k] = t
        M[k] = row
    return c, M


def cost_breakdown(s: Schedule, params: HouseholdParams, slot_hours: float = 1.0) -> dict[str, float]:
    H = params.horizon
    bad = {k: v for k, v in s.lengths().items() if v != H}
    if bad:
        raise ValueError(f"schedule lengths {bad} do not match horizon {H}")
    w = params.window_mask()
    grid = params.energy_price * slot_hours * float(np.sum(s.p_g)) + params.peak_price * float(np.max(s.p_g, initial=0.0))
    ac = params.discomfort_ac * float(np.sum((s.t_in - params.temp_ref) ** 2))
    flex = params.discomfort_flex * float(np.sum((s.p_f[w] - params.flex_ref[w]) ** 2))
    batt = params.battery_wear * slot_hours * float(np.sum(s.p_ch + s.p_dis))
    return {"grid": grid, "ac": ac, "flex": flex, "battery": batt}


def operating_cost(s: Schedule, params: HouseholdParams, slot_hours: float = 1.0) -> float:
    return sum(cost_breakdown(s, params, slot_hours).values())


def check_balance(s: Schedule, trades_in, exo: ExogenousSeries) -> np.ndarray:
    """Per-slot supply minus demand; ``trades_in`` is the net import from peers."""
    trades_in = np.zeros(exo.horizon) if trades_in is None else np.asarray(trades_in, dtype=float)
    return s.p_re + s.p_g + s.p_dis + trades_in - (s.p_ac + s.p_f + exo.inflexible_load + s.p_ch)


@dataclass
class Violation:
    constraint: str
    slot: int | None
    amount: float


def check_schedule(s: Schedule, params: HouseholdParams, exo: ExogenousSeries, trades_in=None,
                   tol: float = 1e-6) -> list[Violation]:
    """Every constraint the household must respect, as a list of violations."""
    out: list[Violation] = []
    h = exo.slot_hours

    def over(name, arr):
        for t in np.flatnonzero(arr > tol):
            out.append(Violation(name, int(t), float(arr[t])))

    over("balance", np.abs(check_balance(s, trades_in, exo)))
    over("grid_min", -s.p_g)
    over("grid_cap", s.p_g - params.grid_cap)
    over("renewable_min", -s.p_re)
    over("renewable_avail", s.p_re - exo.renewable_avail)
    over("hvac_min", -s.p_ac)
    over("hvac_max", s.p_ac - params.hvac_max)
    over("charge_min", -s.p_ch)
    over("charge_cap", s.p_ch - params.charge_cap)
    over("discharge_min", -s.p_dis)
    over("discharge_cap", s.p_dis - params.discharge_cap)
    e_lo, e_hi = params.soc_bounds()
    over("soc_min", e_lo - s.e_b)
    over("soc_max", s.e_b - e_hi)
    over("soc_dynamics", np.abs(s.e_b - storage_level(s.p_ch, s.p_dis, params, h)))
    over("temp_min", params.temp_min - s.t_in)
    over("temp_max", s.t_in - params.temp_max)
    over("temp_dynamics", np.abs(s.t_in - indoor_temperature(s.p_ac, exo, params)))
    w = params.window_mask()
    over("flex_min", np.where(w, params.flex_min - s.p_f, 0.0))
    over("flex_max", np.where(w, s.p_f - params.flex_max, 0.0))
    over("flex_outside_window", np.where(w, 0.0, np.abs(s.p_f)))
    gap = abs(h * float(np.sum(s.p_f[w])) - params.flex_total)
    if gap > tol:
        out.append(Violation("flex_total", None, gap))
    if params.cyclic_soc and s.horizon:
        gap = abs(s.e_b[-1] - params.soc_initial)
        if gap > tol:
            out.append(Violation("cyclic_soc", None, gap))
    return out
