"""Synthetic single-occupant apartment: occupancy schedules and first-order indoor climate.

CO2, temperature and humidity each relax toward an occupancy-dependent target.
Every channel is advanced with the exact exponential step for a piecewise
constant input, ``y[k] = phi * y[k-1] + (1 - phi) * target[k]`` with
``phi = exp(-dt / tau)``, so fixed points are reached without discretization
error.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.signal import lfilter

from .dataset import RANGES, SAMPLE_PERIOD, SensorSeries, SplitSpec
from .features import season_index

SAMPLES_PER_DAY = 86400 // SAMPLE_PERIOD


@dataclass(frozen=True)
class ApartmentParams:
    volume: float = 55.0  # m3
    co2_gen_per_person: float = 5.1333  # ppm*m3/s; steady state ~900 ppm at the defaults
    ventilation_rate: float = 0.7  # air changes per hour
    outdoor_co2: float = 420.0
    thermal_time_constant: float = 6.0  # hours
    setpoint_temp: float = 21.5
    occupant_temp_gain: float = 0.8
    temp_diurnal_amp: float = 0.3
    rh_baseline: float = 35.0
    rh_occupant_gain: float = 3.0
    rh_time_constant: float = 0.08  # hours
    rh_drift_std: float = 2.5
    rh_drift_tau: float = 24.0  # hours
    activity_spread: float = 0.15  # log-sd of per-stay CO2 generation
    noise_std: dict = field(default_factory=lambda: {"co2": 8.0, "t_indoor": 0.1, "rh": 1.0})

    def __post_init__(self):
        for name in ("volume", "co2_gen_per_person", "ventilation_rate", "outdoor_co2",
                     "thermal_time_constant", "setpoint_temp", "rh_baseline", "rh_time_constant",
                     "rh_drift_tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("occupant_temp_gain", "rh_occupant_gain", "rh_drift_std", "activity_spread",
                     "temp_diurnal_amp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if any(v < 0 for v in self.noise_std.values()):
            raise ValueError("noise_std must be >= 0")

    def steady_state_co2(self, occupants: float = 1.0, ach: float | None = None) -> float:
        a = (self.ventilation_rate if ach is None else ach) / 3600.0
        return self.outdoor_co2 + occupants * self.co2_gen_per_person / (self.volume * a)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ApartmentParams":
        return cls(**d)


@dataclass(frozen=True)
class SchedulerParams:
    mean_occupied_duration: float = 45.0  # minutes
    mean_vacant_duration: float = 30.0
    diurnal_modulation: float = 0.5
    peak_hour: float = 20.0  # time of day with the longest stays
    min_duration: float = 1.0  # minutes
    seed: int = 0

    def __post_init__(self):
        if not (self.mean_occupied_duration > 0 and self.mean_vacant_duration > 0):
            raise ValueError("durations must be > 0")
        if self.min_duration < 0 or self.diurnal_modulation < 0:
            raise ValueError("min_duration and diurnal_modulation must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SchedulerParams":
        return cls(**d)


@dataclass(frozen=True)
class SeasonProfile:
    """Per-season offsets, ordered winter, spring, summer, autumn."""

    setpoint_offset: tuple = (-0.1, 0.0, 0.1, 0.0)
    rh_offset: tuple = (-0.5, 0.0, 0.5, 0.3)
    ach_factor: tuple = (0.95, 1.0, 1.05, 1.0)

    @classmethod
    def neutral(cls) -> "SeasonProfile":
        return cls((0.0,) * 4, (0.0,) * 4, (1.0,) * 4)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SeasonProfile":
        return cls(**{k: tuple(v) for k, v in d.items()})


def _epoch(start) -> int:
    if isinstance(start, (int, np.integer)):
        t = int(start)
    else:
        ts = pd.Timestamp(start)
        t = int((ts.tz_localize("UTC") if ts.tzinfo is None else ts).timestamp())
    return t - t % SAMPLE_PERIOD


def gen_schedule(params: SchedulerParams, horizon: float, start=0) -> np.ndarray:
    """Binary occupancy on the 30 s grid over ``horizon`` days.

    Stays and absences alternate, starting vacant. Each sojourn length is
    exponential with a mean scaled by ``exp(+-m * cos(2 pi (h - peak) / 24))``
    at its start hour ``h``: stays lengthen and absences shorten near the peak.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least one day")
    n = int(round(horizon * SAMPLES_PER_DAY))
    t0 = _epoch(start)
    rng = np.random.default_rng(params.seed)
    out = np.zeros(n, dtype=np.int8)
    k, state = 0, 0
    min_samples = max(1, int(round(params.min_duration * 60 / SAMPLE_PERIOD)))
    while k < n:
        hour = ((t0 + k * SAMPLE_PERIOD) % 86400) / 3600.0
        c = math.cos(2 * math.pi * (hour - params.peak_hour) / 24.0)
        if state:
            mean = params.mean_occupied_duration * math.exp(params.diurnal_modulation * c)
        else:
            mean = params.mean_vacant_duration * math.exp(-params.diurnal_modulation * c)
        length = max(min_samples, int(round(rng.exponential(mean) * 60 / SAMPLE_PERIOD)))
        out[k:k + length] = state
        k += length
        state = 1 - state
    return out


def timetable_schedule(blocks, horizon: float, start=0) -> np.ndarray:
    """Deterministic daily schedule; ``blocks`` are (start_hour, end_hour) pairs."""
    n = int(round(horizon * SAMPLES_PER_DAY))
    t0 = _epoch(start)
    hour = ((t0 + np.arange(n, dtype=np.int64) * SAMPLE_PERIOD) % 86400) / 3600.0
    out = np.zeros(n, dtype=np.int8)
    for lo, hi in blocks:
        out[(hour >= lo) & (hour < hi)] = 1
    return out


def sojourns(schedule: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run-length encoding: (state, length in samples) per run."""
    s = np.asarray(schedule)
    if len(s) == 0:
        return np.zeros(0, np.int8), np.zeros(0, np.int64)
    edges = np.flatnonzero(np.diff(s)) + 1
    starts = np.concatenate([[0], edges])
    lengths = np.diff(np.concatenate([starts, [len(s)]]))
    return s[starts], lengths


def occupied_durations(schedule: np.ndarray, drop_edges: bool = True) -> np.ndarray:
    """Occupied stay lengths in minutes; runs touching either end are dropped (censored)."""
    state, length = sojourns(schedule)
    keep = state == 1
    if drop_edges and len(keep):
        keep[0] = keep[-1] = False
    return length[keep] * SAMPLE_PERIOD / 60.0


def _relax(target: np.ndarray, phi: np.ndarray, y0: float) -> np.ndarray:
    """Exact first-order response; ``phi`` may change between constant blocks."""
    out = np.empty_like(target)
    edges = np.flatnonzero(np.diff(phi)) + 1
    y = y0
    for lo, hi in zip(np.concatenate([[0], edges]), np.concatenate([edges, [len(target)]])):
        p = phi[lo]
        out[lo:hi], _ = lfilter([1.0 - p], [1.0, -p], target[lo:hi], zi=[p * y])
        y = out[hi - 1]
    return out


def _noise(rng: np.random.Generator, std: float, n: int) -> np.ndarray:
    if std == 0:
        return np.zeros(n)
    return np.clip(rng.normal(0.0, std, n), -3.0 * std, 3.0 * std)


def simulate(schedule: np.ndarray, apt: ApartmentParams, season_profile: SeasonProfile | None = None,
             start=0, seed: int = 0, source_id: str = "") -> SensorSeries:
    """Sensor readings driven by ``schedule`` (one occupant when 1).

    Sample k reports the state at the end of its 30 s interval, with the
    interval's occupancy applied throughout. The initial state is the vacant
    equilibrium.
    """
    u = np.asarray(schedule, dtype=np.float64)
    n = len(u)
    t0 = _epoch(start)
    ts = t0 + np.arange(n, dtype=np.int64) * SAMPLE_PERIOD
    prof = season_profile or SeasonProfile.neutral()
    season = season_index(ts) if n else np.zeros(0, np.int64)
    rng = np.random.default_rng(seed)
    dt = float(SAMPLE_PERIOD)

    # per-stay activity level, mean one in expectation
    state, length = sojourns(schedule)
    s = apt.activity_spread
    mult = np.exp(rng.normal(-0.5 * s * s, s, len(state))) if s > 0 else np.ones(len(state))
    activity = np.repeat(mult, length) if n else np.zeros(0)

    ach = apt.ventilation_rate * np.asarray(prof.ach_factor)[season]
    a = ach / 3600.0
    co2_target = apt.outdoor_co2 + u * activity * apt.co2_gen_per_person / (apt.volume * a)
    co2 = _relax(co2_target, np.exp(-a * dt), apt.outdoor_co2)

    hour = (ts % 86400) / 3600.0
    t_target = (apt.setpoint_temp + np.asarray(prof.setpoint_offset)[season]
                + apt.temp_diurnal_amp * np.cos(2 * np.pi * (hour - 16.0) / 24.0)
                + apt.occupant_temp_gain * u)
    phi_t = np.full(n, math.exp(-dt / (apt.thermal_time_constant * 3600.0)))
    temp = _relax(t_target, phi_t, t_target[0] - apt.occupant_temp_gain * u[0] if n else 0.0)

    if apt.rh_drift_std > 0 and n:
        rho = math.exp(-dt / (apt.rh_drift_tau * 3600.0))
        eps = rng.normal(0.0, apt.rh_drift_std * math.sqrt(1 - rho * rho), n)
        drift, _ = lfilter([1.0], [1.0, -rho], eps, zi=[rho * rng.normal(0.0, apt.rh_drift_std)])
    else:
        drift = np.zeros(n)
    rh_target = apt.rh_baseline + np.asarray(prof.rh_offset)[season] + apt.rh_occupant_gain * u + drift
    phi_rh = np.full(n, math.exp(-dt / (apt.rh_time_constant * 3600.0)))
    rh = _relax(rh_target, phi_rh, rh_target[0] - apt.rh_occupant_gain * u[0] if n else 0.0)

    noise = apt.noise_std
    co2 = np.clip(co2 + _noise(rng, noise.get("co2", 0.0), n), *RANGES["co2"])
    temp = np.clip(temp + _noise(rng, noise.get("t_indoor", 0.0), n), *RANGES["t_indoor"])
    rh = np.clip(rh + _noise(rng, noise.get("rh", 0.0), n), *RANGES["rh"])
    return SensorSeries(ts, co2, temp, rh, np.asarray(schedule, dtype=np.int8), source_id=source_id)


# ---------------------------------------------------------------------------
# scenarios

DIGITAL_TIMETABLE = ((6.5, 7.5), (12.0, 12.75), (17.5, 18.5), (19.25, 20.25), (21.0, 22.0))


@dataclass
class Scenario:
    name: str
    series: SensorSeries
    apartment: ApartmentParams
    scheduler: SchedulerParams | None
    season_profile: SeasonProfile
    start: str
    months: float
    split: SplitSpec | None = None
    timetable: tuple | None = None
    noise_seed: int = 0

    def params_dict(self) -> dict:
        return {
            "name": self.name,
            "start": self.start,
            "months": self.months,
            "apartment": self.apartment.to_dict(),
            "scheduler": None if self.scheduler is None else self.scheduler.to_dict(),
            "timetable": None if self.timetable is None else [list(b) for b in self.timetable],
            "season_profile": self.season_profile.to_dict(),
            "noise_seed": self.noise_seed,
            "split": None if self.split is None else self.split.to_dict(),
        }


def _sub_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def _horizon_days(start: str, months: float) -> float:
    t0 = pd.Timestamp(start)
    whole = int(months)
    end = t0 + pd.DateOffset(months=whole)
    days = (end - t0).total_seconds() / 86400.0
    return days + (months - whole) * 30.4375


def _chronological(ts: np.ndarray, weights) -> SplitSpec:
    w = np.asarray(weights, dtype=np.float64)
    cum = np.cumsum(w) / w.sum()
    span = ts[-1] - ts[0] + SAMPLE_PERIOD
    bounds = [ts[0] + int(round(c * span / SAMPLE_PERIOD)) * SAMPLE_PERIOD for c in cum[:2]]
    return SplitSpec(float(bounds[0]), float(bounds[1]))


def reference_apartment(scale_noise: float = 1.0) -> ApartmentParams:
    apt = ApartmentParams()
    return replace(apt, noise_std={k: v * scale_noise for k, v in apt.noise_std.items()})


def make_scenarios(seed: int = 0, months: float = 18.0, split_weights=(16.5, 5.0, 3.5),
                   start: str = "2022-06-01", transfer_months: float = 3.0,
                   digital_start: str = "2023-04-01", transfer_start: str = "2023-09-01",
                   apartment: ApartmentParams | None = None, scheduler: SchedulerParams | None = None,
                   season_profile: SeasonProfile | None = None) -> dict:
    """Reference apartment (chronological split), clean digital-model data, and a second apartment.

    The digital set reuses the reference physics with all noise, drift and
    activity variation switched off and a fixed daily timetable. The second
    apartment is larger, better ventilated, noisier and differently used.
    """
    prof = season_profile or SeasonProfile()
    apt0 = apartment or ApartmentParams()
    sched0 = replace(scheduler or SchedulerParams(), seed=_sub_seed(seed, 0, 0))
    days0 = _horizon_days(start, months)
    s0 = simulate(gen_schedule(sched0, days0, start), apt0, prof, start,
                  seed=_sub_seed(seed, 0, 1), source_id="scenario0")
    sc0 = Scenario("scenario0", s0, apt0, sched0, prof, start, months,
                   _chronological(s0.timestamp, split_weights), noise_seed=_sub_seed(seed, 0, 1))

    apt1 = replace(apt0, noise_std={k: 0.0 for k in apt0.noise_std}, rh_drift_std=0.0,
                   activity_spread=0.0)
    days1 = _horizon_days(digital_start, transfer_months)
    s1 = simulate(timetable_schedule(DIGITAL_TIMETABLE, days1, digital_start), apt1, prof,
                  digital_start, seed=_sub_seed(seed, 1, 1), source_id="scenario1")
    sc1 = Scenario("scenario1", s1, apt1, None, prof, digital_start, transfer_months,
                   timetable=DIGITAL_TIMETABLE, noise_seed=_sub_seed(seed, 1, 1))

    apt2 = replace(
        apt0,
        volume=apt0.volume * 1.3,
        ventilation_rate=apt0.ventilation_rate * 1.4,
        thermal_time_constant=apt0.thermal_time_constant * 0.8,
        setpoint_temp=apt0.setpoint_temp + 0.8,
        occupant_temp_gain=apt0.occupant_temp_gain * 0.7,
        rh_baseline=apt0.rh_baseline + 4.0,
        rh_occupant_gain=apt0.rh_occupant_gain * 0.75,
        rh_time_constant=apt0.rh_time_constant * 1.3,
        rh_drift_std=apt0.rh_drift_std * 1.5,
        activity_spread=apt0.activity_spread * 2.0,
        noise_std={k: v * 1.5 for k, v in apt0.noise_std.items()},
    )
    sched2 = SchedulerParams(mean_occupied_duration=35.0, mean_vacant_duration=40.0,
                             diurnal_modulation=0.8, peak_hour=18.0, min_duration=0.5,
                             seed=_sub_seed(seed, 2, 0))
    days2 = _horizon_days(transfer_start, transfer_months)
    s2 = simulate(gen_schedule(sched2, days2, transfer_start), apt2, prof, transfer_start,
                  seed=_sub_seed(seed, 2, 1), source_id="scenario2")
    sc2 = Scenario("scenario2", s2, apt2, sched2, prof, transfer_start, transfer_months,
                   noise_seed=_sub_seed(seed, 2, 1))
    return {"scenario0": sc0, "scenario1": sc1, "scenario2": sc2}
