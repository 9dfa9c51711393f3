"""Behavioral model of one gated InGaAs APD channel.

A detector is gated in Geiger mode once per gate period and sits in linear
mode the rest of the time. Carrier traps are populated by avalanches and by
bright pulses; trapped carriers are released later as afterpulses. The trap
population is kept as an explicit event log because contributions combine as
a probabilistic union, not additively.

Times are integer nanoseconds. Trap lifetimes are given in microseconds in
config files and converted on load.
"""

from __future__ import annotations

import configparser
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .optics import ThresholdCurve

# 13 lifetimes keeps one avalanche event (scale up to ~3.7) below 1e-6 at the horizon
PRUNE_FACTOR = 13.0


class DeadtimeMode(enum.Enum):
    REJECT = "REJECT"
    ACCEPT_AND_EXTEND = "ACCEPT_AND_EXTEND"


class CarrierSource(enum.Enum):
    HALF_POWER = "HALF_POWER"
    FULL_POWER = "FULL_POWER"
    AVALANCHE = "AVALANCHE"


class DeadTimeActive(RuntimeError):
    """Raised when a gate is requested while the detector is dead."""


@dataclass(frozen=True)
class TrapLevel:
    amplitude: float
    lifetime_us: float

    def __post_init__(self):
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError(f"trap amplitude must be in [0, 1], got {self.amplitude}")
        if not self.lifetime_us > 0.0:
            raise ValueError(f"trap lifetime must be > 0, got {self.lifetime_us}")

    @property
    def lifetime_ns(self) -> float:
        return self.lifetime_us * 1000.0


@dataclass(frozen=True)
class GammaTable:
    """Amplitude corrections per carrier-generating process."""

    half_power: float = 1.0
    full_power_applications: int = 2
    avalanche: float = 1.0

    def __post_init__(self):
        if min(self.half_power, self.avalanche) < 0:
            raise ValueError("gamma corrections must be >= 0")
        if int(self.full_power_applications) != self.full_power_applications or self.full_power_applications < 1:
            raise ValueError("full_power_applications must be a positive integer")


@dataclass(frozen=True)
class DetectorParams:
    dark_prob: float
    traps: tuple[TrapLevel, TrapLevel]
    gammas: GammaTable = field(default_factory=GammaTable)
    quantum_efficiency: float = 0.1
    dead_time_us: float = 10.0
    threshold_curve: ThresholdCurve | None = None
    deadtime_mode: DeadtimeMode = DeadtimeMode.REJECT
    deadtime_detection_prob: float = 0.99985
    name: str = ""

    def __post_init__(self):
        for label in ("dark_prob", "quantum_efficiency", "deadtime_detection_prob"):
            value = getattr(self, label)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{label} must be in [0, 1], got {value}")
        if not self.dead_time_us > 0:
            raise ValueError("dead_time_us must be > 0")
        if len(self.traps) != 2:
            raise ValueError("exactly two trap levels are required")
        object.__setattr__(self, "traps", tuple(self.traps))

    @property
    def dead_time_ns(self) -> int:
        return int(round(self.dead_time_us * 1000.0))

    @property
    def prune_horizon_ns(self) -> int:
        return int(math.ceil(PRUNE_FACTOR * max(t.lifetime_ns for t in self.traps)))

    def with_changes(self, **changes) -> DetectorParams:
        return replace(self, **changes)

    def trap_response(self, dt_ns: float) -> float:
        """Unscaled sum of trap contributions ``dt_ns`` after carrier generation."""
        return sum(t.amplitude * math.exp(-dt_ns / t.lifetime_ns) for t in self.traps)


@dataclass(frozen=True)
class CarrierEvent:
    time: int
    scale: float


@dataclass
class DetectorState:
    events: list[CarrierEvent] = field(default_factory=list)
    dead_until: int | None = None
    now: int = 0

    def is_dead(self, t: int | None = None) -> bool:
        t = self.now if t is None else t
        return self.dead_until is not None and t < self.dead_until

    def advance_to(self, t: int, params: DetectorParams) -> None:
        if t < self.now:
            raise ValueError(f"time cannot go backwards ({t} < {self.now})")
        self.now = int(t)
        self.prune(params.prune_horizon_ns)

    def prune(self, horizon_ns: int) -> None:
        # events are appended in time order
        k = 0
        while k < len(self.events) and self.now - self.events[k].time >= horizon_ns:
            k += 1
        if k:
            del self.events[:k]

    def set_dead(self, t: int, params: DetectorParams) -> None:
        end = int(t) + params.dead_time_ns
        self.dead_until = end if self.dead_until is None else max(self.dead_until, end)


def afterpulse_probability(state: DetectorState, params: DetectorParams, t_query: int) -> float:
    """Click probability of a gate at ``t_query`` from dark counts and trapped carriers.

    Each logged event contributes ``c = clamp(scale * sum_i A_i exp(-dt/tau_i), 0, 1)``
    and the contributions are combined as a union with the dark-count floor.
    """
    survive = 1.0 - params.dark_prob
    for ev in state.events:
        dt = t_query - ev.time
        if dt < 0:
            raise ValueError(f"event at {ev.time} ns is after query time {t_query} ns")
        c = ev.scale * params.trap_response(dt)
        if not math.isfinite(c):
            raise FloatingPointError(f"non-finite afterpulse contribution from event {ev}")
        survive *= 1.0 - min(max(c, 0.0), 1.0)
    return 1.0 - survive


def register_carriers(state: DetectorState, params: DetectorParams, t: int, source: CarrierSource) -> DetectorState:
    t = int(t)
    if state.events and t < state.events[-1].time:
        raise ValueError("carrier events must be registered in time order")
    g = params.gammas
    if source is CarrierSource.HALF_POWER:
        state.events.append(CarrierEvent(t, g.half_power))
    elif source is CarrierSource.FULL_POWER:
        # one union term per application, not a single event with doubled scale
        state.events.extend(CarrierEvent(t, g.half_power) for _ in range(g.full_power_applications))
    elif source is CarrierSource.AVALANCHE:
        state.events.append(CarrierEvent(t, g.avalanche))
    else:
        raise ValueError(f"unknown carrier source {source!r}")
    return state


def photon_click_probability(mean_photons: float, params: DetectorParams) -> float:
    return -math.expm1(-mean_photons * params.quantum_efficiency)


def process_gate(state: DetectorState, params: DetectorParams, signal_mean_photons: float, rng) -> bool:
    """Run one Geiger gate at ``state.now``.

    On a click the detector registers avalanche carriers and enters dead time.
    """
    if state.is_dead():
        raise DeadTimeActive(f"gate at {state.now} ns requested during dead time (until {state.dead_until} ns)")
    if signal_mean_photons < 0:
        raise ValueError("mean photon number must be >= 0")
    p_photon = photon_click_probability(signal_mean_photons, params)
    p_ap = afterpulse_probability(state, params, state.now)
    p_click = 1.0 - (1.0 - p_photon) * (1.0 - p_ap)
    click = bool(rng.random() < p_click)
    if click:
        register_carriers(state, params, state.now, CarrierSource.AVALANCHE)
        state.set_dead(state.now, params)
    return click


def process_bright_pulse(
    state: DetectorState,
    params: DetectorParams,
    incident_power: float,
    delay_after_gate: float,
    rng,
    source: CarrierSource = CarrierSource.HALF_POWER,
) -> bool:
    """Linear-mode response to a bright pulse ``delay_after_gate`` ns after the gate at ``state.now``.

    Carriers are registered whether or not the pulse clicks. During dead time
    the outcome is delegated to :func:`handle_deadtime_click`.
    """
    if incident_power < 0:
        raise ValueError("incident power must be >= 0")
    if incident_power == 0:
        return False
    if params.threshold_curve is None:
        raise ValueError(f"detector {params.name or '?'} has no threshold curve")
    p_click = params.threshold_curve.click_probability(incident_power, delay_after_gate)
    t = state.now + int(round(delay_after_gate))
    register_carriers(state, params, t, source)
    if state.is_dead(t):
        if p_click >= 1.0:
            return handle_deadtime_click(state, params, t, rng)
        return False
    click = bool(p_click >= 1.0 or (p_click > 0.0 and rng.random() < p_click))
    if click:
        state.set_dead(t, params)
    return click


def handle_deadtime_click(state: DetectorState, params: DetectorParams, t: int, rng) -> bool:
    if params.deadtime_mode is DeadtimeMode.REJECT:
        return False
    if rng.random() < params.deadtime_detection_prob:
        state.dead_until = int(t) + params.dead_time_ns
        return True
    return False


def load_detector_config(path: str | Path, threshold_curve: ThresholdCurve | None = None) -> DetectorParams:
    """Read a detector parameter set from an INI-style config file.

    If the file names a ``threshold_file`` and no curve is passed in, the curve
    for this detector's ``channel`` is loaded relative to the config file.
    """
    path = Path(path)
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(f"detector config not found: {path}")
    try:
        det = cp["detector"]
        traps = tuple(
            TrapLevel(cp.getfloat(sec, "amplitude"), cp.getfloat(sec, "lifetime_us")) for sec in ("trap.1", "trap.2")
        )
        gam = cp["gamma"]
        gammas = GammaTable(
            half_power=gam.getfloat("half_power", 1.0),
            full_power_applications=gam.getint("full_power_applications", 2),
            avalanche=gam.getfloat("avalanche", 1.0),
        )
        if threshold_curve is None and det.get("threshold_file"):
            from .optics import load_threshold_curves

            curves = load_threshold_curves(path.parent / det["threshold_file"])
            threshold_curve = curves[det.getint("channel", 0)]
        return DetectorParams(
            dark_prob=det.getfloat("dark_prob"),
            traps=traps,
            gammas=gammas,
            quantum_efficiency=det.getfloat("quantum_efficiency", 0.1),
            dead_time_us=det.getfloat("dead_time_us", 10.0),
            threshold_curve=threshold_curve,
            deadtime_mode=DeadtimeMode(det.get("deadtime_mode", "REJECT").upper()),
            deadtime_detection_prob=det.getfloat("deadtime_detection_prob", 0.99985),
            name=det.get("name", path.stem),
        )
    except (KeyError, configparser.Error, ValueError) as exc:
        raise ValueError(f"invalid detector config {path}: {exc}") from exc
